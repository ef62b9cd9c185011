"""Training loops: contrastive pretraining of the dual encoder, prompt
training on top of the frozen backbone, evaluation, and the ablation
harness.

Prompt training follows the staged recipe: extract visual features once
(they are constant while the visual encoder is frozen), then per iteration
generate both prompt branches, apply the supervision losses and the fused
classification loss, and step AdamW on exactly {both Bonders, both query
sets, the projector} plus LoRA adapters when enabled.  The total loss is
the plain sum L_cls + L_con + L_ctg; toggled-off terms contribute an exact
float zero, so the logged breakdown always sums to the logged total.
"""

import os
from dataclasses import dataclass, replace

import numpy as np

from tgpt import config as configmod
from tgpt import data as datamod
from tgpt import head as headmod
from tgpt import lora as loramod
from tgpt import rng as rngmod
from tgpt import supervision
from tgpt.bonder import make_branch_pair
from tgpt.checkpoint import load_checkpoint, save_checkpoint
from tgpt.encoders import (ImageEncoder, ImageEncoderConfig, TextEncoder,
                           TextEncoderConfig, VisualFeatures)
from tgpt.layers import prefix_params
from tgpt.numerics import ops
from tgpt.numerics.adamw import AdamW
from tgpt.numerics.tensor import Tensor, no_grad
from tgpt.tokenizer import EmbeddingTable

METRICS_HEADER = "iter,L_cls,L_con,L_ctg,L_total,val_acc"


class TrainerError(RuntimeError):
    pass


def _fmt(x) -> str:
    return repr(float(x))


@dataclass
class Backbone:
    image_encoder: ImageEncoder
    text_encoder: TextEncoder
    table: EmbeddingTable

    def params(self) -> dict:
        out = prefix_params("image", self.image_encoder.params())
        out.update(prefix_params("text", self.text_encoder.params()))
        out.update(self.table.params())
        return out

    def freeze(self) -> None:
        self.image_encoder.freeze()
        self.text_encoder.freeze()
        self.table.freeze()


@dataclass
class PromptModel:
    backbone: Backbone
    bonder_ctg: object
    bonder_con: object
    projector: headmod.Projector
    adapters: dict

    def trainable_params(self) -> dict:
        """Named trainables, deduplicated (shared bonder weights appear
        under the category branch's name only)."""
        out = {}
        seen = set()
        groups = [
            ("bonder_ctg", self.bonder_ctg.params()),
            ("bonder_con", self.bonder_con.params()),
            ("", self.projector.params()),
        ]
        for prefix, params in groups:
            for name, p in params.items():
                if id(p) in seen:
                    continue
                seen.add(id(p))
                out[f"{prefix}.{name}" if prefix else name] = p
        for adapter in self.adapters.values():
            out.update(adapter.params())
        return out

    def all_params(self) -> dict:
        out = self.backbone.params()
        out.update(self.trainable_params())
        return out


def build_backbone(cfg: configmod.Config, d_v: int, seed: int) -> Backbone:
    img_cfg = ImageEncoderConfig(image_size=cfg.image_size, patch_size=cfg.patch_size,
                                 d=cfg.d, depth=cfg.encoder_depth, heads=cfg.heads)
    txt_cfg = TextEncoderConfig(d=cfg.d, depth=cfg.encoder_depth, heads=cfg.heads,
                                max_len=cfg.max_len, pooling=cfg.prompt_pooling)
    image_encoder = ImageEncoder(img_cfg, rngmod.stream(seed, "init/image"))
    text_encoder = TextEncoder(txt_cfg, rngmod.stream(seed, "init/text"))
    table = EmbeddingTable(d_v, cfg.d, rngmod.stream(seed, "init/vocab"))
    return Backbone(image_encoder, text_encoder, table)


def _load_params_into(params: dict, stored: dict, context: str) -> None:
    missing = sorted(set(params) - set(stored))
    if missing:
        raise TrainerError(f"{context}: checkpoint lacks parameters {missing[:4]}...")
    for name, p in params.items():
        arr = stored[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise TrainerError(
                f"{context}: parameter {name} has shape {arr.shape}, "
                f"expected {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype).copy()


def load_backbone(ckpt_path: str) -> tuple:
    """Rebuild a frozen backbone from an encoder or model checkpoint.
    Returns (backbone, stored config dict, stored params)."""
    if not os.path.exists(ckpt_path):
        raise TrainerError(f"missing checkpoint {ckpt_path}")
    stored, meta = load_checkpoint(ckpt_path)
    cfg = configmod.from_dict(meta)
    d_v = int(meta["d_v"])
    backbone = build_backbone(cfg, d_v, seed=0)
    _load_params_into(backbone.params(), stored, os.path.basename(ckpt_path))
    backbone.freeze()
    return backbone, meta, stored


@dataclass
class PretrainResult:
    checkpoint: str
    rows: list
    first_loss: float


def pretrain(dataset: datamod.GlyphDataset, cfg: configmod.Config,
             out_dir: str) -> PretrainResult:
    """Symmetric in-batch contrastive pretraining of both encoders.

    Captions are the per-sample content sentences, with a fraction swapped
    for category template sentences so class names and template words also
    land in the text encoder's training distribution (zero-shot prediction
    encodes template sentences).
    """
    if cfg.pretrain_batch_size < 2:
        raise TrainerError("contrastive pretraining needs batch size >= 2")
    if dataset.vocab is None or dataset.descriptions is None:
        raise TrainerError("pretraining needs the dataset's text files")
    seed = cfg.seed
    backbone = build_backbone(cfg, dataset.vocab.d_v, seed)
    registry = dataset.registry()
    params = backbone.params()
    opt = AdamW(params, lr=cfg.pretrain_lr, weight_decay=cfg.weight_decay)
    batch_rng = rngmod.stream(seed, "pretrain/batch")
    caption_rng = rngmod.stream(seed, "pretrain/captions")
    bs = cfg.pretrain_batch_size
    labels_arange = np.arange(bs, dtype=np.int64)
    rows = []
    first_loss = None
    for it in range(1, cfg.pretrain_iterations + 1):
        idx = batch_rng.choice(len(dataset), size=bs, replace=False)
        sentences = []
        for i in idx:
            if caption_rng.random() < cfg.pretrain_category_mix:
                sentences.append(
                    registry.category_description(int(dataset.labels[i]), caption_rng)
                )
            else:
                sentences.append(dataset.descriptions[i])
        ids, mask = dataset.vocab.tokenize_batch(sentences, cfg.max_len)
        v = backbone.image_encoder.encode(dataset.images[idx]).v
        t = backbone.text_encoder.encode_ids(backbone.table, ids, mask)
        logits = ops.scale(ops.matmul(v, ops.transpose(t, (1, 0))), 1.0 / cfg.pretrain_tau)
        loss_i = ops.cross_entropy_logits(logits, labels_arange)
        loss_t = ops.cross_entropy_logits(ops.transpose(logits, (1, 0)), labels_arange)
        loss = ops.scale(ops.add(loss_i, loss_t), 0.5)
        if first_loss is None:
            first_loss = loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it == 1 or it % cfg.val_every == 0:
            rows.append((it, loss.item()))
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    ckpt_path = os.path.join(ckpt_dir, "encoder.ckpt")
    meta = configmod.to_dict(cfg)
    meta["d_v"] = str(dataset.vocab.d_v)
    meta["vocab_sha"] = dataset.vocab.digest()
    meta["kind"] = "encoder"
    save_checkpoint(ckpt_path, params, meta)
    csv_path = os.path.join(out_dir, "pretrain_metrics.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("iter,loss\n")
        for it, value in rows:
            fh.write(f"{it},{_fmt(value)}\n")
    return PretrainResult(ckpt_path, rows, first_loss)


def build_prompt_model(cfg: configmod.Config, backbone: Backbone, n_classes: int,
                       seed: int) -> PromptModel:
    streams = {
        "q_ctg": rngmod.stream(seed, "init/bonder/q_ctg"),
        "q_con": rngmod.stream(seed, "init/bonder/q_con"),
        "w_ctg": rngmod.stream(seed, "init/bonder/w_ctg"),
        "w_con": rngmod.stream(seed, "init/bonder/w_con"),
    }
    bonder_ctg, bonder_con = make_branch_pair(
        d=cfg.d, heads=cfg.heads, k_ctg=cfg.k_ctg, k_con=cfg.k_con,
        depth=cfg.bonder_depth, structure=cfg.bonder_structure,
        init_streams=streams, share_weights=cfg.bonder_share_weights,
    )
    projector = headmod.Projector(cfg.d, n_classes, rngmod.stream(seed, "init/projector"))
    adapters = {}
    if cfg.lora_policy != "none":
        adapters, _report = loramod.apply_placement(
            backbone.image_encoder, backbone.text_encoder,
            cfg.lora_policy, cfg.lora_r, rngmod.stream(seed, "init/lora"),
        )
    return PromptModel(backbone, bonder_ctg, bonder_con, projector, adapters)


def _visual_is_static(cfg: configmod.Config) -> bool:
    """True when no trainable parameter sits inside the image encoder, so
    its features can be extracted once up front."""
    return cfg.lora_policy in ("none", "mlp_text")


def _encode_images_static(image_encoder, images: np.ndarray, batch: int = 64):
    vs, xs = [], []
    with no_grad():
        for lo in range(0, len(images), batch):
            feats = image_encoder.encode(images[lo : lo + batch])
            vs.append(feats.v.data)
            xs.append(feats.x.data)
    return np.concatenate(vs), np.concatenate(xs)


def _forward_logits(model: PromptModel, visual: VisualFeatures):
    p_con = model.bonder_con.forward(visual)
    p_ctg = model.bonder_ctg.forward(visual)
    t_con = model.backbone.text_encoder.encode_prompts(p_con)
    t_ctg = model.backbone.text_encoder.encode_prompts(p_ctg)
    logits = headmod.fuse_logits(visual.v, t_con, t_ctg, model.projector)
    return logits, (p_con, p_ctg, t_con, t_ctg)


def _predict(model: PromptModel, images: np.ndarray, cache=None, batch: int = 64,
             want_embeddings: bool = False):
    preds, embeds = [], []
    with no_grad():
        for lo in range(0, len(images), batch):
            if cache is not None:
                visual = VisualFeatures(Tensor(cache[0][lo : lo + batch]),
                                        Tensor(cache[1][lo : lo + batch]))
            else:
                visual = model.backbone.image_encoder.encode(images[lo : lo + batch])
            logits, (_, _, t_con, t_ctg) = _forward_logits(model, visual)
            preds.append(logits.data.argmax(axis=1))
            if want_embeddings:
                fused = 0.5 * (t_con.data + t_ctg.data)
                embeds.append(np.concatenate([visual.v.data, fused], axis=1))
    preds = np.concatenate(preds)
    return (preds, np.concatenate(embeds)) if want_embeddings else (preds, None)


@dataclass
class TrainResult:
    checkpoint: str
    metrics_path: str
    rows: list
    best_val_acc: float
    split: datamod.FewShotSplit


def _write_split_files(split: datamod.FewShotSplit, split_dir: str) -> None:
    os.makedirs(split_dir, exist_ok=True)
    for name, ids in (("train", split.train), ("val", split.val), ("test", split.test)):
        with open(os.path.join(split_dir, f"{name}.txt"), "w", encoding="utf-8") as fh:
            fh.write("".join(f"{int(i)}\n" for i in ids))


def model_checkpoint_path(out_dir: str, shots: int, seed: int) -> str:
    return os.path.join(out_dir, "checkpoints", f"model-{shots}shot-seed{seed}.ckpt")


def train(dataset: datamod.GlyphDataset, cfg: configmod.Config, shots: int,
          out_dir: str, encoder_ckpt: str = None) -> TrainResult:
    if dataset.vocab is None or dataset.descriptions is None:
        raise TrainerError("prompt training needs the dataset's text files")
    seed = cfg.seed
    encoder_ckpt = encoder_ckpt or os.path.join(out_dir, "checkpoints", "encoder.ckpt")
    backbone, meta, _ = load_backbone(encoder_ckpt)
    if int(meta["d"]) != cfg.d or int(meta["max_len"]) != cfg.max_len:
        raise TrainerError(
            f"config width/max_len ({cfg.d}/{cfg.max_len}) do not match the "
            f"encoder checkpoint ({meta['d']}/{meta['max_len']})"
        )
    if int(meta["d_v"]) != dataset.vocab.d_v:
        raise TrainerError("encoder checkpoint was pretrained on a different vocabulary")
    stored_sha = meta.get("vocab_sha")
    if stored_sha is not None and stored_sha != dataset.vocab.digest():
        raise TrainerError(
            "encoder checkpoint vocabulary does not match this dataset; "
            "pretrain and train datasets must share a variant"
        )
    backbone.text_encoder.config.pooling = cfg.prompt_pooling

    split = datamod.sample_few_shot(dataset.labels, shots, seed)
    _write_split_files(split, os.path.join(out_dir, "splits", f"{shots}shot-seed{seed}"))

    model = build_prompt_model(cfg, backbone, dataset.n_classes, seed)
    trainables = model.trainable_params()
    opt = AdamW(trainables, lr=cfg.lr, weight_decay=cfg.weight_decay)

    # Supervision targets: per-sample content sentences for the train ids,
    # one category sentence per class (template drawn once, deterministic).
    vocab = dataset.vocab
    content_ids, content_mask = vocab.tokenize_batch(
        [dataset.descriptions[i] for i in split.train], cfg.k_con
    )
    registry = dataset.registry()
    template_rng = rngmod.stream(seed, "train/templates")
    category_sentences = [
        registry.category_description(c, template_rng) for c in range(dataset.n_classes)
    ]
    category_ids, category_mask = vocab.tokenize_batch(category_sentences, cfg.k_ctg)

    train_labels = dataset.labels[split.train]
    need_con = cfg.supervision_terms in ("both", "content_only")
    need_ctg = cfg.supervision_terms in ("both", "category_only")

    static_visual = _visual_is_static(cfg)
    if static_visual:
        train_cache = _encode_images_static(backbone.image_encoder,
                                            dataset.images[split.train])
        val_cache = _encode_images_static(backbone.image_encoder,
                                          dataset.images[split.val])
    else:
        train_cache = val_cache = None

    batch_rng = rngmod.stream(seed, "train/batch")
    m_train = len(split.train)
    bs = min(cfg.batch_size, m_train)
    val_labels = dataset.labels[split.val]
    rows = []
    best_val = -1.0
    best_state = {name: p.data.copy() for name, p in trainables.items()}
    zero = lambda: Tensor(np.zeros((), dtype=np.float32))  # noqa: E731

    for it in range(1, cfg.iterations + 1):
        pos = batch_rng.choice(m_train, size=bs, replace=False)
        if static_visual:
            visual = VisualFeatures(Tensor(train_cache[0][pos]),
                                    Tensor(train_cache[1][pos]))
        else:
            visual = backbone.image_encoder.encode(dataset.images[split.train[pos]])
        y = train_labels[pos]

        p_con = model.bonder_con.forward(visual)
        p_ctg = model.bonder_ctg.forward(visual)
        l_con = supervision.supervision_space_loss(
            cfg.supervision_space, p_con, content_ids[pos], content_mask[pos],
            backbone.table, backbone.text_encoder,
        ) if need_con else zero()
        l_ctg = supervision.supervision_space_loss(
            cfg.supervision_space, p_ctg, category_ids[y], category_mask[y],
            backbone.table, backbone.text_encoder,
        ) if need_ctg else zero()
        t_con = backbone.text_encoder.encode_prompts(p_con)
        t_ctg = backbone.text_encoder.encode_prompts(p_ctg)
        logits = headmod.fuse_logits(visual.v, t_con, t_ctg, model.projector)
        l_cls = headmod.classification_loss(logits, y)
        total = ops.add(ops.add(l_cls, l_con), l_ctg)

        opt.zero_grad()
        total.backward()
        opt.step()

        if it % cfg.val_every == 0:
            preds, _ = _predict(model, dataset.images[split.val], cache=val_cache)
            val_acc = float((preds == val_labels).mean())
            rows.append((it, l_cls.item(), l_con.item(), l_ctg.item(),
                         total.item(), val_acc))
            if val_acc >= best_val:
                best_val = val_acc
                best_state = {name: p.data.copy() for name, p in trainables.items()}

    for name, p in trainables.items():
        p.data = best_state[name]

    ckpt_path = model_checkpoint_path(out_dir, shots, seed)
    os.makedirs(os.path.dirname(ckpt_path), exist_ok=True)
    meta_out = configmod.to_dict(cfg)
    meta_out["d_v"] = str(vocab.d_v)
    meta_out["vocab_sha"] = vocab.digest()
    meta_out["n_classes"] = str(dataset.n_classes)
    meta_out["shots"] = str(shots)
    meta_out["kind"] = "model"
    save_checkpoint(ckpt_path, model.all_params(), meta_out)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for it, l_cls, l_con, l_ctg, l_total, val_acc in rows:
            fh.write(f"{it},{_fmt(l_cls)},{_fmt(l_con)},{_fmt(l_ctg)},"
                     f"{_fmt(l_total)},{_fmt(val_acc)}\n")
    return TrainResult(ckpt_path, metrics_path, rows, best_val, split)


def load_model(ckpt_path: str) -> tuple:
    """Rebuild a full prompt model from a model checkpoint. Returns
    (model, cfg, meta)."""
    if not os.path.exists(ckpt_path):
        raise TrainerError(f"missing checkpoint {ckpt_path}")
    stored, meta = load_checkpoint(ckpt_path)
    if meta.get("kind") != "model":
        raise TrainerError(f"{ckpt_path} is not a trained model checkpoint")
    cfg = configmod.from_dict(meta)
    backbone = build_backbone(cfg, int(meta["d_v"]), seed=0)
    model = build_prompt_model(cfg, backbone, int(meta["n_classes"]), seed=0)
    _load_params_into(model.all_params(), stored, os.path.basename(ckpt_path))
    backbone.freeze()
    return model, cfg, meta


@dataclass
class EvalReport:
    accuracy: float
    per_class: dict
    predictions: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    embeddings: np.ndarray


def evaluate(ckpt_path: str, dataset: datamod.GlyphDataset, ids: np.ndarray,
             want_embeddings: bool = False) -> EvalReport:
    """Classify the given sample ids using images only.

    The dataset may be loaded with with_text=False; nothing on this path
    touches descriptions, templates, or the vocabulary.
    """
    model, _cfg, meta = load_model(ckpt_path)
    if int(meta["n_classes"]) != dataset.n_classes:
        raise TrainerError(
            f"checkpoint has {meta['n_classes']} classes, dataset has {dataset.n_classes}"
        )
    ids = np.asarray(ids)
    preds, embeds = _predict(model, dataset.images[ids],
                             want_embeddings=want_embeddings)
    labels = dataset.labels[ids]
    per_class = {}
    for c in range(dataset.n_classes):
        sel = labels == c
        if sel.any():
            per_class[c] = float((preds[sel] == c).mean())
    return EvalReport(
        accuracy=float((preds == labels).mean()),
        per_class=per_class, predictions=preds, labels=labels, ids=ids,
        embeddings=embeds,
    )


ABLATE_AXES = (
    ("supervision_terms", "ablate_supervision_terms"),
    ("supervision_space", "ablate_supervision_space"),
    ("bonder_structure", "ablate_bonder_structure"),
    ("bonder_depth", "ablate_bonder_depth"),
    ("lora_policy", "ablate_lora_policy"),
    ("lora_r", "ablate_lora_r"),
)

ABLATION_HEADER = "config,seed,shots,test_acc"


def ablate(dataset: datamod.GlyphDataset, cfg: configmod.Config, out_dir: str,
           encoder_ckpt: str) -> list:
    """Cross-product ablation: one training run per (config, seed, shots),
    with per-group seed means appended (seed column 'mean')."""
    import itertools

    axes = []
    for field_name, list_name in ABLATE_AXES:
        values = getattr(cfg, list_name)
        if values:
            axes.append((field_name, values))
    combos = [()]
    if axes:
        combos = list(itertools.product(*[values for _, values in axes]))
    rows = []
    for combo in combos:
        overrides = dict(zip([a[0] for a in axes], combo)) if axes else {}
        label = ";".join(f"{k}={v}" for k, v in overrides.items()) or "base"
        for shots in cfg.ablate_shots:
            accs = []
            for seed in cfg.ablate_seeds:
                run_cfg = replace(cfg, seed=seed, **overrides).validate()
                run_dir = os.path.join(out_dir, "ablate",
                                       label.replace(";", "_"), f"seed{seed}")
                os.makedirs(run_dir, exist_ok=True)
                result = train(dataset, run_cfg, shots, run_dir,
                               encoder_ckpt=encoder_ckpt)
                report = evaluate(result.checkpoint, dataset, result.split.test)
                rows.append((label, str(seed), shots, report.accuracy))
                accs.append(report.accuracy)
            rows.append((label, "mean", shots, float(np.mean(accs))))
    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(ABLATION_HEADER + "\n")
        for label, seed, shots, acc in rows:
            fh.write(f"{label},{seed},{shots},{_fmt(acc)}\n")
    return rows
