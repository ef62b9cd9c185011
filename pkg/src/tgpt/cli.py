"""Command line entry point.

Verbs: gen-data, pretrain, train, eval, gradcheck, ablate, costmodel.
Every verb takes --config/--out plus optional --seed/--shots overrides;
errors surface as one diagnostic line on stderr with exit code 1, and an
unknown verb prints usage with exit code 2.  TGPT_THREADS caps the worker
threads used by gen-data; TGPT_AUDIT=1 makes eval record every text file
it opens into out/audit.txt (the list must be empty: inference is
image-only).
"""

import argparse
import os
import sys

import numpy as np

VERBS = ("gen-data", "pretrain", "train", "eval", "gradcheck", "ablate", "costmodel")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tgpt", description="prompt-tuning workbench for the glyph benchmark"
    )
    sub = parser.add_subparsers(dest="verb", required=True, metavar="|".join(VERBS))
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", default=None, help="config file (key = value lines)")
        p.add_argument("--out", default="out", help="run directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--shots", type=int, default=None,
                       help="shots per class (1, 2, 4, 8 or 16)")
        p.add_argument("--data", default=None,
                       help="dataset directory (default: <out>/dataset)")
        if verb == "eval":
            p.add_argument("--ckpt", default=None,
                           help="model checkpoint (default: trained model for "
                                "--shots/--seed under <out>/checkpoints)")
        if verb == "gen-data":
            p.add_argument("--per-class", type=int, default=None, dest="per_class",
                           help="images per class (override; e.g. a larger "
                                "pretraining corpus)")
    return parser


def _load_config(args):
    from tgpt import config as configmod

    cfg = configmod.load(args.config) if args.config else configmod.Config()
    if args.seed is not None:
        if args.seed < 0:
            raise configmod.ConfigError(f"seed must be nonnegative, got {args.seed}")
        cfg.seed = args.seed
    return cfg.validate()


def _dataset_dir(args) -> str:
    return args.data if args.data else os.path.join(args.out, "dataset")


def _shots(args, cfg) -> int:
    return args.shots if args.shots is not None else cfg.ablate_shots[-1]


def _threads() -> int:
    raw = os.environ.get("TGPT_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"TGPT_THREADS must be an integer, got {raw!r}")
    if value < 1:
        raise ValueError(f"TGPT_THREADS must be >= 1, got {value}")
    return value


def cmd_gen_data(args) -> int:
    from tgpt import data as datamod

    cfg = _load_config(args)
    out = _dataset_dir(args)
    per_class = args.per_class if args.per_class is not None else cfg.per_class
    dataset = datamod.generate(
        out, seed=cfg.seed, per_class=per_class, image_size=cfg.image_size,
        variant=cfg.variant, noise_std=cfg.noise_std, jitter=cfg.jitter,
        distractor_max=cfg.distractor_max, workers=_threads(),
    )
    print(f"wrote {len(dataset)} images over {dataset.n_classes} classes to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from tgpt import data as datamod
    from tgpt import trainer

    cfg = _load_config(args)
    dataset = datamod.load(_dataset_dir(args))
    result = trainer.pretrain(dataset, cfg, args.out)
    print(f"pretrain: first loss {result.first_loss:.4f}, "
          f"last loss {result.rows[-1][1]:.4f}, saved {result.checkpoint}")
    return 0


def cmd_train(args) -> int:
    from tgpt import data as datamod
    from tgpt import trainer

    cfg = _load_config(args)
    shots = _shots(args, cfg)
    dataset = datamod.load(_dataset_dir(args))
    result = trainer.train(dataset, cfg, shots, args.out)
    print(f"train: {shots}-shot seed {cfg.seed}, best val acc "
          f"{result.best_val_acc:.4f}, saved {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from tgpt import audit
    from tgpt import config as configmod
    from tgpt import data as datamod
    from tgpt import trainer

    cfg = _load_config(args)
    shots = _shots(args, cfg)
    ckpt = args.ckpt or trainer.model_checkpoint_path(args.out, shots, cfg.seed)
    auditing = os.environ.get("TGPT_AUDIT", "") == "1"

    def run():
        dataset = datamod.load(_dataset_dir(args), with_text=False)
        split = datamod.sample_few_shot(dataset.labels, shots, cfg.seed)
        report = trainer.evaluate(ckpt, dataset, split.test,
                                  want_embeddings=cfg.eval_dump_embeddings)
        return dataset, report

    if auditing:
        with audit.record_opens() as opened:
            dataset, report = run()
        text_reads = audit.text_file_reads(opened)
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "audit.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"text_files_opened={len(text_reads)}\n")
            for path in text_reads:
                fh.write(path + "\n")
    else:
        dataset, report = run()

    os.makedirs(args.out, exist_ok=True)
    lines = [f"checkpoint={ckpt}", f"test_size={len(report.ids)}",
             f"accuracy={report.accuracy:.6f}"]
    for c in sorted(report.per_class):
        lines.append(f"class_{c}_acc={report.per_class[c]:.6f}")
    with open(os.path.join(args.out, "eval_report.txt"), "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))
    if cfg.eval_dump_embeddings:
        np.save(os.path.join(args.out, "embeddings.npy"), report.embeddings)
        np.save(os.path.join(args.out, "embedding_ids.npy"), report.ids)
    print(f"eval: accuracy {report.accuracy:.4f} on {len(report.ids)} test images")
    if auditing:
        print(f"eval: audit recorded {len(audit.text_file_reads(opened))} "
              f"text file opens")
    return 0


def _gradcheck_modules():
    """Finite-difference checks for each differentiable module, built tiny
    and in float64.  Yields (module name, CheckReport)."""
    from tgpt import head as headmod
    from tgpt import rng as rngmod
    from tgpt import supervision
    from tgpt.bonder import BonderConfig, Bonder
    from tgpt.encoders import (ImageEncoder, ImageEncoderConfig, TextEncoder,
                               TextEncoderConfig, VisualFeatures)
    from tgpt.numerics import gradcheck
    from tgpt.numerics.tensor import Tensor, use_dtype
    from tgpt.tokenizer import EmbeddingTable

    def weighted(out, rng):
        w = Tensor(rng.normal(0.0, 1.0, out.shape))
        from tgpt.numerics import ops
        return ops.tsum(ops.mul(out, w))

    with use_dtype(np.float64):
        reports = []
        reports.append(("kernels", gradcheck.check_kernels()))

        rng = rngmod.stream(11, "gradcheck/bonder")
        bonder = Bonder(BonderConfig(d=8, heads=2, k=3, depth=2,
                                     structure="cross_attention"),
                        rngmod.stream(11, "gradcheck/bonder/q"),
                        rngmod.stream(11, "gradcheck/bonder/w"))
        visual = VisualFeatures(Tensor(rng.normal(0.0, 1.0, (2, 8))),
                                Tensor(rng.normal(0.0, 1.0, (2, 4, 8))))
        reports.append(("bonder", gradcheck.check(
            lambda: weighted(bonder.forward(visual), rngmod.stream(11, "gradcheck/bonder/loss")),
            bonder.params(), max_elements=40,
            sample_rng=rngmod.stream(11, "gradcheck/bonder/sample"))))

        rng = rngmod.stream(12, "gradcheck/textenc")
        text_enc = TextEncoder(TextEncoderConfig(d=8, depth=1, heads=2, max_len=6),
                               rngmod.stream(12, "gradcheck/textenc/init"))
        prompts = Tensor(rng.normal(0.0, 1.0, (2, 3, 8)), requires_grad=True)
        params = {"prompts": prompts}
        params.update(text_enc.params())
        reports.append(("text_encoder", gradcheck.check(
            lambda: weighted(text_enc.encode_prompts(prompts),
                             rngmod.stream(12, "gradcheck/textenc/loss")),
            params, max_elements=40,
            sample_rng=rngmod.stream(12, "gradcheck/textenc/sample"))))

        rng = rngmod.stream(13, "gradcheck/imgenc")
        img_enc = ImageEncoder(ImageEncoderConfig(image_size=8, patch_size=4, d=8,
                                                  depth=1, heads=2),
                               rngmod.stream(13, "gradcheck/imgenc/init"))
        images = rng.uniform(0.0, 1.0, (2, 8, 8, 3))

        def image_loss():
            feats = img_enc.encode(images)
            loss_rng = rngmod.stream(13, "gradcheck/imgenc/loss")
            from tgpt.numerics import ops
            return ops.add(weighted(feats.v, loss_rng), weighted(feats.x, loss_rng))

        reports.append(("image_encoder", gradcheck.check(
            image_loss, img_enc.params(), max_elements=40,
            sample_rng=rngmod.stream(13, "gradcheck/imgenc/sample"))))

        rng = rngmod.stream(14, "gradcheck/supervision")
        table = EmbeddingTable(9, 8, rngmod.stream(14, "gradcheck/supervision/table"))
        p = Tensor(rng.normal(0.0, 1.0, (2, 4, 8)), requires_grad=True)
        ids = np.array([[1, 4, 5, 2], [1, 6, 2, 0]], dtype=np.int64)
        mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=np.float64)
        reports.append(("supervision", gradcheck.check(
            lambda: supervision.text_supervision_loss(p, ids, mask, table),
            {"p": p, "vocab.w": table.w}, max_elements=40,
            sample_rng=rngmod.stream(14, "gradcheck/supervision/sample"))))

        rng = rngmod.stream(15, "gradcheck/head")
        projector = headmod.Projector(8, 5, rngmod.stream(15, "gradcheck/head/init"))
        v = Tensor(rng.normal(0.0, 1.0, (3, 8)))
        t_con = Tensor(rng.normal(0.0, 1.0, (3, 8)), requires_grad=True)
        t_ctg = Tensor(rng.normal(0.0, 1.0, (3, 8)), requires_grad=True)
        labels = np.array([0, 3, 1], dtype=np.int64)
        params = {"t_con": t_con, "t_ctg": t_ctg}
        params.update(projector.params())
        reports.append(("head", gradcheck.check(
            lambda: headmod.classification_loss(
                headmod.fuse_logits(v, t_con, t_ctg, projector), labels),
            params, max_elements=40,
            sample_rng=rngmod.stream(15, "gradcheck/head/sample"))))

        rng = rngmod.stream(16, "gradcheck/full")
        from tgpt import config as configmod
        from tgpt import trainer
        cfg = configmod.Config(image_size=8, patch_size=4, d=8, encoder_depth=1,
                               heads=2, max_len=6, k_ctg=2, k_con=3, bonder_depth=1)
        backbone = trainer.build_backbone(cfg, d_v=9, seed=16)
        backbone.freeze()
        model = trainer.build_prompt_model(cfg, backbone, n_classes=4, seed=16)
        images = rng.uniform(0.0, 1.0, (2, 8, 8, 3))
        labels = np.array([0, 2], dtype=np.int64)
        ids_con = np.array([[1, 4, 2], [1, 7, 2]], dtype=np.int64)
        mask_con = np.ones((2, 3), dtype=np.float64)
        ids_ctg = np.array([[1, 2], [1, 2]], dtype=np.int64)
        mask_ctg = np.ones((2, 2), dtype=np.float64)

        def full_loss():
            from tgpt.numerics import ops
            feats = backbone.image_encoder.encode(images)
            p_con = model.bonder_con.forward(feats)
            p_ctg = model.bonder_ctg.forward(feats)
            l_con = supervision.text_supervision_loss(p_con, ids_con, mask_con,
                                                      backbone.table)
            l_ctg = supervision.text_supervision_loss(p_ctg, ids_ctg, mask_ctg,
                                                      backbone.table)
            t_con = backbone.text_encoder.encode_prompts(p_con)
            t_ctg = backbone.text_encoder.encode_prompts(p_ctg)
            logits = headmod.fuse_logits(feats.v, t_con, t_ctg, model.projector)
            l_cls = headmod.classification_loss(logits, labels)
            return ops.add(ops.add(l_cls, l_con), l_ctg)

        reports.append(("full_graph", gradcheck.check(
            full_loss, model.trainable_params(), max_elements=60,
            sample_rng=rngmod.stream(16, "gradcheck/full/sample"))))

        # same composed graph with adapters in the path; B is nudged off its
        # zero init so the A factor sees a nonzero gradient
        lora_cfg = configmod.Config(image_size=8, patch_size=4, d=8, encoder_depth=1,
                                    heads=2, max_len=6, k_ctg=2, k_con=3,
                                    bonder_depth=1, lora_policy="mlp_both", lora_r=2)
        lora_backbone = trainer.build_backbone(lora_cfg, d_v=9, seed=17)
        lora_backbone.freeze()
        lora_model = trainer.build_prompt_model(lora_cfg, lora_backbone,
                                                n_classes=4, seed=17)
        nudge = rngmod.stream(17, "gradcheck/lora/nudge")
        for adapter in lora_model.adapters.values():
            adapter.b.data = nudge.normal(0.0, 0.02, adapter.b.shape)

        def full_loss_lora():
            from tgpt.numerics import ops
            feats = lora_backbone.image_encoder.encode(images)
            p_con = lora_model.bonder_con.forward(feats)
            p_ctg = lora_model.bonder_ctg.forward(feats)
            l_con = supervision.text_supervision_loss(p_con, ids_con, mask_con,
                                                      lora_backbone.table)
            l_ctg = supervision.text_supervision_loss(p_ctg, ids_ctg, mask_ctg,
                                                      lora_backbone.table)
            t_con = lora_backbone.text_encoder.encode_prompts(p_con)
            t_ctg = lora_backbone.text_encoder.encode_prompts(p_ctg)
            logits = headmod.fuse_logits(feats.v, t_con, t_ctg, lora_model.projector)
            l_cls = headmod.classification_loss(logits, labels)
            return ops.add(ops.add(l_cls, l_con), l_ctg)

        reports.append(("full_graph_lora", gradcheck.check(
            full_loss_lora, lora_model.trainable_params(), max_elements=60,
            sample_rng=rngmod.stream(17, "gradcheck/lora/sample"))))
    return reports


def cmd_gradcheck(args) -> int:
    reports = _gradcheck_modules()
    all_ok = True
    for name, report in reports:
        worst = max((e.max_err for e in report.entries), default=0.0)
        status = "pass" if report.passed else "FAIL"
        all_ok = all_ok and report.passed
        print(f"gradcheck {name}: {status} "
              f"(cases={len(report.entries)}, max_err={worst:.3e})")
        if not report.passed:
            for entry in report.failures():
                print(f"  {entry.line()}")
    print(f"gradcheck overall: {'pass' if all_ok else 'FAIL'}")
    return 0 if all_ok else 1


def cmd_ablate(args) -> int:
    from tgpt import data as datamod
    from tgpt import trainer

    cfg = _load_config(args)
    if args.shots is not None:
        cfg.ablate_shots = (args.shots,)
        cfg.validate()
    dataset = datamod.load(_dataset_dir(args))
    encoder_ckpt = os.path.join(args.out, "checkpoints", "encoder.ckpt")
    rows = trainer.ablate(dataset, cfg, args.out, encoder_ckpt)
    print(f"ablate: wrote {len(rows)} rows to "
          f"{os.path.join(args.out, 'ablation.csv')}")
    return 0


def cmd_costmodel(args) -> int:
    from tgpt import costmodel

    cfg = _load_config(args)
    rows, flags = costmodel.scaling_table(
        list(cfg.cost_n), list(cfg.cost_bs), cfg.cost_l, cfg.cost_d,
        cfg.cost_depth, cfg.cost_heads,
    )
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "cost.csv")
    costmodel.write_csv(rows, path)
    print(f"costmodel: wrote {len(rows)} rows to {path}")
    for (paradigm, bs), trend in sorted(flags.items()):
        print(f"costmodel: {paradigm} bs={bs} activations {trend} in N")
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "costmodel": cmd_costmodel,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.verb](args)
    except Exception as exc:  # single-line diagnostics, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
