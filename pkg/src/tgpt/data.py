"""Synthetic glyph image-text dataset and the few-shot split protocol.

Classes are the product of 4 colors and 4 shapes.  Each 32x32 RGB sample
is rendered at 4x resolution and box-downsampled (anti-aliasing), with a
jittered position, zero to a few smaller distractor glyphs, and Gaussian
pixel noise.  Every sample carries a deterministic content sentence built
from its attribute record.  The few-shot protocol reserves a fixed
per-class pool for train/val shots so the held-out test set is identical
across shot counts.
"""

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from tgpt import rng as rngmod
from tgpt import supervision
from tgpt.tokenizer import Vocabulary

COLORS = (
    ("red", (0.85, 0.10, 0.10)),
    ("green", (0.10, 0.75, 0.20)),
    ("blue", (0.15, 0.30, 0.85)),
    ("yellow", (0.90, 0.85, 0.10)),
)
SHAPES = ("circle", "square", "triangle", "cross")
POSITIONS = (
    ("top left", 10.0, 10.0),
    ("top right", 22.0, 10.0),
    ("bottom left", 10.0, 22.0),
    ("bottom right", 22.0, 22.0),
    ("center", 16.0, 16.0),
)
BACKGROUND = 0.15
SUPERSAMPLE = 4

# Train/val shots for any n in {1,2,4,8,16} come from this many reserved
# ids per class, so the test remainder never depends on the shot count.
FEW_SHOT_POOL = 20

# The sentence grammar spells distractor counts as words; 4 is the largest
# count it knows, which caps distractor_max.
DISTRACTOR_LIMIT = 4

VARIANTS = ("plain", "opaque")


@dataclass
class GlyphAttributes:
    shape: str
    color: str
    position: str
    cx: float
    cy: float
    radius: float
    dist_count: int
    dist_shape: str
    dist_color: str
    dist_radius: float
    dist_centers: tuple

    def record(self) -> str:
        parts = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "dist_centers":
                value = "|".join(f"{x:.4f},{y:.4f}" for x, y in value)
            elif isinstance(value, float):
                value = f"{value:.4f}"
            parts.append(f"{f.name}={value}")
        return ";".join(parts)

    @classmethod
    def parse(cls, record: str) -> "GlyphAttributes":
        kv = dict(part.split("=", 1) for part in record.split(";"))
        centers = tuple(
            tuple(float(c) for c in pair.split(","))
            for pair in kv["dist_centers"].split("|")
            if pair
        )
        return cls(
            shape=kv["shape"], color=kv["color"], position=kv["position"],
            cx=float(kv["cx"]), cy=float(kv["cy"]), radius=float(kv["radius"]),
            dist_count=int(kv["dist_count"]), dist_shape=kv["dist_shape"],
            dist_color=kv["dist_color"], dist_radius=float(kv["dist_radius"]),
            dist_centers=centers,
        )


def _shape_mask(shape: str, cx: float, cy: float, r: float, xs, ys):
    dx = xs - cx
    dy = ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        half = r * 0.82
        return np.maximum(np.abs(dx), np.abs(dy)) <= half
    if shape == "triangle":
        ax, ay = cx, cy - r
        bx, by = cx - 0.95 * r, cy + 0.75 * r
        fx, fy = cx + 0.95 * r, cy + 0.75 * r

        def side(x1, y1, x2, y2):
            return (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)

        s1 = side(ax, ay, bx, by)
        s2 = side(bx, by, fx, fy)
        s3 = side(fx, fy, ax, ay)
        # interior = all edge tests share a sign, whatever the winding
        return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | (
            (s1 <= 0) & (s2 <= 0) & (s3 <= 0)
        )
    if shape == "cross":
        arm = 0.33 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    raise ValueError(f"unknown shape {shape!r}")


_COLOR_RGB = dict(COLORS)


def render(attrs: GlyphAttributes, noise_rng, image_size: int = 32,
           noise_std: float = 0.02) -> np.ndarray:
    """Render one sample: supersample, paint distractors then the main
    glyph, box-downsample, add clipped Gaussian noise."""
    side = image_size * SUPERSAMPLE
    coords = (np.arange(side, dtype=np.float64) + 0.5) / SUPERSAMPLE
    xs, ys = np.meshgrid(coords, coords)
    canvas = np.full((side, side, 3), BACKGROUND, dtype=np.float64)
    for dx, dy in attrs.dist_centers:
        mask = _shape_mask(attrs.dist_shape, dx, dy, attrs.dist_radius, xs, ys)
        canvas[mask] = _COLOR_RGB[attrs.dist_color]
    mask = _shape_mask(attrs.shape, attrs.cx, attrs.cy, attrs.radius, xs, ys)
    canvas[mask] = _COLOR_RGB[attrs.color]
    down = canvas.reshape(image_size, SUPERSAMPLE, image_size, SUPERSAMPLE, 3)
    image = down.mean(axis=(1, 3))
    image = image + noise_rng.normal(0.0, noise_std, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def sample_attributes(class_id: int, attr_rng, image_size: int = 32,
                      jitter: float = 2.0, distractor_max: int = 2) -> GlyphAttributes:
    color = COLORS[class_id // len(SHAPES)][0]
    shape = SHAPES[class_id % len(SHAPES)]
    pos_name, px, py = POSITIONS[int(attr_rng.integers(0, len(POSITIONS)))]
    scale = image_size / 32.0
    cx = px * scale + attr_rng.uniform(-jitter, jitter)
    cy = py * scale + attr_rng.uniform(-jitter, jitter)
    radius = attr_rng.uniform(4.5, 6.5) * scale
    dist_count = int(attr_rng.integers(0, distractor_max + 1))
    dist_shape = SHAPES[int(attr_rng.integers(0, len(SHAPES)))]
    dist_color = COLORS[int(attr_rng.integers(0, len(COLORS)))][0]
    dist_radius = attr_rng.uniform(2.0, 3.0) * scale
    centers = []
    margin = dist_radius + 1.0
    for _ in range(dist_count):
        for _attempt in range(64):
            dx = attr_rng.uniform(margin, image_size - margin)
            dy = attr_rng.uniform(margin, image_size - margin)
            if math.hypot(dx - cx, dy - cy) < radius + dist_radius + 1.0:
                continue
            if any(math.hypot(dx - ox, dy - oy) < 2 * dist_radius + 1.0
                   for ox, oy in centers):
                continue
            centers.append((dx, dy))
            break
    # Placement can fail in a crowded frame; the sentence reflects what
    # was actually drawn.
    dist_count = len(centers)
    return GlyphAttributes(
        shape=shape, color=color, position=pos_name, cx=cx, cy=cy, radius=radius,
        dist_count=dist_count, dist_shape=dist_shape, dist_color=dist_color,
        dist_radius=dist_radius, dist_centers=tuple(centers),
    )


def _lexicon_sentences() -> list:
    """Every sentence the attribute grammar can produce, over a fixed grid.

    Prepended to the vocabulary corpus so that datasets of the same variant
    tokenize identically regardless of seed: an encoder pretrained on one
    seed then drives training on another without any id remapping.
    """
    dummy = dict(cx=0.0, cy=0.0, radius=1.0, dist_radius=1.0, dist_centers=())
    out = []
    for color, _ in COLORS:
        for shape in SHAPES:
            for pos_name, _, _ in POSITIONS:
                out.append(supervision.content_description(GlyphAttributes(
                    shape=shape, color=color, position=pos_name, dist_count=0,
                    dist_shape=SHAPES[0], dist_color=COLORS[0][0], **dummy)))
    pos0 = POSITIONS[0][0]
    for count in range(1, DISTRACTOR_LIMIT + 1):
        for dist_color, _ in COLORS:
            for dist_shape in SHAPES:
                out.append(supervision.content_description(GlyphAttributes(
                    shape=SHAPES[0], color=COLORS[0][0], position=pos0,
                    dist_count=count, dist_shape=dist_shape,
                    dist_color=dist_color, **dummy)))
    return out


def class_names(variant: str = "plain") -> list:
    if variant == "plain":
        return [f"{color} {shape}" for color, _ in COLORS for shape in SHAPES]
    if variant == "opaque":
        return [f"G-{i:02d}" for i in range(len(COLORS) * len(SHAPES))]
    raise ValueError(f"unknown dataset variant {variant!r}")


class GlyphDataset:
    def __init__(self, images, labels, names, attributes=None, descriptions=None,
                 templates=None, vocab=None, meta=None):
        self.images = images
        self.labels = labels
        self.class_names = names
        self.attributes = attributes
        self.descriptions = descriptions
        self.templates = templates
        self.vocab = vocab
        self.meta = meta or {}

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def registry(self) -> supervision.TemplateRegistry:
        if self.templates is None:
            raise ValueError("dataset loaded without text files")
        return supervision.TemplateRegistry(self.class_names, self.templates)


def generate(out_dir: str, seed: int, per_class: int = 80, image_size: int = 32,
             variant: str = "plain", noise_std: float = 0.02,
             jitter: float = 2.0, distractor_max: int = 2,
             templates=supervision.DEFAULT_TEMPLATES, workers: int = 1) -> GlyphDataset:
    """Render the dataset and write the directory format:

    images.bin (raw float32), index.tsv (id, class, attribute record, byte
    offset), classes.txt, descriptions.tsv (id, class, sentence),
    templates.txt, vocab.txt, meta.txt.  Bitwise deterministic per seed:
    every sample draws from its own named stream, so the worker count
    changes wall time only, never the bytes.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown dataset variant {variant!r}")
    if per_class < FEW_SHOT_POOL + 50:
        raise ValueError(
            f"per_class must be >= {FEW_SHOT_POOL + 50} so a held-out test "
            f"set of at least 50 per class remains, got {per_class}"
        )
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if not 0 <= distractor_max <= DISTRACTOR_LIMIT:
        raise ValueError(
            f"distractor_max must be in 0..{DISTRACTOR_LIMIT}, got {distractor_max}"
        )
    names = class_names(variant)
    n_classes = len(names)
    os.makedirs(out_dir, exist_ok=True)

    total = n_classes * per_class
    images = np.empty((total, image_size, image_size, 3), dtype=np.float32)
    labels = np.empty(total, dtype=np.int64)
    attributes = [None] * total
    descriptions = [None] * total

    def build_one(idx: int) -> None:
        class_id, j = divmod(idx, per_class)
        attr_rng = rngmod.stream(seed, f"data/attrs/{class_id}/{j}")
        noise_rng = rngmod.stream(seed, f"data/noise/{class_id}/{j}")
        attrs = sample_attributes(class_id, attr_rng, image_size, jitter,
                                  distractor_max)
        images[idx] = render(attrs, noise_rng, image_size, noise_std)
        labels[idx] = class_id
        attributes[idx] = attrs
        descriptions[idx] = supervision.content_description(attrs)

    if workers == 1:
        for idx in range(total):
            build_one(idx)
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(build_one, range(total)))

    registry = supervision.TemplateRegistry(names, templates)
    # Seed-independent corpus head: token ids depend only on variant and
    # templates, so any two same-variant datasets share a vocabulary.
    corpus = _lexicon_sentences()
    corpus.extend(registry.all_sentences())
    corpus.extend(descriptions)
    vocab = Vocabulary.build(corpus)

    item_bytes = image_size * image_size * 3 * 4
    with open(os.path.join(out_dir, "images.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(images, dtype="<f4").tobytes())
    with open(os.path.join(out_dir, "index.tsv"), "w", encoding="utf-8") as fh:
        for i, attrs in enumerate(attributes):
            fh.write(f"{i}\t{labels[i]}\t{attrs.record()}\t{i * item_bytes}\n")
    with open(os.path.join(out_dir, "classes.txt"), "w", encoding="utf-8") as fh:
        fh.write("".join(name + "\n" for name in names))
    with open(os.path.join(out_dir, "descriptions.tsv"), "w", encoding="utf-8") as fh:
        for i, sentence in enumerate(descriptions):
            fh.write(f"{i}\t{labels[i]}\t{sentence}\n")
    with open(os.path.join(out_dir, "templates.txt"), "w", encoding="utf-8") as fh:
        fh.write("".join(t + "\n" for t in templates))
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    meta = {
        "n_images": len(labels), "n_classes": n_classes, "per_class": per_class,
        "image_size": image_size, "seed": seed, "variant": variant,
        "noise_std": noise_std, "jitter": jitter, "distractor_max": distractor_max,
    }
    with open(os.path.join(out_dir, "meta.txt"), "w", encoding="utf-8") as fh:
        for key in sorted(meta):
            fh.write(f"{key}={meta[key]}\n")
    return GlyphDataset(images, labels, names, attributes, descriptions,
                        list(templates), vocab, {k: str(v) for k, v in meta.items()})


def load(dataset_dir: str, with_text: bool = True) -> GlyphDataset:
    """Load a generated dataset.  with_text=False skips the description,
    template, and vocabulary files entirely (the inference path must never
    open them)."""
    meta = {}
    with open(os.path.join(dataset_dir, "meta.txt"), encoding="utf-8") as fh:
        for line in fh:
            key, _, value = line.strip().partition("=")
            meta[key] = value
    image_size = int(meta["image_size"])
    n = int(meta["n_images"])
    with open(os.path.join(dataset_dir, "images.bin"), "rb") as fh:
        raw = fh.read()
    images = np.frombuffer(raw, dtype="<f4").reshape(n, image_size, image_size, 3)
    labels = np.empty(n, dtype=np.int64)
    attributes = [None] * n
    with open(os.path.join(dataset_dir, "index.tsv"), encoding="utf-8") as fh:
        for line in fh:
            sid, class_id, record, _offset = line.rstrip("\n").split("\t")
            labels[int(sid)] = int(class_id)
            attributes[int(sid)] = GlyphAttributes.parse(record)
    with open(os.path.join(dataset_dir, "classes.txt"), encoding="utf-8") as fh:
        names = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    descriptions = templates = vocab = None
    if with_text:
        descriptions = [None] * n
        with open(os.path.join(dataset_dir, "descriptions.tsv"), encoding="utf-8") as fh:
            for line in fh:
                sid, _class_id, sentence = line.rstrip("\n").split("\t")
                descriptions[int(sid)] = sentence
        with open(os.path.join(dataset_dir, "templates.txt"), encoding="utf-8") as fh:
            templates = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        vocab = Vocabulary.load(os.path.join(dataset_dir, "vocab.txt"))
    return GlyphDataset(images, labels, names, attributes, descriptions,
                        templates, vocab, meta)


@dataclass
class FewShotSplit:
    n_shots: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def sample_few_shot(labels: np.ndarray, n_shots: int, seed: int) -> FewShotSplit:
    """Per-class split: the first FEW_SHOT_POOL ids of each class form a
    reserved pool; n train + min(n, 4) val ids are drawn from the pool by a
    seeded shuffle.  Test = everything outside the pool, so the test set is
    identical across shot counts AND seeds; the seed only moves the shots.
    """
    if n_shots not in (1, 2, 4, 8, 16):
        raise ValueError(f"n_shots must be one of 1,2,4,8,16, got {n_shots}")
    labels = np.asarray(labels)
    n_val = min(n_shots, 4)
    if n_shots + n_val > FEW_SHOT_POOL:
        raise ValueError(
            f"n_shots {n_shots} + {n_val} val exceeds the reserved pool "
            f"of {FEW_SHOT_POOL}"
        )
    train, val, test = [], [], []
    for class_id in np.unique(labels):
        ids = np.flatnonzero(labels == class_id)
        need = FEW_SHOT_POOL + 50
        if len(ids) < need:
            raise ValueError(
                f"class {class_id} has {len(ids)} samples, "
                f"fewer than the required {need}"
            )
        pool = ids[:FEW_SHOT_POOL]
        order = rngmod.stream(seed, f"split/{class_id}").permutation(FEW_SHOT_POOL)
        pool = pool[order]
        train.append(pool[:n_shots])
        val.append(pool[n_shots : n_shots + n_val])
        test.append(ids[FEW_SHOT_POOL:])
    return FewShotSplit(
        n_shots=n_shots,
        train=np.concatenate(train),
        val=np.concatenate(val),
        test=np.concatenate(test),
    )
