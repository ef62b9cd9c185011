"""Text supervision for the generated prompts.

The content branch is supervised by a per-sample sentence describing what
is in the image; the category branch by a per-class template sentence.
Both are tokenized to exactly the branch's query count K, and the loss
projects prompts into vocabulary space through the frozen transposed
embedding: logits = P @ W_E^T, cross-entropy at each unmasked position,
averaged.  Two alternative supervision spaces (embedding MSE and latent
cosine) exist only for the ablation harness.

This module also owns the description grammar that stands in for an
offline captioner: sentences are deterministic functions of a sample's
attribute record.
"""

import numpy as np

from tgpt.numerics import ops
from tgpt.numerics.tensor import Tensor

SUPERVISION_SPACES = ("vocabulary", "embedding", "latent")

_COUNT_WORDS = {1: "one", 2: "two", 3: "three", 4: "four"}

DEFAULT_TEMPLATES = ("a photo of a {class}, a type of glyph.",)


def pluralize(noun: str) -> str:
    return noun + ("es" if noun.endswith("s") else "s")


def content_description(attrs) -> str:
    """Deterministic one-sentence description of a sample.

    e.g. "a red triangle near the top left with two blue squares";
    zero distractors yield "... with nothing else".  The class words
    (color and shape) always appear.
    """
    base = f"a {attrs.color} {attrs.shape} near the {attrs.position}"
    if attrs.dist_count == 0:
        return f"{base} with nothing else"
    count = _COUNT_WORDS[attrs.dist_count]
    noun = attrs.dist_shape if attrs.dist_count == 1 else pluralize(attrs.dist_shape)
    return f"{base} with {count} {attrs.dist_color} {noun}"


class TemplateRegistry:
    """Per-class category-sentence templates with a {class} slot."""

    def __init__(self, class_names, templates=DEFAULT_TEMPLATES):
        templates = list(templates)
        if not templates:
            raise ValueError("template registry needs at least one template")
        for t in templates:
            if "{class}" not in t:
                raise ValueError(f"template {t!r} lacks a {{class}} slot")
        self.class_names = list(class_names)
        self._templates = {i: templates for i in range(len(self.class_names))}

    def set_templates(self, class_id: int, templates) -> None:
        self._templates[class_id] = list(templates)

    def templates_for(self, class_id: int) -> list:
        if class_id not in self._templates:
            raise KeyError(f"unknown class id {class_id}")
        return self._templates[class_id]

    def category_description(self, class_id: int, rng) -> str:
        """Fill a uniformly sampled template for the class."""
        templates = self.templates_for(class_id)
        choice = templates[int(rng.integers(0, len(templates)))]
        return choice.replace("{class}", self.class_names[class_id])

    def all_sentences(self) -> list:
        """Every template filled for every class (vocabulary corpus)."""
        out = []
        for class_id, name in enumerate(self.class_names):
            for t in self.templates_for(class_id):
                out.append(t.replace("{class}", name))
        return out


def text_supervision_loss(prompts: Tensor, target_ids, target_mask, table) -> Tensor:
    """Masked positional cross-entropy in vocabulary space.

    prompts (B, K, d); target ids/mask (B, K).  Position i of the prompt
    sequence is supervised by target token i; PAD positions are masked out
    of the average, and an all-PAD target gives loss 0 with zero gradient.
    Gradients reach the prompts, never the frozen embedding.
    """
    target_ids = np.asarray(target_ids)
    target_mask = np.asarray(target_mask)
    if prompts.ndim == 2:
        prompts = ops.reshape(prompts, (1,) + tuple(prompts.shape))
        target_ids = target_ids.reshape(1, -1)
        target_mask = target_mask.reshape(1, -1)
    if target_ids.shape != prompts.shape[:2]:
        raise ops.ShapeError(
            f"targets {target_ids.shape} do not match prompts {prompts.shape[:2]}"
        )
    logits = ops.matmul(prompts, ops.transpose_last2(table.w))
    return ops.cross_entropy_logits(logits, target_ids, mask=target_mask)


def embedding_supervision_loss(prompts: Tensor, target_ids, target_mask, table) -> Tensor:
    """Masked mean squared error between prompts and the embedded target."""
    target_ids = np.asarray(target_ids)
    target_mask = np.asarray(target_mask)
    target = table.lookup(target_ids).detach()
    diff = ops.sub(prompts, target)
    weights = target_mask.astype(prompts.dtype)[..., None]
    denom = float(target_mask.sum()) * prompts.shape[-1]
    if denom == 0:
        return Tensor(np.zeros((), dtype=prompts.dtype))
    masked = ops.mul(ops.mul(diff, diff), Tensor(weights))
    return ops.scale(ops.tsum(masked), 1.0 / denom)


def latent_supervision_loss(prompts: Tensor, target_ids, target_mask, table,
                            text_encoder) -> Tensor:
    """1 - cosine between the encoded prompts and the encoded target text.

    The target feature is a constant (no gradient); the prompt feature
    keeps its graph so the loss trains the prompt generator.
    """
    from tgpt.numerics.tensor import no_grad

    with no_grad():
        target_feat = text_encoder.encode_ids(table, target_ids, target_mask)
    prompt_feat = text_encoder.encode_prompts(prompts)
    cosine = ops.tsum(ops.mul(prompt_feat, target_feat.detach()), axis=1)
    return ops.sub(Tensor(np.ones((), dtype=prompts.dtype)), ops.tmean(cosine))


def supervision_space_loss(space: str, prompts, target_ids, target_mask, table,
                           text_encoder=None) -> Tensor:
    if space == "vocabulary":
        return text_supervision_loss(prompts, target_ids, target_mask, table)
    if space == "embedding":
        return embedding_supervision_loss(prompts, target_ids, target_mask, table)
    if space == "latent":
        if text_encoder is None:
            raise ValueError("latent-space supervision needs the text encoder")
        return latent_supervision_loss(prompts, target_ids, target_mask, table,
                                       text_encoder)
    raise ValueError(f"unknown supervision space {space!r}")
