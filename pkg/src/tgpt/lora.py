"""Low-rank adapters for the frozen encoders.

An adapter adds scale * B @ A to a frozen weight: B (d_out x r) starts at
zero so the adapted model is bitwise identical to the base until the first
optimizer step; A (r x d_in) is Gaussian.  Placement policies attach
adapters to the encoders' FFN maps (optionally also attention maps); the
default mirrors the finding that adapting MLPs alone works best.
"""

from dataclasses import dataclass

import numpy as np

from tgpt.layers import Linear
from tgpt.numerics.tensor import Tensor

POLICIES = ("none", "mlp_both", "mlp_visual", "mlp_text", "mlp_and_attention_both")
RANKS = (1, 2, 4, 8, 16, 32)


class LoraAdapter:
    def __init__(self, d_in: int, d_out: int, r: int, init_rng, scale: float = 1.0,
                 target: str = ""):
        if r < 1:
            raise ValueError(f"rank must be >= 1, got {r}")
        if r >= min(d_in, d_out):
            raise ValueError(f"rank {r} not small relative to ({d_out}, {d_in})")
        self.r = r
        self.scale = scale
        self.target = target
        self.b = Tensor(np.zeros((d_out, r)), requires_grad=True)
        self.a = Tensor(init_rng.normal(0.0, 0.02, (r, d_in)), requires_grad=True)
        self.merged = False

    def delta(self) -> np.ndarray:
        return self.scale * (self.b.data @ self.a.data)

    def params(self) -> dict:
        return {f"lora.{self.target}.a": self.a, f"lora.{self.target}.b": self.b}


def attach(linear: Linear, r: int, init_rng, scale: float = 1.0,
           target: str = "") -> LoraAdapter:
    if linear.adapter is not None:
        raise ValueError(f"linear map {target or '?'} already has an adapter")
    adapter = LoraAdapter(linear.d_in, linear.d_out, r, init_rng, scale, target)
    linear.adapter = adapter
    return adapter


def merge(linear: Linear) -> np.ndarray:
    """Fold the adapter into the base weight: W <- W + scale * B @ A.

    Rejected on a second call (the delta would be applied twice).  Returns
    the merged weight; the linear then behaves identically without the
    adapter branch.
    """
    adapter = linear.adapter
    if adapter is None:
        raise ValueError("no adapter attached")
    if adapter.merged:
        raise ValueError(f"adapter {adapter.target or '?'} already merged")
    linear.w.data += adapter.delta().astype(linear.w.data.dtype)
    adapter.merged = True
    linear.adapter = None
    return linear.w.data


@dataclass
class PlacementReport:
    adapter_count: int
    trainable: int
    total: int

    @property
    def ratio(self) -> float:
        return self.trainable / self.total


def apply_placement(image_encoder, text_encoder, policy: str, r: int,
                    init_rng) -> tuple:
    """Attach adapters per policy; returns ({name: adapter}, report)."""
    if policy not in POLICIES or policy == "none":
        raise ValueError(f"unknown placement policy {policy!r}")
    targets = {}
    want_attention = policy == "mlp_and_attention_both"

    def collect(prefix, encoder):
        for name, linear in encoder.linears().items():
            is_ffn = ".ffn." in name
            if is_ffn or want_attention:
                targets[f"{prefix}.{name}"] = linear

    if policy in ("mlp_both", "mlp_visual", "mlp_and_attention_both"):
        collect("image", image_encoder)
    if policy in ("mlp_both", "mlp_text", "mlp_and_attention_both"):
        collect("text", text_encoder)

    adapters = {}
    for name in sorted(targets):
        adapters[name] = attach(targets[name], r, init_rng, target=name)

    trainable = sum(a.a.size + a.b.size for a in adapters.values())
    total = sum(p.size for p in image_encoder.params().values())
    total += sum(p.size for p in text_encoder.params().values())
    return adapters, PlacementReport(len(adapters), trainable, total)
