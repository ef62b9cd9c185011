"""Autodiff engine, kernels, optimizer and gradient checking."""

from tgpt.numerics.tensor import Tensor, no_grad, use_dtype, default_dtype
from tgpt.numerics import ops  # noqa: F401  (attaches Tensor operators)
from tgpt.numerics.adamw import AdamW, AdamWState

__all__ = ["Tensor", "no_grad", "use_dtype", "default_dtype", "AdamW", "AdamWState", "ops"]
