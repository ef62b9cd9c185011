"""AdamW with decoupled weight decay.

The decay multiplies the parameter by (1 - lr * weight_decay) before the
moment update, so a zero gradient still shrinks the parameter.  Moments are
bias-corrected.  The per-parameter update runs through the kernel backend
and mutates data and moments in place.
"""

from dataclasses import dataclass, field

import numpy as np

from tgpt.numerics import backend
from tgpt.numerics.tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v2: dict = field(default_factory=dict)


def adamw_step(params: dict, state: AdamWState) -> None:
    """Apply one update to every parameter that received a gradient."""
    state.step += 1
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {p.grad.shape} does not match parameter "
                f"{name} with shape {p.data.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v2[name] = np.zeros_like(p.data)
        backend.kernels.adamw_update(
            p.data,
            p.grad,
            state.m[name],
            state.v2[name],
            state.step,
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
            state.weight_decay,
        )


class AdamW:
    def __init__(
        self,
        params: dict,
        lr: float = 5e-5,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        for name, p in params.items():
            if not isinstance(p, Tensor):
                raise TypeError(f"parameter {name} is not a Tensor")
        self.params = dict(params)
        self.state = AdamWState(
            lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay
        )

    def step(self) -> None:
        adamw_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
