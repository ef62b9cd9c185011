"""Finite-difference gradient checking.

Checks run in float64 with central differences.  The error measure per
element is |analytic - numeric| / max(1, |analytic|, |numeric|), which
behaves like a relative error for large gradients and an absolute one near
zero, so near-zero true gradients do not produce spurious blowups.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from tgpt import rng as rngmod
from tgpt.numerics import ops
from tgpt.numerics.tensor import Tensor, use_dtype


@dataclass
class CheckEntry:
    name: str
    max_err: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tolerance

    def line(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return (
            f"{self.name}: max_err={self.max_err:.3e} "
            f"({self.checked} elements, tol={self.tolerance:.0e}) {verdict}"
        )


@dataclass
class CheckReport:
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failures(self) -> list:
        return [e for e in self.entries if not e.passed]

    def lines(self) -> list:
        return [e.line() for e in self.entries]


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def check(fn, params: dict, eps: float = 1e-5, tolerance: float = 1e-4,
          max_elements=None, sample_rng=None, name_prefix: str = "") -> CheckReport:
    """Compare fn()'s backward gradients against central differences.

    fn rebuilds the scalar loss from the live `params` tensors on every
    call; parameters are perturbed in place and restored.  With
    `max_elements` set, at most that many elements per parameter are
    checked (sampled without replacement).
    """
    for pname, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"gradient checking requires float64, {pname} is {p.data.dtype}")
        if not p.requires_grad:
            raise ValueError(f"parameter {pname} does not require grad")

    for p in params.values():
        p.zero_grad()
    loss = fn()
    loss.backward()
    analytic = {}
    for pname, p in params.items():
        if p.grad is None:
            raise AssertionError(f"no gradient reached parameter {pname}")
        analytic[pname] = p.grad.copy()
        p.zero_grad()

    report = CheckReport()
    for pname, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.shape[0]
        if max_elements is None or size <= max_elements:
            indices = np.arange(size)
        else:
            indices = sample_rng.choice(size, size=max_elements, replace=False)
        worst = 0.0
        ga = analytic[pname].reshape(-1)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, _rel_err(float(ga[i]), numeric))
        report.entries.append(
            CheckEntry(name_prefix + pname, worst, len(indices), tolerance)
        )
    return report


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.tsum(ops.mul(out, Tensor(weights)))


def _kernel_cases():
    """Small graphs exercising each differentiable kernel in isolation."""

    def tensors(tag, *shapes):
        gen = rngmod.stream(7, "gradcheck/" + tag)
        return [Tensor(gen.normal(0.0, 1.0, s), requires_grad=True) for s in shapes], gen

    cases = {}

    def case(name):
        def deco(builder):
            cases[name] = builder
            return builder

        return deco

    @case("add")
    def _add():
        (a, b), gen = tensors("add", (3, 4), (1, 4))
        w = gen.normal(size=(3, 4))
        return lambda: _weighted_sum(ops.add(a, b), w), {"a": a, "b": b}

    @case("mul")
    def _mul():
        (a, b), gen = tensors("mul", (3, 4), (3, 4))
        w = gen.normal(size=(3, 4))
        return lambda: _weighted_sum(ops.mul(a, b), w), {"a": a, "b": b}

    @case("scale")
    def _scale():
        (a,), gen = tensors("scale", (3, 4))
        w = gen.normal(size=(3, 4))
        return lambda: _weighted_sum(ops.scale(a, 1.7), w), {"a": a}

    @case("matmul")
    def _matmul():
        (a, b), gen = tensors("matmul", (2, 3, 4), (4, 5))
        w = gen.normal(size=(2, 3, 5))
        return lambda: _weighted_sum(ops.matmul(a, b), w), {"a": a, "b": b}

    @case("concat")
    def _concat():
        (a, b), gen = tensors("concat", (2, 3), (2, 5))
        w = gen.normal(size=(2, 8))
        return lambda: _weighted_sum(ops.concat([a, b], axis=1), w), {"a": a, "b": b}

    @case("sum")
    def _sum():
        (a,), gen = tensors("sum", (3, 4, 2))
        w = gen.normal(size=(3, 2))
        return lambda: _weighted_sum(ops.tsum(a, axis=1), w), {"a": a}

    @case("mean")
    def _mean():
        (a,), gen = tensors("mean", (3, 4, 2))
        w = gen.normal(size=(3, 4))
        return lambda: _weighted_sum(ops.tmean(a, axis=2), w), {"a": a}

    @case("softmax")
    def _softmax():
        (a,), gen = tensors("softmax", (4, 6))
        w = gen.normal(size=(4, 6))
        return lambda: _weighted_sum(ops.softmax(a), w), {"a": a}

    @case("layer_norm")
    def _layer_norm():
        (x, g, b), gen = tensors("layer_norm", (4, 6), (6,), (6,))
        w = gen.normal(size=(4, 6))
        return (
            lambda: _weighted_sum(ops.layer_norm(x, g, b), w),
            {"x": x, "gamma": g, "beta": b},
        )

    @case("gelu")
    def _gelu():
        (a,), gen = tensors("gelu", (3, 5))
        w = gen.normal(size=(3, 5))
        return lambda: _weighted_sum(ops.gelu(a), w), {"a": a}

    @case("relu")
    def _relu():
        (a,), gen = tensors("relu", (3, 5))
        # Keep inputs away from the kink, where the true derivative jumps.
        a.data += np.sign(a.data) * 0.05
        w = gen.normal(size=(3, 5))
        return lambda: _weighted_sum(ops.relu(a), w), {"a": a}

    @case("embedding")
    def _embedding():
        (table,), gen = tensors("embedding", (7, 5))
        ids = gen.integers(0, 7, size=(2, 3))
        w = gen.normal(size=(2, 3, 5))
        return lambda: _weighted_sum(ops.embedding(table, ids), w), {"table": table}

    @case("select_positions")
    def _select_positions():
        (x,), gen = tensors("select_positions", (3, 5, 4))
        idx = gen.integers(0, 5, size=3)
        w = gen.normal(size=(3, 4))
        return lambda: _weighted_sum(ops.select_positions(x, idx), w), {"x": x}

    @case("l2_normalize")
    def _l2_normalize():
        (x,), gen = tensors("l2_normalize", (4, 6))
        w = gen.normal(size=(4, 6))
        return lambda: _weighted_sum(ops.l2_normalize(x), w), {"x": x}

    @case("cross_entropy")
    def _cross_entropy():
        (logits,), gen = tensors("cross_entropy", (6, 5))
        targets = gen.integers(0, 5, size=6)
        return lambda: ops.cross_entropy_logits(logits, targets), {"logits": logits}

    @case("cross_entropy_masked")
    def _cross_entropy_masked():
        (logits,), gen = tensors("cross_entropy_masked", (6, 5))
        targets = gen.integers(0, 5, size=6)
        mask = np.array([1, 0, 1, 1, 0, 1])
        return (
            lambda: ops.cross_entropy_logits(logits, targets, mask=mask),
            {"logits": logits},
        )

    @case("attention")
    def _attention():
        (q, k, v), gen = tensors("attention", (2, 3, 8), (2, 4, 8), (2, 4, 8))
        w = gen.normal(size=(2, 3, 8))
        return (
            lambda: _weighted_sum(ops.attention(q, k, v, n_heads=2), w),
            {"q": q, "k": k, "v": v},
        )

    @case("attention_masked")
    def _attention_masked():
        (q, k, v), gen = tensors("attention_masked", (2, 3, 8), (2, 4, 8), (2, 4, 8))
        mask = np.array([[1, 1, 0, 0], [1, 1, 1, 0]])
        w = gen.normal(size=(2, 3, 8))
        return (
            lambda: _weighted_sum(ops.attention(q, k, v, n_heads=2, key_mask=mask), w),
            {"q": q, "k": k, "v": v},
        )

    return cases


def kernel_names() -> list:
    return sorted(_kernel_cases())


def check_kernels(eps: float = 1e-5, tolerance: float = 1e-4, only=None) -> CheckReport:
    """Check every kernel's backward pass on a small fixed problem.

    Entries are named after the kernel, so a corrupted backward closure is
    reported by name.
    """
    report = CheckReport()
    with use_dtype(np.float64):
        for name, builder in sorted(_kernel_cases().items()):
            if only is not None and name not in only:
                continue
            fn, params = builder()
            sub = check(fn, params, eps=eps, tolerance=tolerance,
                        name_prefix=name + ".")
            worst = max(e.max_err for e in sub.entries)
            checked = sum(e.checked for e in sub.entries)
            report.entries.append(CheckEntry(name, worst, checked, tolerance))
    return report
