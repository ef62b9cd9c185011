"""Kernel backend selection.

The compiled extension is preferred when importable; otherwise the numpy
fallback is used.  ``TGPT_KERNELS=numpy`` or ``TGPT_KERNELS=cython`` forces
a choice (forcing cython raises if the extension is missing, rather than
silently running slow).  Both backends implement the surface documented in
`tgpt.numerics.kernels_numpy`.
"""

import os

from tgpt.numerics import kernels_numpy

kernels = kernels_numpy


def available_backends() -> list:
    names = ["numpy"]
    try:
        import tgpt._ckernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


def set_backend(name: str) -> None:
    global kernels
    if name == "numpy":
        kernels = kernels_numpy
    elif name == "cython":
        import tgpt._ckernels as ck

        kernels = ck
    else:
        raise ValueError(f"unknown kernel backend {name!r}, expected 'numpy' or 'cython'")


def current_backend() -> str:
    return kernels.NAME


def _select_initial() -> None:
    forced = os.environ.get("TGPT_KERNELS", "").strip().lower()
    if forced:
        set_backend(forced)
        return
    try:
        set_backend("cython")
    except ImportError:
        set_backend("numpy")


_select_initial()
