"""Text-guided prompt tuning on a miniature frozen dual encoder.

The package is organised around a small reverse-mode autodiff engine
(`tgpt.numerics`) on top of which the dual encoder, the prompt generator,
the supervision losses and the training loops are built.  Heavy per-element
kernels run through a compiled extension when it is available and fall back
to pure numpy otherwise (see `tgpt.numerics.backend`).
"""

__version__ = "0.1.0"
