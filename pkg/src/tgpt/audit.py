"""File-access auditing.

Inference must never read the description or template files.  The audit
records every path passed to builtins.open while active; the dataset loader
and checkpoint reader use plain open() throughout, so all artifact access
is visible to it.
"""

import builtins
import os
from contextlib import contextmanager

TEXT_BASENAMES = ("descriptions.tsv", "templates.txt", "vocab.txt")


@contextmanager
def record_opens():
    """Yield a list collecting every file path opened inside the block."""
    opened = []
    real_open = builtins.open

    def spy(file, *args, **kwargs):
        try:
            opened.append(os.fspath(file))
        except TypeError:
            opened.append(repr(file))  # file descriptors etc.
        return real_open(file, *args, **kwargs)

    builtins.open = spy
    try:
        yield opened
    finally:
        builtins.open = real_open


def text_file_reads(opened) -> list:
    """The subset of recorded opens that touch supervision text files."""
    return [p for p in opened if os.path.basename(str(p)) in TEXT_BASENAMES]
