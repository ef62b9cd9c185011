"""Checkpoint serialization.

Little-endian binary layout:

    magic    8 bytes  b"TGPTCKPT"
    version  u32      currently 1
    config   u32 byte length, then UTF-8 "key=value" lines (sorted keys)
    count    u32      number of parameter records
    record   u16 name length, name bytes (UTF-8),
             u8 rank, rank * u32 dims,
             raw float32 values in C order

Records are written in sorted-name order and files are written to a
temporary path then renamed, so a crash never leaves a partial checkpoint
and identical parameter sets serialize byte-identically.
"""

import os
import struct

import numpy as np

from tgpt.numerics.tensor import Tensor

MAGIC = b"TGPTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_bytes(config: dict) -> bytes:
    lines = []
    for key in sorted(config):
        value = config[key]
        text = f"{key}={value}"
        if "\n" in text:
            raise CheckpointError(f"config value for {key!r} contains a newline")
        lines.append(text)
    return ("\n".join(lines) + "\n" if lines else "").encode("utf-8")


def save_checkpoint(path, params: dict, config: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = _config_bytes(config)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            value = params[name]
            arr = value.data if isinstance(value, Tensor) else value
            # asarray keeps rank-0 inputs rank-0 (ascontiguousarray would not)
            arr = np.asarray(arr, dtype="<f4", order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return (params: name -> float32 ndarray, config: dict of strings)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    off = 8
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = {}
    for line in blob[off : off + cfg_len].decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            config[key] = value
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        params[name] = arr.copy()
    if off != len(blob):
        raise CheckpointError(f"{path} has {len(blob) - off} trailing bytes")
    return params, config
