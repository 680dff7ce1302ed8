"""Named-tensor checkpoint files.

Byte layout::

    MITI1 <count>\\n
    then <count> records, each:
        <name> <ndim> <dim_1> ... <dim_ndim>\\n     (ASCII, single spaces)
        prod(dims) float64 values, little-endian, row-major

Names are non-empty and contain no whitespace. Records are written in the
order given (``save_tensors`` sorts by name so files are byte-stable).
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"MITI1"


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    chunks = [MAGIC + b" %d\n" % len(tensors)]
    for name in sorted(tensors):
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"invalid tensor name {name!r}")
        t = tensors[name]
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
        dims = " ".join(str(d) for d in arr.shape)
        header = f"{name} {arr.ndim}" + (f" {dims}" if dims else "")
        chunks.append(header.encode("ascii") + b"\n")
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path: str | os.PathLike) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def line() -> list[str]:
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"truncated header at byte {pos}")
        text = blob[pos:end].decode("ascii", errors="replace").split(" ")
        pos = end + 1
        return text

    head = line()
    if len(head) != 2 or head[0] != MAGIC.decode():
        raise CheckpointError(f"not a MITI1 checkpoint: header {' '.join(head)!r}")
    try:
        count = int(head[1])
    except ValueError:
        raise CheckpointError(f"bad tensor count {head[1]!r}") from None
    out: dict[str, Tensor] = {}
    for k in range(count):
        fields = line()
        try:
            name, ndim = fields[0], int(fields[1])
            shape = tuple(int(v) for v in fields[2:])
        except (IndexError, ValueError):
            raise CheckpointError(f"record {k}: malformed header {' '.join(fields)!r}") from None
        if len(shape) != ndim or any(d < 0 for d in shape):
            raise CheckpointError(f"record {k} ({name}): shape {shape} does not match ndim {ndim}")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise CheckpointError(f"record {k} ({name}): truncated data")
        arr = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
        pos += nbytes
        out[name] = Tensor(arr.astype(np.float64), name=name)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after {count} records")
    return out
