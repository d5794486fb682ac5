"""Checkpoint files and atomic file writes.

Checkpoint layout: an ASCII header, one ``name shape`` line per tensor
(shape as ``AxBxC``; ``-`` for a scalar), a terminating ``end`` line, then
the tensors' float64 values, little-endian, row-major, in header order.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = "sparsecot-checkpoint v1"


def atomic_write(path, data) -> Path:
    """Write ``data`` (str or bytes) to a temp file in the target dir, then rename."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _shape_str(shape):
    return "x".join(str(d) for d in shape) if shape else "-"


def dumps_checkpoint(tensors) -> bytes:
    lines = [MAGIC]
    chunks = []
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"{name} {_shape_str(arr.shape)}")
        chunks.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(chunks)


def loads_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    header_end = blob.find(b"\nend\n")
    if not blob.startswith(MAGIC.encode() + b"\n") or header_end < 0:
        raise CheckpointError("not a sparsecot checkpoint")
    lines = blob[:header_end].decode("ascii").splitlines()[1:]
    offset = header_end + len(b"\nend\n")
    out = {}
    for line in lines:
        try:
            name, shape_txt = line.split(" ")
            shape = () if shape_txt == "-" else tuple(int(d) for d in shape_txt.split("x"))
        except ValueError:
            raise CheckpointError(f"bad header line {line!r}") from None
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated inside tensor {name!r}")
        out[name] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after last tensor")
    return out


def save_checkpoint(path, tensors) -> Path:
    return atomic_write(path, dumps_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads_checkpoint(Path(path).read_bytes())
