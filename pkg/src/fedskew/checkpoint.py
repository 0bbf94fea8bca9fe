"""Binary model checkpoints ("FRSM" format).

Layout, all little-endian::

    offset  size      field
    0       4         magic b"FRSM"
    4       4  u32    format version (1)
    8       4  u32    layer count L
    12      8  f64    dropout rate
    20      9*L       per layer: input_dim u32, output_dim u32, activation u8
                      (0 = identity, 1 = relu)
    ...     8*sum     every weight matrix in layer order, row-major [out x in], f64
    ...     8*sum     every bias vector in layer order, f64

Nothing follows the last bias; trailing bytes are rejected.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import ModelParams

MAGIC = b"FRSM"
VERSION = 1
_ACT_CODE = {"identity": 0, "relu": 1}
_CODE_ACT = {v: k for k, v in _ACT_CODE.items()}


def to_bytes(model: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<IId", VERSION, len(model.weights), model.dropout_rate)]
    for d_in, d_out, act in model.layer_spec:
        parts.append(struct.pack("<IIB", d_in, d_out, _ACT_CODE[act]))
    for w in model.weights:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
    for b in model.biases:
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def _take(buf: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(buf):
        raise FormatError(
            f"checkpoint truncated at byte offset {len(buf)} while reading {what} "
            f"(needed bytes {offset}..{offset + size})",
            offset=len(buf),
        )
    return buf[offset:offset + size]


def from_bytes(buf: bytes) -> ModelParams:
    magic = _take(buf, 0, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0", offset=0)
    version, n_layers, dropout = struct.unpack("<IId", _take(buf, 4, 16, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4", offset=4)
    if n_layers == 0:
        raise FormatError("checkpoint declares zero layers at offset 8", offset=8)
    pos = 20
    spec = []
    for i in range(n_layers):
        d_in, d_out, code = struct.unpack("<IIB", _take(buf, pos, 9, f"layer {i} header"))
        if code not in _CODE_ACT:
            raise FormatError(f"unknown activation code {code} at offset {pos + 8}", offset=pos + 8)
        spec.append((d_in, d_out, _CODE_ACT[code]))
        pos += 9
    weights, biases = [], []
    for i, (d_in, d_out, _) in enumerate(spec):
        n = d_in * d_out * 8
        weights.append(np.frombuffer(_take(buf, pos, n, f"layer {i} weights"), dtype="<f8")
                       .reshape(d_out, d_in).astype(np.float64))
        pos += n
    for i, (_, d_out, _) in enumerate(spec):
        n = d_out * 8
        biases.append(np.frombuffer(_take(buf, pos, n, f"layer {i} bias"), dtype="<f8").astype(np.float64))
        pos += n
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after offset {pos}", offset=pos)
    return ModelParams(weights, biases, tuple(a for _, _, a in spec), dropout)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: ModelParams, path) -> None:
    atomic_write_bytes(path, to_bytes(model))


def load_checkpoint(path) -> ModelParams:
    return from_bytes(Path(path).read_bytes())
