"""Binary model checkpoints.

Layout (all little-endian)::

    magic        4 bytes   b"RGCK"
    version      u16       1
    d            u32
    L            u32       layer count
    C            u32       class count
    mode         u8        0 = single-label, 1 = multi-label
    final_norm   u8
    dropout      f64
    ln_eps       f64
    n_tensors    u32
    then n_tensors times, in GcnModel.named_parameters() order:
        name_len u16, name (UTF-8), ndim u8, shape (ndim x u32), data (f64, C order)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from regiongraph.model import GcnModel
from regiongraph.train import init_model

MAGIC = b"RGCK"
VERSION = 1
_HEADER = "<HIIIBBddI"
MODES = ("single", "multi")


class CheckpointError(ValueError):
    pass


def to_bytes(model: GcnModel) -> bytes:
    parts = [MAGIC]
    params = list(model.named_parameters())
    parts.append(struct.pack(_HEADER, VERSION, model.d, model.num_layers, model.num_classes,
                             MODES.index(model.mode), int(model.final_norm), model.dropout_rate,
                             model.ln_eps, len(params)))
    for name, p in params:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<B{p.ndim}I", p.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes) -> GcnModel:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    try:
        version, d, L, C, mode, final_norm, dropout, eps, count = struct.unpack_from(_HEADER, raw, 4)
    except struct.error as exc:
        raise CheckpointError("truncated header") from exc
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if mode >= len(MODES):
        raise CheckpointError(f"unknown mode byte {mode}")
    model = init_model(d, L, C, seed=0, dropout_rate=dropout, mode=MODES[mode], final_norm=bool(final_norm))
    model.ln_eps = eps
    params = model.parameter_dict()
    if count != len(params):
        raise CheckpointError(f"expected {len(params)} tensors, found {count}")
    off = 4 + struct.calcsize(_HEADER)
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + n].decode()
            off += n
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            if name not in params:
                raise CheckpointError(f"unknown tensor {name!r}")
            if tuple(shape) != params[name].shape:
                raise CheckpointError(f"{name}: shape {shape}, expected {params[name].shape}")
            size = int(np.prod(shape))
            params[name][...] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError("truncated checkpoint") from exc
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes")
    return model


def save(model: GcnModel, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path: str | Path) -> GcnModel:
    return from_bytes(Path(path).read_bytes())
