"""Versioned little-endian binary checkpoints.

Layout::

    b"FPAE" | u32 version | u32 n + config text (utf-8)
    | u64 optimizer step | u32 parameter count
    | per parameter: u16 n + name | u8 dtype code | u8 ndim | u32 dims...
                     | raw values | u8 has_moments | [raw m | raw v]
"""
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod

MAGIC = b"FPAE"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: config_mod.ModelConfig
    params: dict
    moments: dict = field(default_factory=dict)
    step: int = 0


def _write_array(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())


def dumps(model, optimizer=None):
    buf = io.BytesIO()
    text = config_mod.to_text(model.cfg).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    step = optimizer.state.step if optimizer is not None else 0
    named = model.named_parameters()
    buf.write(struct.pack("<QI", step, len(named)))
    for name, p in named:
        raw = name.encode("utf-8")
        arr = p.data
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        _write_array(buf, arr)
        if optimizer is not None and name in optimizer.state.m:
            buf.write(b"\x01")
            _write_array(buf, optimizer.state.m[name])
            _write_array(buf, optimizer.state.v[name])
        else:
            buf.write(b"\x00")
    return buf.getvalue()


def save(path, model, optimizer=None):
    with open(path, "wb") as fh:
        fh.write(dumps(model, optimizer))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an FPAE checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    cfg = config_mod.parse_text(r.take(n).decode("utf-8"))
    step, count = r.unpack("<QI")
    params, moments = {}, {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize

        def read():
            return np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))

        params[name] = read()
        if r.take(1) == b"\x01":
            moments[name] = (read(), read())
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint records")
    return Checkpoint(cfg, params, moments, step)


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def restore(ckpt, model, optimizer=None):
    """Copy checkpoint values into ``model`` (and optimizer moments)."""
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        missing = sorted(set(named) ^ set(ckpt.params))
        raise CheckpointError(f"parameter names differ from the model, e.g. {missing[:3]}")
    for name, p in named.items():
        src = ckpt.params[name]
        if src.shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {src.shape} != model shape {p.shape}")
        p.data = src.astype(p.data.dtype, copy=True)
    if optimizer is not None:
        for name, (m, v) in ckpt.moments.items():
            optimizer.state.m[name] = m.copy()
            optimizer.state.v[name] = v.copy()
        optimizer.state.step = ckpt.step
    return model


def load_model(path):
    from .model import Detector

    ckpt = load(path)
    return restore(ckpt, Detector(ckpt.config)), ckpt
