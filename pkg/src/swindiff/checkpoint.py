"""VXDF checkpoint files.

Layout (little-endian)::

    b"VXDF"  u32 version
    config:  u32 n, n*u32 widths
             u32 m, m*(u32 window, u32 depth window)
             u32 heads, u32 time_dim, f64 max_period, u32 max_groups
             u32 N, f64 slope
             u32 len, utf-8 run config text (key=value lines)
    u32 n_params, then per parameter:
             u16 len, name, u8 rank, rank*u32 extents, f32 payload
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from . import config as C
from .swin import SwinConfig, SwinVNet
from .volume import atomic_write_bytes

MAGIC = b"VXDF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(buf, v):
    buf.write(struct.pack("<I", v))


def encode(model: SwinVNet, run: C.RunConfig) -> bytes:
    cfg = model.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, VERSION)
    _u32(buf, len(cfg.widths))
    buf.write(struct.pack(f"<{len(cfg.widths)}I", *cfg.widths))
    _u32(buf, len(cfg.windows))
    for n, nl in zip(cfg.windows, cfg.depth_windows):
        buf.write(struct.pack("<II", n, nl))
    buf.write(struct.pack("<IIdI", cfg.heads, cfg.time_dim, cfg.max_period, cfg.max_groups))
    buf.write(struct.pack("<Id", run.schedule.steps, run.schedule.slope))
    text = C.dumps(run).encode()
    _u32(buf, len(text))
    buf.write(text)
    named = list(model.named_parameters())
    _u32(buf, len(named))
    for name, p in named:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def decode(data: bytes, dtype=np.float64) -> tuple[SwinVNet, C.RunConfig]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a VXDF checkpoint")
    r = _Reader(data)
    r.raw(4)
    (version,) = r.take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported VXDF version {version}")
    (n,) = r.take("<I")
    widths = r.take(f"<{n}I")
    (m,) = r.take("<I")
    wins = [r.take("<II") for _ in range(m)]
    heads, time_dim, max_period, max_groups = r.take("<IIdI")
    steps, slope = r.take("<Id")
    (tlen,) = r.take("<I")
    run = C.loads(r.raw(tlen).decode())
    try:
        cfg = SwinConfig(widths=tuple(widths), windows=tuple(w[0] for w in wins),
                         depth_windows=tuple(w[1] for w in wins), heads=heads,
                         time_dim=time_dim, max_period=max_period, max_groups=max_groups)
    except ValueError as exc:
        raise CheckpointError(f"invalid model config: {exc}") from None
    if cfg != run.model or steps != run.schedule.steps or slope != run.schedule.slope:
        raise CheckpointError("binary config block disagrees with the embedded run config")

    model = SwinVNet(cfg)
    params = dict(model.named_parameters())
    (count,) = r.take("<I")
    if count != len(params):
        raise CheckpointError(f"checkpoint has {count} parameters, config implies {len(params)}")
    for _ in range(count):
        (nlen,) = r.take("<H")
        name = r.raw(nlen).decode()
        (rank,) = r.take("<B")
        shape = r.take(f"<{rank}I")
        if name not in params:
            raise CheckpointError(f"unexpected parameter {name!r}")
        p = params[name]
        if tuple(shape) != p.shape:
            raise CheckpointError(f"parameter {name}: shape {tuple(shape)} != expected {p.shape}")
        size = int(np.prod(shape)) * 4
        p.data = np.frombuffer(r.raw(size), dtype="<f4").reshape(shape).astype(dtype)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after parameter records")
    return model, run


def save_checkpoint(path, model: SwinVNet, run: C.RunConfig) -> None:
    atomic_write_bytes(Path(path), encode(model, run))


def load_checkpoint(path, dtype=np.float64) -> tuple[SwinVNet, C.RunConfig]:
    return decode(Path(path).read_bytes(), dtype)
