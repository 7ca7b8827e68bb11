"""Volumes: the VXVOL file format, intensity normalization, synthetic paired
phantoms and random patch extraction."""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

HU_MIN = -1024.0
HU_MAX = 1650.0
HU_SPAN = HU_MAX - HU_MIN

AIR_HU = -1000.0
SOFT_HU = 40.0
BONE_HU = 700.0

MAGIC = b"VXVOL"
VERSION = 1
_HEADER = struct.Struct("<5sB3I3dB")
_SPACES = {"HU": 0, "normalized": 1}
_SPACE_NAMES = {v: k for k, v in _SPACES.items()}
MAX_VOXELS = 1 << 31


class VolumeFormatError(ValueError):
    """A VXVOL file could not be decoded."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class ExtentOverflowError(VolumeFormatError):
    pass


@dataclass
class Volume:
    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    space: str = "HU"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.values.shape}")
        if self.space not in _SPACES:
            raise ValueError(f"unknown intensity space {self.space!r}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def extents(self) -> tuple:
        return self.values.shape


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_volume(vol: Volume) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, *vol.extents, *vol.spacing, _SPACES[vol.space])
    return header + vol.values.astype("<f4", copy=False).tobytes(order="C")


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not a VXVOL file")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"header truncated: {len(buf)} of {_HEADER.size} bytes")
    _, version, h, w, l, sx, sy, sz, space = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VolumeFormatError(f"unsupported VXVOL version {version}")
    if space not in _SPACE_NAMES:
        raise VolumeFormatError(f"unknown space tag {space}")
    voxels = h * w * l
    if min(h, w, l) == 0 or voxels > MAX_VOXELS:
        raise ExtentOverflowError(f"extents {(h, w, l)} out of range")
    need = _HEADER.size + 4 * voxels
    if len(buf) < need:
        raise TruncatedPayloadError(f"payload truncated: {len(buf)} of {need} bytes")
    values = np.frombuffer(buf, dtype="<f4", count=voxels, offset=_HEADER.size).reshape(h, w, l)
    return Volume(values.astype(np.float32), (sx, sy, sz), _SPACE_NAMES[space])


def save_volume(path, vol: Volume) -> None:
    atomic_write_bytes(path, encode_volume(vol))


def load_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


# --------------------------------------------------------------------------
# intensity normalization
# --------------------------------------------------------------------------

def ct_to_unit(hu: np.ndarray) -> np.ndarray:
    return 2.0 * (np.clip(hu, HU_MIN, HU_MAX) - HU_MIN) / HU_SPAN - 1.0


def ct_from_unit(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x) + 1.0) * 0.5 * HU_SPAN + HU_MIN


def normalize_ct(v: Volume) -> Volume:
    if v.space != "HU":
        raise ValueError("normalize_ct expects an HU-space volume")
    return replace(v, values=ct_to_unit(v.values.astype(np.float64)), space="normalized")


def denormalize_ct(v: Volume) -> Volume:
    if v.space != "normalized":
        raise ValueError("denormalize_ct expects a normalized volume")
    return replace(v, values=ct_from_unit(v.values.astype(np.float64)), space="HU")


def mr_to_unit(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        raise ValueError("normalize_mr: constant volume has zero dynamic range")
    return 2.0 * (values - lo) / (hi - lo) - 1.0


def normalize_mr(v: Volume) -> Volume:
    return replace(v, values=mr_to_unit(v.values), space="normalized")


# --------------------------------------------------------------------------
# synthetic phantoms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    extents: tuple = (32, 32, 16)
    blobs_min: int = 6
    blobs_max: int = 12
    radius_min: float = 2.5
    radius_max: float = 6.0
    amplitude_min: float = 0.8
    amplitude_max: float = 2.0
    air_threshold: float = -0.35
    bone_threshold: float = 0.35
    smoothing: float = 0.8
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.extents) != 3 or min(self.extents) < 16:
            raise ValueError(f"phantom extents must be >= 16 per axis, got {self.extents}")
        if not 0 <= self.blobs_min <= self.blobs_max:
            raise ValueError("need 0 <= blobs_min <= blobs_max")
        if not self.air_threshold < 0 < self.bone_threshold:
            raise ValueError("thresholds must satisfy air < 0 < bone")


_INT_KEYS = {"seed", "blobs_min", "blobs_max"}
_TUPLE_KEYS = {"extents": int, "spacing": float}


def parse_phantom_spec(text: str) -> PhantomSpec:
    """Parse ``key=value`` lines (``#`` comments allowed) into a spec."""
    kwargs = {}
    names = set(PhantomSpec.__dataclass_fields__)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"phantom spec line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ValueError(f"phantom spec line {lineno}: unknown key {key!r}")
        if key in _TUPLE_KEYS:
            parts = value.replace("x", ",").split(",")
            kwargs[key] = tuple(_TUPLE_KEYS[key](p) for p in parts)
        elif key in _INT_KEYS:
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    return PhantomSpec(**kwargs)


def mr_field(spec: PhantomSpec) -> np.ndarray:
    """Smooth MR-like field in (-1, 1): tanh of a sum of signed Gaussian bumps."""
    rng = np.random.default_rng(spec.seed)
    shape = spec.extents
    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
    total = np.zeros(shape)
    count = int(rng.integers(spec.blobs_min, spec.blobs_max + 1))
    for _ in range(count):
        centre = rng.uniform(0, np.array(shape) - 1)
        radius = rng.uniform(spec.radius_min, spec.radius_max)
        amp = rng.uniform(spec.amplitude_min, spec.amplitude_max) * rng.choice((-1.0, 1.0))
        d2 = sum((g - c) ** 2 for g, c in zip(grids, centre))
        total += amp * np.exp(-d2 / (2.0 * radius ** 2))
    return np.tanh(total)


def band_map(field: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    ct = np.full(field.shape, SOFT_HU)
    ct[field < spec.air_threshold] = AIR_HU
    ct[field > spec.bone_threshold] = BONE_HU
    return ct


def synthesize_pair(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Deterministic (MR, CT-in-HU) pair for a spec."""
    mr = mr_field(spec)
    ct = band_map(mr, spec)
    if spec.smoothing > 0:
        ct = gaussian_filter(ct, spec.smoothing, mode="nearest")
    ct = np.clip(ct, HU_MIN, HU_MAX)
    return Volume(mr, spec.spacing, "normalized"), Volume(ct, spec.spacing, "HU")


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------

def extract_patches(mr: np.ndarray, ct: np.ndarray, patch, count: int,
                    rng: np.random.Generator):
    """``count`` aligned random patch pairs; corners uniform over valid positions.

    Returns a list of ``(mr_patch, ct_patch, corner)``.
    """
    mr, ct = np.asarray(mr), np.asarray(ct)
    if mr.shape != ct.shape:
        raise ValueError(f"MR {mr.shape} and CT {ct.shape} extents differ")
    if any(p > s for p, s in zip(patch, mr.shape)):
        raise ValueError(f"patch {tuple(patch)} larger than volume {mr.shape}")
    out = []
    for _ in range(count):
        corner = tuple(int(rng.integers(0, s - p + 1)) for s, p in zip(mr.shape, patch))
        sl = tuple(slice(c, c + p) for c, p in zip(corner, patch))
        out.append((mr[sl], ct[sl], corner))
    return out
