"""Swin-Vnet conditional denoiser.

A U-shaped encoder/decoder: a 1x1 stem, one convolutional block and four
shifted-window attention blocks going down, two attention blocks in the middle,
four attention blocks and one convolutional block coming back up, and a final
3x3 convolution emitting two channels (noise estimate, variance coefficient).

Down/up-sampling halves/doubles the two in-plane axes only; the slice axis
(4 voxels in the reference patches) keeps its extent throughout. An in-plane
extent that has already reached 1 stays 1. Attention windows larger than a
feature extent are clamped to that extent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv3d, GroupNorm, Linear, Module
from .tensor import ShapeError, Tensor


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SwinConfig:
    widths: tuple = (32, 64, 128, 256, 256)
    windows: tuple = (4, 4, 4, 2)
    depth_windows: tuple = (4, 2, 2, 2)
    heads: int = 4
    time_dim: int = 128
    max_period: float = 1e6
    max_groups: int = 32
    in_channels: int = 2
    out_channels: int = 2

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ValueError("widths needs 5 entries: conv level + 4 attention levels")
        if len(self.windows) != 4 or len(self.depth_windows) != 4:
            raise ValueError("windows and depth_windows need 4 entries")
        for w in self.widths[1:]:
            if w % self.heads:
                raise ValueError(f"attention width {w} not divisible by {self.heads} heads")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        for n, nl in zip(self.windows, self.depth_windows):
            if n < 1 or nl < 1:
                raise ValueError("window sizes must be positive")


# --------------------------------------------------------------------------
# timestep embedding and conditioning
# --------------------------------------------------------------------------

def sinusoidal_embed(n, dim: int = 128, max_period: float = 1e6) -> np.ndarray:
    """Sine half then cosine half, frequencies ``max_period**(-k/(dim/2-1))``.

    ``n`` may be a scalar (returns ``(dim,)``) or a 1-D array (``(B, dim)``).
    """
    if dim % 2:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    half = dim // 2
    k = np.arange(half, dtype=np.float64)
    omega = max_period ** (-k / max(half - 1, 1))
    n = np.asarray(n, dtype=np.float64)
    if np.any(n < 0):
        raise ValueError("timestep must be non-negative")
    arg = n[..., None] * omega
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def scale_shift(h, sc, sh) -> Tensor:
    """``h * (1 + sc) + sh`` with per-channel ``sc``/``sh`` of shape ``(B, C)`` or ``(C,)``."""
    h, sc, sh = T.as_tensor(h), T.as_tensor(sc), T.as_tensor(sh)
    C = h.shape[-1]
    if sc.shape[-1] != C or sh.shape[-1] != C:
        raise ShapeError(f"scale_shift: {C} channels vs scale {sc.shape} / shift {sh.shape}")
    if sc.ndim == 2:
        expand = (sc.shape[0],) + (1,) * (h.ndim - 2) + (C,)
        sc, sh = sc.reshape(expand), sh.reshape(expand)
    return h * (sc + 1.0) + sh


# --------------------------------------------------------------------------
# window algebra
# --------------------------------------------------------------------------

def effective_window(extents, window) -> tuple:
    """Clamp a window to the feature extents and check divisibility."""
    eff = tuple(min(w, e) for w, e in zip(window, extents))
    for e, w in zip(extents, eff):
        if e % w:
            raise ShapeError(
                f"window_partition: extents {tuple(extents)} not divisible by window {eff}")
    return eff


def window_partition(x, window) -> Tensor:
    """``(B, H, W, L, C)`` -> ``(B * nWin, N*N*N_L, C)`` non-overlapping windows."""
    x = T.as_tensor(x)
    B, H, W, L, C = x.shape
    a, b, c = window
    if H % a or W % b or L % c:
        raise ShapeError(f"window_partition: extents {(H, W, L)} not divisible by window {window}")
    y = x.reshape(B, H // a, a, W // b, b, L // c, c, C)
    y = y.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return y.reshape(B * (H // a) * (W // b) * (L // c), a * b * c, C)


def window_merge(windows, window, shape) -> Tensor:
    """Inverse of :func:`window_partition` for target shape ``(B, H, W, L, C)``."""
    B, H, W, L, C = shape
    a, b, c = window
    y = T.as_tensor(windows).reshape(B, H // a, W // b, L // c, a, b, c, C)
    y = y.transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return y.reshape(B, H, W, L, C)


def cyclic_shift(x, shift) -> Tensor:
    return T.roll(x, tuple(-s for s in shift), (1, 2, 3))


def cyclic_unshift(x, shift) -> Tensor:
    return T.roll(x, tuple(shift), (1, 2, 3))


class WindowAttention(Module):
    """Multi-head self-attention applied independently within each window."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"window_attention: {dim} channels not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, tokens) -> Tensor:
        """``tokens`` is ``(nW, n_tok, C)``; returns the same shape."""
        nw, nt, C = tokens.shape
        if C % self.heads:
            raise ShapeError(f"window_attention: {C} channels not divisible by {self.heads} heads")
        dk = C // self.heads

        def split(t):
            return t.reshape(nw, nt, self.heads, dk).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(tokens)), split(self.k(tokens)), split(self.v(tokens))
        att = T.softmax(T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk)), axis=-1)
        heads = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(nw, nt, C)
        return self.proj(heads)


def windowed_attention(x, attn: WindowAttention, window, shift=(0, 0, 0)) -> Tensor:
    """(Shifted-)window self-attention over a ``(B, H, W, L, C)`` feature map."""
    shifted = any(shift)
    y = cyclic_shift(x, shift) if shifted else x
    out = window_merge(attn(window_partition(y, window)), window, y.shape)
    return cyclic_unshift(out, shift) if shifted else out


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation (half-pixel centres, edge clamp) from n_in to n_out samples."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def down_extent(e: int) -> int:
    if e == 1:
        return 1
    if e % 2:
        raise ShapeError(f"in-plane extent {e} cannot be halved (must be even or 1)")
    return e // 2


def resample_inplane(x, size) -> Tensor:
    """Interpolate the two in-plane axes of ``(B, H, W, L, C)`` to ``size=(H', W')``."""
    for axis, n_out in zip((1, 2), size):
        n_in = x.shape[axis]
        if n_in != n_out:
            x = T.resample_axis(x, interp_matrix(n_in, n_out), axis)
    return x


# --------------------------------------------------------------------------
# blocks
# --------------------------------------------------------------------------

class ConvBlock(Module):
    """Four 3x3x3 convolutions with timestep scale-shift after the first and a
    residual from the first to the last; optional resample + 1x1 convolution."""

    def __init__(self, n_in, width, n_out, cfg: SwinConfig, rng, resample: str | None):
        self.time = Linear(cfg.time_dim, 2 * width, rng)
        self.convs = [Conv3d(n_in if i == 0 else width, width, 3, rng) for i in range(4)]
        self.norms = [GroupNorm(width, cfg.max_groups) for _ in range(4)]
        self.resample = resample
        self.out = Conv3d(width, n_out, 1, rng)

    def forward(self, x, temb, size=None) -> Tensor:
        sc_sh = self.time(temb)
        width = sc_sh.shape[-1] // 2
        sc, sh = sc_sh[:, :width], sc_sh[:, width:]
        h = self.norms[0](self.convs[0](x))
        first = T.silu(scale_shift(h, sc, sh))
        h = first
        for conv, norm in zip(self.convs[1:], self.norms[1:]):
            h = T.silu(norm(conv(h)))
        h = h + first
        if size is not None:
            h = resample_inplane(h, size)
        return self.out(h)


class SwinBlock(Module):
    """W-SA then SW-SA (each followed by a linear layer), group norm + SiLU after
    every module, timestep scale-shift, residual across the block."""

    def __init__(self, n_in, width, n_out, window, cfg: SwinConfig, rng, resample: bool):
        self.window = tuple(window)
        self.inp = Conv3d(n_in, width, 1, rng) if n_in != width else None
        self.time = Linear(cfg.time_dim, 2 * width, rng)
        self.wsa = WindowAttention(width, cfg.heads, rng)
        self.wsa_lin = Linear(width, width, rng)
        self.swsa = WindowAttention(width, cfg.heads, rng)
        self.swsa_lin = Linear(width, width, rng)
        self.norms = [GroupNorm(width, cfg.max_groups) for _ in range(4)]
        self.out = Conv3d(width, n_out, 1, rng) if resample else None

    def forward(self, x, temb, size=None) -> Tensor:
        if self.inp is not None:
            x = self.inp(x)
        win = effective_window(x.shape[1:4], self.window)
        shift = tuple(w // 2 for w in win)
        sc_sh = self.time(temb)
        width = sc_sh.shape[-1] // 2
        sc, sh = sc_sh[:, :width], sc_sh[:, width:]

        h = self.norms[0](windowed_attention(x, self.wsa, win))
        h = T.silu(scale_shift(h, sc, sh))
        h = T.silu(self.norms[1](self.wsa_lin(h)))
        h = T.silu(self.norms[2](windowed_attention(h, self.swsa, win, shift)))
        h = T.silu(self.norms[3](self.swsa_lin(h)))
        h = h + x
        if self.out is None:
            return h
        if size is not None:
            h = resample_inplane(h, size)
        return self.out(h)


# --------------------------------------------------------------------------
# full network
# --------------------------------------------------------------------------

def level_extents(shape, levels: int = 5) -> list:
    """Spatial extents at resolutions r0..r_levels for an input ``(H, W, L)``."""
    H, W, L = shape
    out = [(H, W, L)]
    for _ in range(levels):
        H, W = down_extent(H), down_extent(W)
        out.append((H, W, L))
    return out


class SwinVNet(Module):
    def __init__(self, cfg: SwinConfig = SwinConfig(), seed: int = 0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        w0, w1, w2, w3, w4 = cfg.widths
        win = [(n, n, nl) for n, nl in zip(cfg.windows, cfg.depth_windows)]
        self.stem = Conv3d(cfg.in_channels, w0, 1, rng)
        self.enc0 = ConvBlock(w0, w0, w1, cfg, rng, "down")
        self.enc = [
            SwinBlock(w1, w1, w2, win[0], cfg, rng, True),
            SwinBlock(w2, w2, w3, win[1], cfg, rng, True),
            SwinBlock(w3, w3, w4, win[2], cfg, rng, True),
            SwinBlock(w4, w4, w4, win[3], cfg, rng, True),
        ]
        self.mid = [SwinBlock(w4, w4, w4, win[3], cfg, rng, False) for _ in range(2)]
        self.dec = [
            SwinBlock(w4 + w4, w4, w3, win[3], cfg, rng, True),
            SwinBlock(w3 + w4, w3, w2, win[2], cfg, rng, True),
            SwinBlock(w2 + w3, w2, w1, win[1], cfg, rng, True),
            SwinBlock(w1 + w2, w1, w0, win[0], cfg, rng, True),
        ]
        self.dec0 = ConvBlock(w0 + w1, w0, w0, cfg, rng, "up")
        self.head = Conv3d(w0 + w0, cfg.out_channels, 3, rng, zero=True)

    def check_extents(self, shape) -> list:
        """Validate an input ``(H, W, L)`` and return the extents per resolution."""
        H, W, L = shape
        try:
            ext = level_extents((H, W, L))
        except ShapeError as exc:
            raise ShapeError(
                f"input extents {(H, W, L)}: in-plane extents must survive 5 halvings "
                f"(even at each step until 1, e.g. multiples of 32 or powers of two); {exc}"
            ) from None
        cfg = self.config
        wins = [(n, n, nl) for n, nl in zip(cfg.windows, cfg.depth_windows)]
        checks = [(ext[1], wins[0]), (ext[2], wins[1]), (ext[3], wins[2]), (ext[4], wins[3]),
                  (ext[5], wins[3])]
        for e, w in checks:
            try:
                effective_window(e, w)
            except ShapeError:
                raise ShapeError(
                    f"input extents {(H, W, L)}: features {e} not divisible by window {w} "
                    f"(clamped to extent); slice axis L must be divisible by the depth windows "
                    f"{cfg.depth_windows}") from None
        return ext

    def forward(self, noisy, cond, n):
        """Return ``(eps, k)`` tensors of shape ``(B, H, W, L)``.

        ``noisy`` and ``cond`` are ``(B, H, W, L)`` arrays/tensors, ``n`` a scalar or
        ``(B,)`` timestep array. ``k`` is squashed into [-1, 1] with tanh.
        """
        noisy, cond = T.as_tensor(noisy), T.as_tensor(cond)
        if noisy.shape != cond.shape or noisy.ndim != 4:
            raise ShapeError(f"forward: noisy {noisy.shape} and condition {cond.shape} "
                             "must share shape (B, H, W, L)")
        B = noisy.shape[0]
        ext = self.check_extents(noisy.shape[1:])
        n = np.broadcast_to(np.asarray(n, dtype=np.float64), (B,))
        temb = T.Tensor(sinusoidal_embed(n, self.config.time_dim, self.config.max_period)
                        .astype(noisy.dtype))
        x = T.concat([noisy.reshape(noisy.shape + (1,)), cond.reshape(cond.shape + (1,))], axis=-1)

        h0 = self.stem(x)
        e0 = self.enc0(h0, temb, ext[1][:2])
        skips = [e0]
        h = e0
        for i, block in enumerate(self.enc):
            h = block(h, temb, ext[i + 2][:2])
            skips.append(h)
        for block in self.mid:
            h = block(h, temb)
        for i, block in enumerate(self.dec):
            h = block(T.concat([h, skips[4 - i]], axis=-1), temb, ext[4 - i][:2])
        h = self.dec0(T.concat([h, skips[0]], axis=-1), temb, ext[0][:2])
        out = self.head(T.concat([h, h0], axis=-1))
        eps = out[..., 0]
        k = T.tanh(out[..., 1])
        return eps, k

    def predict(self, noisy, cond, n):
        """Inference without graph construction; returns numpy arrays."""
        with T.no_grad():
            eps, k = self.forward(noisy, cond, n)
        return eps.data, k.data
