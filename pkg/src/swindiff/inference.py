"""Gaussian-weighted sliding-window synthesis over whole volumes."""
from __future__ import annotations

import logging
import time

import numpy as np

from .diffusion import Denoiser, reverse_step
from .schedule import ResampledSteps
from .volume import ct_from_unit

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-3


def window_starts(size: int, patch: int, overlap: float = 0.5) -> list[int]:
    """Window origins with stride ``patch*(1-overlap)``; the last is flush with the edge."""
    if patch > size:
        raise ValueError(f"patch extent {patch} larger than volume extent {size}")
    stride = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def window_grid(shape, patch, overlap: float = 0.5) -> list[tuple]:
    axes = [window_starts(s, p, overlap) for s, p in zip(shape, patch)]
    return [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]


def gaussian_weight(patch) -> np.ndarray:
    """Separable Gaussian centred on the window, sigma = extent/8, floored at 1e-3."""
    w = np.ones(tuple(patch))
    for axis, p in enumerate(patch):
        x = np.arange(p) - (p - 1) / 2.0
        g = np.exp(-0.5 * (x / (p / 8.0)) ** 2)
        shape = [1, 1, 1]
        shape[axis] = p
        w = w * g.reshape(shape)
    return np.maximum(w / w.max(), WEIGHT_FLOOR)


def blend_weights(shape, patch, overlap: float = 0.5) -> tuple[list[tuple], np.ndarray]:
    """Window corners and the per-voxel accumulated weight."""
    corners = window_grid(shape, patch, overlap)
    w = gaussian_weight(patch)
    total = np.zeros(shape)
    for c in corners:
        total[tuple(slice(o, o + p) for o, p in zip(c, patch))] += w
    return corners, total


def sliding_window_infer(mr: np.ndarray, model: Denoiser, patch, resampled: ResampledSteps,
                         runs: int = 5, seed: int = 0, overlap: float = 0.5,
                         batch: int = 64, add_noise: bool = True) -> np.ndarray:
    """Synthesize a CT volume (HU) from a normalized MR volume.

    Every window runs ``runs`` reverse trajectories; run r draws all its noise
    from ``default_rng(seed + r)`` in window order, so an R-run result equals the
    mean of the single-run results with seeds ``seed..seed+R-1``. Windows are
    evaluated ``batch`` at a time; noise is drawn per batch, so results depend
    on ``batch`` as well as ``seed``.
    """
    mr = np.asarray(mr, dtype=np.float64)
    patch = tuple(int(p) for p in patch)
    if runs < 1:
        raise ValueError("runs must be >= 1")
    corners, total = blend_weights(mr.shape, patch, overlap)
    weight = gaussian_weight(patch)
    slices = [tuple(slice(o, o + p) for o, p in zip(c, patch)) for c in corners]
    cond = np.stack([mr[s] for s in slices])

    acc = np.zeros(mr.shape)
    t0 = time.perf_counter()
    for r in range(runs):
        rng = np.random.default_rng(seed + r)
        t_run = time.perf_counter()
        for lo in range(0, len(slices), batch):
            part = cond[lo:lo + batch]
            x = rng.standard_normal(part.shape)
            for j in range(resampled.count, 0, -1):
                x = reverse_step(x, j, part, model, resampled, rng, add_noise)
            for s, win in zip(slices[lo:lo + batch], x):
                acc[s] += weight * win
        log.info("run %d/%d: %d windows in %.2fs (%.3fs/window)", r + 1, runs, len(slices),
                 time.perf_counter() - t_run, (time.perf_counter() - t_run) / len(slices))
    log.info("sliding-window synthesis took %.2fs", time.perf_counter() - t0)
    return ct_from_unit(acc / (total * runs))
