"""Noise schedule, closed-form forward process and the true reverse posterior.

Timesteps are 1-based: ``n = 1..N``. ``alpha_bar(0)`` is the empty product 1.
Functions accept a scalar timestep or an integer array (one per batch item);
per-item coefficients are broadcast against the trailing volume axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TimestepError(ValueError):
    """Timestep outside the schedule's range."""


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray        # beta_1..beta_N
    alpha_bars: np.ndarray   # alpha_bar_0..alpha_bar_N, alpha_bar_0 = 1

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def _check(self, n, lo: int = 1) -> np.ndarray:
        n = np.asarray(n)
        if n.dtype.kind not in "iu":
            if not np.all(np.mod(n, 1) == 0):
                raise TimestepError(f"timestep must be an integer, got {n}")
            n = n.astype(np.int64)
        if np.any(n < lo) or np.any(n > self.num_steps):
            raise TimestepError(f"timestep {n} outside [{lo}, {self.num_steps}]")
        return n

    def beta(self, n) -> np.ndarray:
        return self.betas[self._check(n) - 1]

    def alpha_bar(self, n) -> np.ndarray:
        return self.alpha_bars[self._check(n, lo=0)]

    def posterior_variance(self, n) -> np.ndarray:
        """Variance of q(x_{n-1} | x_n, x_0); zero at n = 1."""
        n = self._check(n)
        ab, ab_prev, b = self.alpha_bars[n], self.alpha_bars[n - 1], self.betas[n - 1]
        return b * (1.0 - ab_prev) / (1.0 - ab)


def from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) == 0:
        raise ValueError("betas must be a non-empty 1-D sequence")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("every beta must lie in (0, 1)")
    alpha_bars = np.empty(len(betas) + 1)
    alpha_bars[0] = 1.0
    for i, b in enumerate(betas):
        alpha_bars[i + 1] = alpha_bars[i] * (1.0 - b)
    return NoiseSchedule(betas, alpha_bars)


def build_schedule(num_steps: int = 1000, slope: float = 5e-6) -> NoiseSchedule:
    """Linear schedule ``beta_n = slope * n``."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if slope <= 0:
        raise ValueError("slope must be positive")
    if slope * num_steps >= 1:
        raise ValueError(f"slope*N = {slope * num_steps} >= 1: beta must stay below 1")
    return from_betas(slope * np.arange(1, num_steps + 1, dtype=np.float64))


def _bcast(coef, like: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (np.ndim(like) - coef.ndim))


def q_sample(x0, n, eps, sched: NoiseSchedule) -> np.ndarray:
    """Noisy sample at timestep n: ``sqrt(ab_n) x0 + sqrt(1 - ab_n) eps``."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample: x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = _bcast(sched.alpha_bars[sched._check(n)], x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_mean_variance(x0, xn, n, sched: NoiseSchedule):
    """Mean and variance of q(x_{n-1} | x_n, x_0)."""
    n = sched._check(n)
    ab, ab_prev, b = sched.alpha_bars[n], sched.alpha_bars[n - 1], sched.betas[n - 1]
    # at n = 1 the mean is x0 exactly; 1 - ab_1 differs from beta_1 by rounding
    c0 = np.where(n == 1, 1.0, b * np.sqrt(ab_prev) / (1.0 - ab))
    cn = np.sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab)
    var = b * (1.0 - ab_prev) / (1.0 - ab)
    xn = np.asarray(xn)
    mean = _bcast(c0, xn) * np.asarray(x0) + _bcast(cn, xn) * xn
    return mean, _bcast(var, xn)


@dataclass(frozen=True)
class ResampledSteps:
    steps: np.ndarray         # s_1 < ... < s_J, 1-based original timesteps
    chain: NoiseSchedule      # effective schedule over j = 1..J

    @property
    def count(self) -> int:
        return len(self.steps)

    def model_timestep(self, j) -> np.ndarray:
        """Original timestep fed to the denoiser for chain index j (1-based)."""
        return self.steps[self.chain._check(j) - 1]


def resample(sched: NoiseSchedule, count: int) -> ResampledSteps:
    """Almost evenly spaced subset of 1..N (always containing N) with recomputed betas."""
    N = sched.num_steps
    if count < 1:
        raise ValueError("resampled step count must be >= 1")
    if count > N:
        raise ValueError(f"cannot resample {count} steps from {N}")
    if count == 1:
        steps = np.array([N], dtype=np.int64)
    else:
        steps = np.unique(np.round(np.linspace(1, N, count)).astype(np.int64))
    ab = sched.alpha_bars[steps]
    ab_prev = np.concatenate(([1.0], ab[:-1]))
    betas = 1.0 - ab / ab_prev
    alpha_bars = np.concatenate(([1.0], ab))
    if count == N:
        betas = sched.betas.copy()
    return ResampledSteps(steps, NoiseSchedule(betas, alpha_bars))
