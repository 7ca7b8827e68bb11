"""Hybrid loss, learned-variance reverse moments, reverse sampling and
Monte Carlo generation.

Functions that feed the loss accept either numpy arrays or autodiff
:class:`~swindiff.tensor.Tensor` values for the network outputs; schedule
coefficients are always plain arrays. ``n`` indexes the schedule passed in,
which during sampling and training is the resampled chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import tensor as T
from .schedule import NoiseSchedule, ResampledSteps, _bcast, posterior_mean_variance
from .tensor import Tensor

VAR_FLOOR = 1e-20
LOG_VAR_FLOOR = math.log(VAR_FLOOR)
PROB_FLOOR = 1e-12
INTENSITY_LEVELS = 1024 + 1650


class Denoiser(Protocol):
    def predict(self, noisy: np.ndarray, cond: np.ndarray, n) -> tuple[np.ndarray, np.ndarray]:
        ...


def _exp(x):
    return T.exp(x) if isinstance(x, Tensor) else np.exp(x)


def _log(x):
    return T.log(x) if isinstance(x, Tensor) else np.log(x)


def mean_from_noise(xn, n, eps_theta, sched: NoiseSchedule):
    """Reverse mean from the predicted noise."""
    b = _bcast(sched.beta(n), xn)
    ab = _bcast(sched.alpha_bar(n), xn)
    return (xn - (b / np.sqrt(1.0 - ab)) * eps_theta) * (1.0 / np.sqrt(1.0 - b))


def log_variance_bounds(n, sched: NoiseSchedule, like) -> tuple[np.ndarray, np.ndarray]:
    """``(log beta_n, log posterior variance)``, the latter floored at log(1e-20)."""
    log_hi = np.log(sched.beta(n))
    with np.errstate(divide="ignore"):
        log_lo = np.maximum(np.log(sched.posterior_variance(n)), LOG_VAR_FLOOR)
    return _bcast(log_hi, like), _bcast(log_lo, like)


def log_variance_from_coeff(k_theta, n, sched: NoiseSchedule):
    log_hi, log_lo = log_variance_bounds(n, sched, k_theta)
    return (k_theta + 1.0) * (0.5 * log_hi) + (1.0 - k_theta) * (0.5 * log_lo)


def variance_from_coeff(k_theta, n, sched: NoiseSchedule):
    """Interpolate log-variance between the posterior variance (k=-1) and beta_n (k=1)."""
    if not isinstance(k_theta, Tensor):
        k = np.asarray(k_theta)
        if np.any(k < -1.0) or np.any(k > 1.0):
            raise ValueError("variance coefficient must lie in [-1, 1]")
        # geometric form: same value as exp of the log interpolation, exact at k = +-1
        hi = _bcast(sched.beta(n), k)
        lo = _bcast(np.maximum(sched.posterior_variance(n), VAR_FLOOR), k)
        return hi ** ((1.0 + k) / 2.0) * lo ** ((1.0 - k) / 2.0)
    return _exp(log_variance_from_coeff(k_theta, n, sched))


def loss_mean(eps_true, eps_pred):
    """Mean absolute error between true and predicted noise."""
    if isinstance(eps_pred, Tensor) or isinstance(eps_true, Tensor):
        return T.mean(T.abs_(T.sub(eps_true, eps_pred)))
    return float(np.mean(np.abs(np.asarray(eps_true) - np.asarray(eps_pred))))


def _gelu(x, approximate: str):
    if isinstance(x, Tensor):
        return T.gelu(x, approximate)
    return T.gelu(T.Tensor(np.asarray(x, dtype=np.float64)), approximate).data


def _floor(x, v):
    return T.maximum(x, v) if isinstance(x, Tensor) else np.maximum(x, v)


def _where(mask, a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return T.where(mask, a, b)
    return np.where(mask, a, b)


def kl_term(mu_true, var_true, mu_theta, log_var_theta):
    """Per-voxel ``log S_th - log S + S / S_th + (mu_th - mu)^2 / S_th - 1``."""
    with np.errstate(divide="ignore"):
        log_var_true = np.maximum(np.log(var_true), LOG_VAR_FLOOR)
    inv = _exp(-log_var_theta) if isinstance(log_var_theta, Tensor) else np.exp(-log_var_theta)
    return log_var_theta - log_var_true + var_true * inv + ((mu_theta - mu_true) ** 2) * inv - 1.0


def boundary_nll(xn, mu_theta, log_var_theta, levels: int = INTENSITY_LEVELS,
                 approximate: str = "tanh"):
    """Per-voxel discretized boundary term (in bits) for the n = 0 case.

    GELU stands in for the Gaussian CDF as written; every log argument is
    floored at 1e-12 because GELU differences can be non-positive.
    """
    xn = np.asarray(xn)
    inv_std = _exp(log_var_theta * -0.5)
    centred = (mu_theta * -1.0) + xn
    high = _gelu((centred + 1.0 / levels) * inv_std, approximate)
    low = _gelu((centred - 1.0 / levels) * inv_std, approximate)
    edge = 1.0 - 1.0 / levels
    mid = _log(_floor(high - low, PROB_FLOOR))
    top = _log(_floor(low * -1.0 + 1.0, PROB_FLOOR))
    bottom = _log(_floor(high, PROB_FLOOR))
    logp = _where(xn > edge, top, _where(xn < -edge, bottom, mid))
    return logp * (-1.0 / math.log(2.0))


def loss_vlb(x0, xn, n, mu_theta, var_theta, sched: NoiseSchedule, *,
             log_var_theta=None, approximate: str = "tanh"):
    """Variance loss averaged over voxels (and batch), in bits.

    ``mu_theta`` is detached so only the variance path carries gradient.
    For ``n > 0`` the true posterior moments of ``sched`` are used; ``n == 0``
    evaluates the discretized boundary term. A per-item ``n`` array may mix both.
    Pass ``log_var_theta`` to avoid a log of ``var_theta`` (preferred in training).
    """
    if isinstance(mu_theta, Tensor):
        mu_theta = mu_theta.data
    mu_theta = np.asarray(mu_theta)
    if log_var_theta is None:
        v = var_theta.data if isinstance(var_theta, Tensor) else np.asarray(var_theta)
        if np.any(v <= 0):
            raise ValueError("loss_vlb: predicted variance must be positive")
        log_var_theta = _log(var_theta)

    xn = np.asarray(xn)
    n_arr = np.asarray(n)
    pos = n_arr > 0
    terms = None
    if np.any(pos):
        n_safe = np.where(pos, n_arr, 1)
        mu_true, var_true = posterior_mean_variance(x0, xn, n_safe, sched)
        var_true = np.broadcast_to(var_true, xn.shape)
        terms = kl_term(mu_true, var_true, mu_theta, log_var_theta) * (0.5 / math.log(2.0))
    if np.any(~pos):
        bnd = boundary_nll(xn, mu_theta, log_var_theta, approximate=approximate)
        if terms is None:
            terms = bnd
        else:
            terms = _where(np.broadcast_to(_bcast(pos, xn), xn.shape), terms, bnd)
    return T.mean(terms) if isinstance(terms, Tensor) else float(np.mean(terms))


def total_loss(l_mean, l_var, gamma: float):
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return l_mean + gamma * l_var


@dataclass
class LossBreakdown:
    l_mean: float
    l_var: float
    gamma: float
    total: float


def training_loss(model, x0: np.ndarray, cond: np.ndarray, j: np.ndarray, eps: np.ndarray,
                  resampled: ResampledSteps, gamma: float):
    """Hybrid loss for a batch at chain indices ``j`` (1-based, one per item).

    Returns ``(loss_tensor, LossBreakdown)``.
    """
    chain = resampled.chain
    from .schedule import q_sample

    xn = q_sample(x0, j, eps, chain)
    eps_pred, k = model.forward(xn, cond, resampled.model_timestep(j))
    l_mean = loss_mean(eps, eps_pred)
    mu = mean_from_noise(xn, j, eps_pred.data, chain)
    log_var = log_variance_from_coeff(k, j, chain)
    l_var = loss_vlb(x0, xn, j, mu, None, chain, log_var_theta=log_var)
    loss = total_loss(l_mean, l_var, gamma)
    return loss, LossBreakdown(l_mean.item(), l_var.item(), gamma, loss.item())


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def reverse_step(x, j: int, cond, model: Denoiser, resampled: ResampledSteps,
                 rng: np.random.Generator | None, add_noise: bool = True) -> np.ndarray:
    """One reverse step from chain index j to j-1. No noise is added at j = 1."""
    x = np.asarray(x)
    cond = np.asarray(cond)
    if x.shape != cond.shape:
        raise ValueError(f"reverse_step: sample {x.shape} and condition {cond.shape} differ")
    chain = resampled.chain
    chain._check(j)
    eps, k = model.predict(x, cond, resampled.model_timestep(j))
    mu = mean_from_noise(x, j, eps, chain)
    if not add_noise or j == 1:
        return mu
    sigma = np.sqrt(variance_from_coeff(k, j, chain))
    return mu + sigma * rng.standard_normal(x.shape)


def sample(cond, model: Denoiser, resampled: ResampledSteps, rng: np.random.Generator,
           add_noise: bool = True, x_start=None) -> np.ndarray:
    """One full reverse trajectory starting from standard-normal noise."""
    cond = np.asarray(cond)
    x = rng.standard_normal(cond.shape) if x_start is None else np.asarray(x_start, dtype=np.float64)
    for j in range(resampled.count, 0, -1):
        x = reverse_step(x, j, cond, model, resampled, rng, add_noise)
    return x


def generate(cond, model: Denoiser, resampled: ResampledSteps, runs: int = 5, seed: int = 0,
             add_noise: bool = True) -> np.ndarray:
    """Average of ``runs`` independent trajectories; run r uses ``default_rng(seed + r)``."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    acc = None
    for r in range(runs):
        out = sample(cond, model, resampled, np.random.default_rng(seed + r), add_noise)
        acc = out if acc is None else acc + out
    return acc / runs
