"""Image-quality metrics between HU volumes and the paired t-test."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.integrate import quad

from .volume import HU_SPAN, atomic_write_bytes

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


class DegenerateSampleError(ValueError):
    pass


def _pair(a, b, name: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: extents differ {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b, "mae")
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, data_range: float = HU_SPAN) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(data_range / math.sqrt(mse))


def ncc(a, b) -> float:
    """Pearson correlation over all voxels."""
    a, b = _pair(a, b, "ncc")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(np.mean(da * da)), math.sqrt(np.mean(db * db))
    if sa == 0.0 or sb == 0.0:
        raise ValueError("ncc: constant input has zero variance")
    return float(np.mean(da * db) / (sa * sb))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the last two axes."""
    out = sliding_window_view(img, len(k), axis=-2) @ k
    return sliding_window_view(out, len(k), axis=-1) @ k


def _ssim_terms(x: np.ndarray, y: np.ndarray, data_range: float, k: np.ndarray):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    axes = (-2, -1)
    return (lum * cs).mean(axis=axes), cs.mean(axis=axes)


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    img = img[..., :h, :w]
    return 0.25 * (img[..., 0::2, 0::2] + img[..., 1::2, 0::2] + img[..., 0::2, 1::2] + img[..., 1::2, 1::2])


def ms_ssim(a, b, scales: int = 5, data_range: float = HU_SPAN, win: int = 11,
            sigma: float = 1.5) -> float:
    """Multi-scale SSIM per axial slice (axes 0, 1 in-plane), averaged over slices.

    The scale count drops (with a warning) when the in-plane extent is below
    ``win * 2**(scales-1)``; the exponents are then the first entries of the
    5-scale set, renormalized to sum to one.
    """
    a, b = _pair(a, b, "ms_ssim")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    x = np.moveaxis(a, -1, 0)
    y = np.moveaxis(b, -1, 0)
    smallest = min(x.shape[-2:])
    fit = 1
    while fit < scales and smallest >= win * 2 ** fit:
        fit += 1
    if smallest < win:
        raise ValueError(f"ms_ssim: in-plane extent {smallest} smaller than window {win}")
    if fit < scales:
        warnings.warn(f"ms_ssim: in-plane extent {smallest} supports {fit} of {scales} scales",
                      stacklevel=2)
    weights = np.array(MS_SSIM_WEIGHTS[:fit])
    weights = weights / weights.sum()
    k = _gaussian_kernel(win, sigma)
    values = []
    for i in range(fit):
        ssim, cs = _ssim_terms(x, y, data_range, k)
        values.append(ssim if i == fit - 1 else cs)
        if i < fit - 1:
            x, y = _downsample(x), _downsample(y)
    stack = np.maximum(np.stack(values), 0.0)
    per_slice = np.prod(stack ** weights[:, None], axis=0)
    return float(per_slice.mean())


# --------------------------------------------------------------------------
# paired t-test
# --------------------------------------------------------------------------

def t_density(x: float, df: int) -> float:
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))


def t_two_sided_p(t: float, df: int) -> float:
    """Two-sided tail probability from the numerically integrated t density."""
    t = abs(t)
    if t == 0:
        return 1.0
    inner, _ = quad(t_density, 0.0, t, args=(df,), epsabs=1e-13, epsrel=1e-12, limit=200)
    return float(min(1.0, max(0.0, 1.0 - 2.0 * inner)))


def paired_t_test(x, y) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired_t_test: samples must be equal-length 1-D sequences")
    if len(x) < 2:
        raise ValueError("paired_t_test: need at least 2 pairs")
    d = x - y
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateSampleError("degenerate sample: paired differences have zero variance")
    t = float(np.mean(d)) / (sd / math.sqrt(len(d)))
    return t, t_two_sided_p(t, len(d) - 1)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

METRICS = ("mae", "psnr", "ms_ssim", "ncc")


def evaluate_pair(pred, truth, scales: int = 5) -> dict:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return {
            "mae": mae(pred, truth),
            "psnr": psnr(pred, truth),
            "ms_ssim": ms_ssim(pred, truth, scales),
            "ncc": ncc(pred, truth),
        }


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)     # dicts: volume, method, metrics...
    tests: list = field(default_factory=list)    # dicts: metric, t, p

    def add(self, volume: str, method: str, values: dict) -> None:
        self.rows.append({"volume": volume, "method": method, **values})

    def methods(self) -> list:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def values(self, method: str, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows if r["method"] == method])

    def summary(self) -> list:
        out = []
        for m in self.methods():
            for metric in METRICS:
                v = self.values(m, metric)
                sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
                out.append({"method": m, "metric": metric, "mean": float(np.mean(v)), "sd": sd})
        return out

    def compare(self, method_a: str, method_b: str) -> None:
        """Paired t-tests per metric, matching volumes by name."""
        a = {r["volume"]: r for r in self.rows if r["method"] == method_a}
        b = {r["volume"]: r for r in self.rows if r["method"] == method_b}
        names = sorted(set(a) & set(b))
        for metric in METRICS:
            xs = [a[n][metric] for n in names]
            ys = [b[n][metric] for n in names]
            try:
                t, p = paired_t_test(xs, ys)
            except ValueError:
                t, p = math.nan, math.nan
            self.tests.append({"metric": metric, "a": method_a, "b": method_b, "t": t, "p": p})

    def write(self, path) -> list[Path]:
        path = Path(path)
        written = [path]
        _write_csv(path, ["volume", "method", *METRICS], self.rows)
        summary = path.with_name(path.stem + "_summary.csv")
        _write_csv(summary, ["method", "metric", "mean", "sd"], self.summary())
        written.append(summary)
        if self.tests:
            tests = path.with_name(path.stem + "_ttest.csv")
            _write_csv(tests, ["metric", "a", "b", "t", "p"], self.tests)
            written.append(tests)
        return written


def _write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({c: (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns})
    atomic_write_bytes(path, buf.getvalue().encode())
