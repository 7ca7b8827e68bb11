"""Training loop for the hybrid diffusion loss."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .diffusion import training_loss
from .optim import AdamW
from .schedule import build_schedule, resample
from .swin import SwinVNet
from .volume import atomic_write_bytes, extract_patches

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class History:
    rows: list = field(default_factory=list)   # (step, epoch, l_mean, l_var, total)

    def l_mean(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "epoch", "L_mean", "L_var", "L"])
        for step, epoch, lm, lv, lt in self.rows:
            w.writerow([step, epoch, repr(lm), repr(lv), repr(lt)])
        return buf.getvalue()


def cast_model(model: SwinVNet, precision: int) -> np.dtype:
    dtype = {32: np.float32, 64: np.float64}.get(precision)
    if dtype is None:
        raise ValueError(f"precision must be 32 or 64, got {precision}")
    for p in model.parameters():
        p.data = p.data.astype(dtype)
    return np.dtype(dtype)


def train(run: RunConfig, pairs, out_dir=None, model: SwinVNet | None = None) -> tuple[SwinVNet, History]:
    """Train on ``pairs`` of (normalized MR, CT in [-1, 1]) arrays.

    An epoch draws ``patches_per_pair`` random patches from every pair, shuffles
    them and walks through in batches. Stops after ``train.epochs`` or
    ``train.max_steps`` (if > 0), whichever comes first.
    """
    if not pairs:
        raise ValueError("training needs at least one (MR, CT) pair")
    tc = run.train
    model = model or SwinVNet(run.model, seed=run.seed)
    model.check_extents(run.data.patch)
    dtype = cast_model(model, tc.precision)
    resampled = resample(build_schedule(run.schedule.steps, run.schedule.slope), run.schedule.resampled)
    opt = AdamW(model.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2), eps=tc.eps,
                weight_decay=tc.weight_decay)
    rng = np.random.default_rng(run.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    history = History()
    step = 0
    t0 = time.perf_counter()

    for epoch in range(1, tc.epochs + 1):
        patches = []
        for mr, ct in pairs:
            patches.extend(extract_patches(mr, ct, run.data.patch, run.data.patches_per_pair, rng))
        order = rng.permutation(len(patches))
        for lo in range(0, len(order), tc.batch_size):
            idx = order[lo:lo + tc.batch_size]
            cond = np.stack([patches[i][0] for i in idx]).astype(dtype)
            x0 = np.stack([patches[i][1] for i in idx]).astype(dtype)
            j = rng.integers(1, resampled.count + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape).astype(dtype)

            opt.zero_grad()
            loss, parts = training_loss(model, x0, cond, j, eps, resampled, run.gamma)
            if not math.isfinite(parts.total):
                raise NonFiniteLossError(
                    f"non-finite loss at step {step + 1} (epoch {epoch}): L_mean={parts.l_mean} "
                    f"L_var={parts.l_var}; try a lower train.lr or train.precision=64")
            loss.backward()
            opt.step()
            step += 1
            history.rows.append((step, epoch, parts.l_mean, parts.l_var, parts.total))
            if tc.max_steps and step >= tc.max_steps:
                break
        log.info("epoch %d step %d L=%.5f (%.1fs)", epoch, step, history.rows[-1][4],
                 time.perf_counter() - t0)
        if out_dir is not None and tc.checkpoint_every and epoch % tc.checkpoint_every == 0:
            checkpoint.save_checkpoint(out_dir / f"checkpoint_e{epoch:04d}.vxdf", model, run)
        if tc.max_steps and step >= tc.max_steps:
            break

    if out_dir is not None:
        checkpoint.save_checkpoint(out_dir / "checkpoint.vxdf", model, run)
        atomic_write_bytes(out_dir / "loss.csv", history.to_csv().encode())
    return model, history
