"""Command-line entry points: phantom, train, generate, evaluate.

Failures print a single line ``error: <ErrorClass>: <message>`` to stderr and
exit with status 1.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from . import config as C
from .inference import sliding_window_infer
from .metrics import MetricsReport, evaluate_pair
from .schedule import build_schedule, resample
from .train import cast_model, train
from .volume import (PhantomSpec, Volume, ct_to_unit, load_volume, mr_to_unit,
                     parse_phantom_spec, save_volume, synthesize_pair, atomic_write_bytes)

log = logging.getLogger("swindiff")

SPLIT = (20, 2, 6)     # train / val / test proportions


class UsageError(ValueError):
    pass


class UnmatchedFilesError(ValueError):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def run_config(args) -> C.RunConfig:
    pairs = []
    if getattr(args, "config", None):
        pairs += C.parse_pairs(Path(args.config).read_text())
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise C.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    if getattr(args, "seed", None) is not None:
        pairs.append(("seed", str(args.seed)))
    return C.resolve(pairs)


def write_config(path: Path, run: C.RunConfig) -> None:
    atomic_write_bytes(path, C.dumps(run).encode())


def split_counts(count: int) -> tuple[int, int, int]:
    total = sum(SPLIT)
    test = round(count * SPLIT[2] / total)
    val = round(count * SPLIT[1] / total)
    return count - val - test, val, test


def read_manifest(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in ("mr", "ct"):
            r[key] = str((path.parent / r[key]).resolve())
    return rows


def mr_input(vol: Volume) -> np.ndarray:
    v = vol.values.astype(np.float64)
    return v if vol.space == "normalized" else mr_to_unit(v)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_phantom(args) -> None:
    spec = parse_phantom_spec(Path(args.spec).read_text()) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = split_counts(args.count)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "split", "mr", "ct"])
    for i in range(args.count):
        name = f"case_{i:03d}"
        mr, ct = synthesize_pair(replace(spec, seed=spec.seed + i))
        save_volume(out / f"{name}_mr.vxvol", mr)
        save_volume(out / f"{name}_ct.vxvol", ct)
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        w.writerow([name, split, f"{name}_mr.vxvol", f"{name}_ct.vxvol"])
    atomic_write_bytes(out / "manifest.csv", buf.getvalue().encode())
    lines = [f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}"
             for k, v in vars(spec).items()]
    atomic_write_bytes(out / "phantom_spec.txt", ("\n".join(lines) + "\n").encode())
    log.info("wrote %d phantom pairs to %s", args.count, out)


def cmd_train(args) -> None:
    run = run_config(args)
    rows = [r for r in read_manifest(Path(args.manifest)) if r["split"] == "train"]
    if not rows:
        raise UsageError(f"manifest {args.manifest} lists no training pairs")
    pairs = [(mr_input(load_volume(r["mr"])), ct_to_unit(load_volume(r["ct"]).values.astype(np.float64)))
             for r in rows]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", run)
    t0 = time.perf_counter()
    _, history = train(run, pairs, out)
    log.info("trained %d steps in %.1fs; checkpoint at %s", len(history.rows),
             time.perf_counter() - t0, out / "checkpoint.vxdf")


def cmd_generate(args) -> None:
    model, run = checkpoint.load_checkpoint(args.checkpoint)
    pairs = []
    for item in args.set or []:
        k, _, v = item.partition("=")
        k = k.strip()
        if k.split(".")[0] in ("model", "profile") or k in ("schedule.steps", "schedule.slope"):
            raise C.ConfigError(f"{k} is fixed by the checkpoint and cannot be overridden")
        pairs.append((k, v.strip()))
    for k, v in pairs:
        run = C.set_key(run, k, v)
    if args.runs is not None:
        run = C.set_key(run, "sampling.runs", str(args.runs))
    seed = run.seed if args.seed is None else args.seed
    run = replace(run, seed=seed)

    mr = load_volume(args.mr)
    patch = run.data.patch
    if any(p > s for p, s in zip(patch, mr.extents)):
        raise UsageError(f"volume extents {mr.extents} smaller than patch {patch}")
    model.check_extents(patch)
    cast_model(model, run.sampling.precision)

    resampled = resample(build_schedule(run.schedule.steps, run.schedule.slope), run.schedule.resampled)
    t0 = time.perf_counter()
    hu = sliding_window_infer(mr_input(mr), model, patch, resampled, runs=run.sampling.runs,
                              seed=seed, overlap=run.data.overlap, batch=run.sampling.batch)
    log.info("generated %s in %.2fs", mr.extents, time.perf_counter() - t0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(out, Volume(hu, mr.spacing, "HU"))
    write_config(out.with_name(out.name + ".config.txt"), run)


def _volumes(d: Path) -> dict:
    return {p.name: p for p in sorted(d.glob("*.vxvol"))}


def cmd_evaluate(args) -> None:
    truth = _volumes(Path(args.truth))
    methods = [("pred", Path(args.pred))]
    if args.compare:
        methods.append(("compare", Path(args.compare)))
    report = MetricsReport()
    for label, d in methods:
        preds = _volumes(d)
        missing = sorted(set(preds) ^ set(truth))
        if missing:
            raise UnmatchedFilesError(f"unmatched files between {d} and {args.truth}: "
                                      + ", ".join(missing))
        for name, path in preds.items():
            values = evaluate_pair(load_volume(path).values, load_volume(truth[name]).values)
            report.add(name, label, values)
    if args.compare:
        report.compare("pred", "compare")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for path in report.write(out):
        log.info("wrote %s", path)


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="swindiff", description=__doc__.splitlines()[0])
    shared = _Parser(add_help=False)
    shared.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[shared], help="write synthetic MR/CT phantom pairs")
    p.add_argument("--spec", help="phantom spec file (key=value)")
    p.add_argument("--count", type=int, default=1)
    _common(p, config=False)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", parents=[shared], help="train a model from a phantom manifest")
    p.add_argument("--manifest", required=True)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[shared], help="synthesize CT from an MR volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mr", required=True)
    p.add_argument("--runs", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[shared], help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--compare", help="second prediction dir for paired t-tests")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - one-line contract for every failure
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
