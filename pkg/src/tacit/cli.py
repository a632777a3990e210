"""``tacit`` command line: dataset generation, training, sampling and analysis.

Every command writes ``run.json`` (the parsed invocation plus resolved seed)
next to its outputs. Failures print one ``error: <category>: <message>`` line
to stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from tacit import __version__
from tacit import analysis
from tacit.autodiff import NonDeterministicError, TapeError
from tacit.dataset import DatasetError, generate_dataset, heldout_pairs
from tacit.flow import (
    CheckpointError,
    ConfigMismatchError,
    TrainConfig,
    TrainingDivergedError,
    heldout_l2,
    load_model,
    train,
)
from tacit.imageio import read_ppm, tile_grid, to_float, to_u8, write_ppm
from tacit.maze import MazeError
from tacit.model import PRESETS, ConfigError
from tacit.sampler import euler_sample, export_trajectory

log = logging.getLogger("tacit")

PRESET_TRAIN = {
    "paper": dict(batch_size=256, epochs=100, sizes=(11, 15, 21, 25, 31)),
    "desk": dict(batch_size=32, epochs=20, sizes=(11,)),
}

_ERROR_CATEGORIES = [
    (ConfigMismatchError, "config-mismatch"),
    (CheckpointError, "checkpoint"),
    (DatasetError, "dataset"),
    (MazeError, "maze"),
    (ConfigError, "config"),
    (TrainingDivergedError, "diverged"),
    (NonDeterministicError, "nondeterministic"),
    (TapeError, "autodiff"),
    (OSError, "io"),
    (ValueError, "invalid-argument"),
]


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("TACIT_SEED")
    return int(env) if env else 0


def write_run_config(out_dir: Path, args: argparse.Namespace, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"version": __version__, "command": args.command_path}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "command_path"):
            continue
        record[k] = list(v) if isinstance(v, tuple) else v
    record.update(extra)
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _default_sizes(resolution: int) -> tuple[int, ...]:
    return PRESET_TRAIN["paper"]["sizes"] if resolution >= 64 else PRESET_TRAIN["desk"]["sizes"]


def _eval_samples(args, model):
    sizes = args.sizes or _default_sizes(model.config.resolution)
    return heldout_pairs(args.n, sizes, model.config.resolution)


# --- commands ----------------------------------------------------------------------


def cmd_generate(args) -> int:
    seed = resolve_seed(args.seed)
    res = args.resolution or PRESETS[args.preset].resolution
    sizes = args.sizes or PRESET_TRAIN[args.preset]["sizes"]
    out = Path(args.out)
    paths = generate_dataset(out, args.count, sizes, seed, res, args.shard_size)
    write_run_config(out, args, seed=seed, resolution=res, sizes=list(sizes), shards=[p.name for p in paths])
    print(f"wrote {args.count} pairs to {len(paths)} shard(s) in {out}")
    return 0


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    preset = PRESET_TRAIN[args.preset]
    cfg = TrainConfig(
        data_dir=args.data,
        out_dir=args.out,
        model=PRESETS[args.preset],
        lr=args.lr,
        batch_size=args.batch_size or preset["batch_size"],
        epochs=args.epochs or preset["epochs"],
        checkpoint_interval=args.checkpoint_interval,
        seed=seed,
        heldout_count=args.heldout_count,
        heldout_sizes=args.sizes or preset["sizes"],
        workers=args.workers,
    )
    write_run_config(Path(args.out), args, seed=seed, train_config=cfg.to_dict())
    losslog = train(cfg, resume=args.resume)
    last = losslog.rows[-1] if losslog.rows else None
    print(f"trained to epoch {last[0] if last else 0}; log in {Path(args.out) / 'loss_log.csv'}")
    return 0


def cmd_sample(args) -> int:
    model = load_model(args.ckpt)
    x0 = to_float(read_ppm(args.input))
    expected = (3, model.config.resolution, model.config.resolution)
    out, traj = euler_sample(
        x0, model, args.steps, record=args.record is not None, clip_each_step=args.clip_each_step, expected_shape=expected
    )
    out_path = Path(args.out) if args.out else None
    if out_path:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(out_path, to_u8(out))
    if traj is not None:
        export_trajectory(traj, args.record)
    run_dir = Path(args.record) if args.record else (out_path.parent if out_path else Path("."))
    write_run_config(run_dir, args)
    return 0


def cmd_emergence(args) -> int:
    model = load_model(args.ckpt)
    samples = _eval_samples(args, model)
    curves, report = analysis.emergence_report(model, samples, args.steps)
    out = Path(args.out)
    write_run_config(out, args)
    analysis.write_emergence_csv(curves, out / "emergence.csv")
    report.write_csv(out / "transition.csv")
    summary = {k: v for k, v in report.summary().items()}
    summary["never_emerged"] = report.never_emerged
    (out / "transition_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return 0


def cmd_segments(args) -> int:
    model = load_model(args.ckpt)
    samples = _eval_samples(args, model)
    report = analysis.segment_report(model, samples, args.steps)
    out = Path(args.out)
    write_run_config(out, args)
    report.write_csv(out / "segments.csv")
    print(json.dumps({"fraction_simultaneous": report.fraction_simultaneous, "samples": len(report.entries)}))
    return 0


def cmd_sweep(args) -> int:
    model = load_model(args.ckpt)
    samples = _eval_samples(args, model)
    x0 = to_float(np.stack([s.input for s in samples]))
    x1 = to_float(np.stack([s.target for s in samples]))
    rows = analysis.steps_sweep(model, x0, x1, args.step_counts)
    out = Path(args.out)
    write_run_config(out, args)
    analysis.write_sweep_csv(rows, out / "sweep.csv")
    for r in rows:
        print(f"N={r.steps:4d}  iou={r.iou:.4f}  psnr={analysis.capped(r.psnr):.2f}")
    return 0


def cmd_eval_l2(args) -> int:
    model = load_model(args.ckpt)
    samples = _eval_samples(args, model)
    value = heldout_l2(model, samples, args.steps)
    if args.out:
        out = Path(args.out)
        write_run_config(out, args, heldout_l2=value)
    print(json.dumps({"heldout_l2": value, "samples": len(samples), "steps": args.steps}))
    return 0


def cmd_plot_grid(args) -> int:
    """One row per sample, one column per recorded Euler state."""
    model = load_model(args.ckpt)
    samples = _eval_samples(args, model)
    x0 = to_float(np.stack([s.input for s in samples]))
    _, traj = euler_sample(x0, model, args.steps, record=True)
    rows = [[to_u8(state[b]) for state in traj.states] + [samples[b].target] for b in range(len(samples))]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, tile_grid(rows))
    write_run_config(out.parent, args)
    return 0


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tacit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(parent, name, func, help_):
        sp = parent.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    def eval_flags(sp, steps):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--n", type=int, default=20, help="number of held-out mazes")
        sp.add_argument("--steps", type=int, default=steps)
        sp.add_argument("--sizes", type=_ints, default=None)

    g = add(sub, "generate", cmd_generate, "generate maze/solution shards")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--sizes", type=_ints, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--resolution", type=int, default=None)
    g.add_argument("--shard-size", type=int, default=10_000)
    g.add_argument("--preset", choices=sorted(PRESETS), default="paper")

    t = add(sub, "train", cmd_train, "train the flow model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--checkpoint-interval", type=int, default=5)
    t.add_argument("--heldout-count", type=int, default=256)
    t.add_argument("--sizes", type=_ints, default=None, help="held-out maze sizes")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.add_argument("--workers", type=int, default=1)

    s = add(sub, "sample", cmd_sample, "Euler-sample one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--record", default=None, help="directory for the trajectory")
    s.add_argument("--out", default=None, help="output PPM")
    s.add_argument("--clip-each-step", action="store_true")

    a = sub.add_parser("analyze", help="trajectory analyses").add_subparsers(dest="analysis", required=True)
    e = add(a, "emergence", cmd_emergence, "recall curves and phase transition")
    eval_flags(e, 50)
    e.add_argument("--out", default="emergence")
    sg = add(a, "segments", cmd_segments, "start/middle/end simultaneity")
    eval_flags(sg, 50)
    sg.add_argument("--out", default="segments")
    sw = add(a, "sweep", cmd_sweep, "quality vs Euler step count")
    eval_flags(sw, 10)
    sw.add_argument("--step-counts", type=_ints, default=analysis.DEFAULT_SWEEP)
    sw.add_argument("--out", default="sweep")

    ev = sub.add_parser("eval", help="evaluation").add_subparsers(dest="evaluation", required=True)
    l2 = add(ev, "l2", cmd_eval_l2, "held-out L2 distance")
    eval_flags(l2, 10)
    l2.add_argument("--out", default=None)

    pl = sub.add_parser("plot", help="image grids").add_subparsers(dest="plot", required=True)
    gr = add(pl, "grid", cmd_plot_grid, "trajectory grid as PPM")
    eval_flags(gr, 10)
    gr.set_defaults(n=8)
    gr.add_argument("--out", default="grid.ppm")
    return p


def _category(exc: BaseException) -> str:
    for cls, name in _ERROR_CATEGORIES:
        if isinstance(exc, cls):
            return name
    return "internal"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.command_path = " ".join(
        x for x in (args.command, getattr(args, "analysis", None), getattr(args, "evaluation", None), getattr(args, "plot", None)) if x
    )
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as one machine-readable line
        print(f"error: {_category(exc)}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
