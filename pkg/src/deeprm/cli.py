"""Command-line entry point: ``deeprm {gen-data,train,eval,refine-demo,plot}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
``DEEPRM_THREADS`` overrides the torch thread count (default 1).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcore as gc

log = logging.getLogger("deeprm")

THREADS_ENV = "DEEPRM_THREADS"


class UsageError(Exception):
    pass


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    try:
        cfg = json.loads(p.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {p}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{p}: top level must be an object")
    return cfg


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    from .datakit import GenConfig, generate_dataset
    raw = _load_config(args.config)
    raw = raw.get("gen", raw)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = GenConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad generation config: {e}") from None
    meta = generate_dataset(cfg, args.out)
    print(f"wrote {args.out}: {meta.splits}")


TRAIN_FLAGS = ("lr", "epochs", "batch_size", "trunk", "phi", "alpha", "seed", "warmup_epochs",
               "train_iterations", "test_iterations")


def resolve_train_config(raw: dict, args):
    from .refine import TrainConfig
    raw = dict(raw.get("train", raw))
    if "noise" in raw and not isinstance(raw["noise"], dict):
        raise UsageError("'noise' must be an object")
    for k in TRAIN_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            raw[k] = v
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training config: {e}") from None


def cmd_train(args):
    from .refine import fit
    cfg = resolve_train_config(_load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"data": str(args.data), "train": cfg.to_dict(), "threads": _threads()})

    def progress(epoch, step, stats):
        if step % 20 == 0:
            log.info("epoch %d step %d dpml %.5f ms_epe %.4f", epoch, step, stats["dpml"], stats["ms_epe"])

    path = fit(args.data, cfg, out, resume=not args.no_resume, progress=progress)
    print(f"model written to {path}.json")


def _load_model(path):
    from .network import DeepRMNet
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    if not p.with_suffix(".json").exists():
        raise FileNotFoundError(f"checkpoint not found: {p.with_suffix('.json')}")
    return DeepRMNet.load(p)


def cmd_eval(args):
    from .refine import NoiseConfig, evaluate
    model = _load_model(args.checkpoint)
    noise = NoiseConfig(seed=args.seed)
    report = evaluate(args.data, model, args.iters, noise=noise)
    out = Path(args.out)
    _write_json(out / "config.json", {"checkpoint": str(args.checkpoint), "data": str(args.data),
                                      "iters": args.iters, "noise": vars(noise), "threads": _threads()})
    _, summary_path, table_path = report.write(out)
    write_iteration_svg(table_path, out / "eval_plot.svg")
    s = report.summary()
    print("iteration  " + "  ".join(f"{r['label']:>7}" for r in s["per_iteration"]))
    for key in ("auc", "add_10pct", "median"):
        print(f"{key:<10} " + "  ".join(f"{r[key]:7.4f}" for r in s["per_iteration"]))


def overlay(observed, rendered, mask, alpha=0.5):
    a = alpha * mask[..., None].astype(np.float64)
    return observed * (1.0 - a) + rendered * a


def cmd_refine_demo(args):
    from .datakit import Dataset
    from .refine import NoiseConfig, object_contexts, refine, sample_init_pose
    from .renderer import rasterize, save_png
    model = _load_model(args.checkpoint)
    ds = Dataset(args.data)
    rec = ds.record(args.split, args.sample)
    objs = object_contexts(ds)
    obj = objs[rec.object]
    img = ds.image(rec)
    init = rec.init or sample_init_pose(rec.gt, NoiseConfig(seed=args.seed),
                                        np.random.default_rng([args.seed, 12, int(rec.sample_id)]))
    traj = refine(img, init, args.iters, model.for_inference(), obj, ds.K)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    from .objectives import add_or_adds
    for k, p in enumerate(traj.poses):
        r = rasterize(obj.mesh, p, ds.K, obj.brightness)
        save_png(out / f"overlay_{k:02d}.png", overlay(img, r.rgb, r.mask))
        rows.append({"iteration": k, "pose": p.to_dict(), "error": add_or_adds(p, rec.gt, obj.model_points)})
    _write_json(out / "trajectory.json", {"sample": rec.sample_id, "object": rec.object, "gt": rec.gt.to_dict(),
                                          "iterations": rows})
    _write_json(out / "config.json", {"checkpoint": str(args.checkpoint), "data": str(args.data),
                                      "split": args.split, "sample": args.sample, "iters": args.iters,
                                      "seed": args.seed})
    print(f"wrote {len(traj.poses)} overlays to {out}; error {rows[0]['error']:.4f} -> {rows[-1]['error']:.4f} m")


def cmd_plot(args):
    write_iteration_svg(args.table, args.out)


# ---------------------------------------------------------------------------
# SVG plot of the per-iteration table

def write_iteration_svg(table_csv, svg_path, metric="auc"):
    """Line plot of one row of an ``eval_iterations.csv`` table; a pure
    function of the CSV contents."""
    with open(table_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    series = {r[0]: [float(v) for v in r[1:]] for r in rows[1:]}
    if metric not in series:
        raise ValueError(f"{table_csv}: no '{metric}' row")
    ys = series[metric]
    W, H, m = 480, 300, 50
    n = max(len(ys) - 1, 1)
    lo, hi = 0.0, max(1.0, max(ys))
    px = [m + (W - 2 * m) * i / n for i in range(len(ys))]
    py = [H - m - (H - 2 * m) * (y - lo) / (hi - lo) for y in ys]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<line x1="{m}" y1="{H - m}" x2="{W - m}" y2="{H - m}" stroke="black"/>',
             f'<line x1="{m}" y1="{m}" x2="{m}" y2="{H - m}" stroke="black"/>',
             f'<text x="{W / 2:.1f}" y="{m / 2:.1f}" text-anchor="middle" font-size="14">'
             f'{metric} vs refinement iteration</text>']
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = lo + t * (hi - lo)
        y = H - m - (H - 2 * m) * t
        parts.append(f'<text x="{m - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{v:.2f}</text>')
    for x, lab in zip(px, labels):
        parts.append(f'<text x="{x:.1f}" y="{H - m + 16}" text-anchor="middle" font-size="10">{lab}</text>')
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f5fbf" stroke-width="2"/>')
    for x, y, v in zip(px, py, ys):
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="#1f5fbf"><title>{v!r}</title></circle>')
    parts.append("</svg>")
    Path(svg_path).parent.mkdir(parents=True, exist_ok=True)
    Path(svg_path).write_text("\n".join(parts) + "\n")
    return Path(svg_path)


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="deeprm", description="Recurrent render-and-compare 6D pose refinement.",
                                epilog=f"Environment: {THREADS_ENV}=N sets the torch thread count (default 1).")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="JSON generation config (keys of GenConfig, optionally under 'gen')")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, help="override the generator seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a refiner")
    t.add_argument("--config", help="JSON training config (keys of TrainConfig, optionally under 'train')")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    t.add_argument("--trunk", choices=("lstm", "gru", "mlp"))
    t.add_argument("--alpha", type=float, help="flow loss weight; 0 disables the flow head loss")
    t.add_argument("--phi", type=int, choices=(0, 1, 2, 3))
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--train-iterations", type=int)
    t.add_argument("--test-iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints in --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True, help="model checkpoint stem or .json manifest")
    e.add_argument("--data", required=True)
    e.add_argument("--iters", type=int, default=12, help="refinement iterations (default 12)")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0, help="init-noise seed for samples without stored inits")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("refine-demo", help="write per-iteration overlays for one sample")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--sample", required=True, help="sample id, e.g. 000007")
    d.add_argument("--split", default="test")
    d.add_argument("--iters", type=int, default=12)
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_refine_demo)

    pl = sub.add_parser("plot", help="render an eval_iterations.csv table as SVG")
    pl.add_argument("--table", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for k in ("iters",):
        if getattr(args, k, 0) is not None and getattr(args, k, 0) < 0:
            parser.error(f"--{k} must be >= 0")
    try:
        threads = _threads()
        with gc.strict_deterministic(threads):
            args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"deeprm: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError, KeyError) as e:
        print(f"deeprm: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
