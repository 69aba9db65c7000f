"""Command-line entry point: ``catkd <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .errors import CatKDError

log = logging.getLogger("catkd")


def _load_cfg(args):
    from .config import load_config

    return load_config(args.config)


def cmd_verify_conversion(args):
    from .experiments import verify_conversion

    report = verify_conversion(args.backbones or None, n_inputs=args.inputs, seed=args.seed)
    ok = True
    print(f"{'backbone':<12} {'max_dev_fp32':>14} {'max_dev_fp64':>14}")
    for name, dev in report.items():
        good = dev["fp32"] <= args.tol and dev["fp64"] <= 1e-10
        ok &= good
        print(f"{name:<12} {dev['fp32']:>14.3e} {dev['fp64']:>14.3e} {'ok' if good else 'FAIL'}")
    worst = max(d["fp32"] for d in report.values())
    print(f"max logit deviation (fp32): {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


def _run(args, method):
    from .experiments import run_single

    cfg = _load_cfg(args)
    res = run_single(cfg, args.seed, args.runs, method=method, reuse=not args.force)
    print(json.dumps({k: v for k, v in res.items()}, indent=2))
    print(f"run directory: {Path(args.runs) / res['config_hash']}")
    return 0


def cmd_train_teacher(args):
    from .experiments import ensure_teacher

    cfg = _load_cfg(args)
    _, acc, trained = ensure_teacher(cfg, args.seed, args.runs)
    print(f"teacher test accuracy: {acc:.2f}% ({'trained' if trained else 'cached'})")
    return 0


def cmd_cat(args):
    return _run(args, "cat")


def cmd_distill(args):
    return _run(args, args.method)


def cmd_probe(args):
    from .data import load
    from .persistence import load_checkpoint
    from .trainer import linear_probe

    cfg = _load_cfg(args)
    if cfg.probe.dataset is None:
        print("error: probe.dataset is not set in the config", file=sys.stderr)
        return 2
    model, _ = load_checkpoint(args.checkpoint)
    test_spec = cfg.probe.test_dataset or replace(cfg.probe.dataset, split="test")
    acc, _, _ = linear_probe(model, load(cfg.probe.dataset), load(test_spec), replace(cfg.probe.schedule, seed=args.seed))
    print(f"linear probe accuracy: {acc:.2f}%")
    return 0


def cmd_ablate(args):
    from .experiments import run_plan
    from .plotting import plot_table_file

    cfg = _load_cfg(args)
    out = Path(args.out or Path(args.runs) / "tables")
    result = run_plan(cfg, args.runs, out, kind=args.kind)
    png = plot_table_file(result.table_path, out)
    print(f"table: {result.table_path}\nfigure: {png}\ntrained runs: {result.trained}, failed: {result.failed}")
    return result.exit_code


def _read_image(path, spec):
    path = Path(path)
    if path.suffix == ".npy":
        x = torch.from_numpy(np.load(path)).float()
    else:
        from PIL import Image

        from .data import _standardize

        img = Image.open(path).convert("RGB").resize(spec.input_shape[1:][::-1])
        x = torch.from_numpy(np.array(img)).permute(2, 0, 1).float() / 255.0
        x = _standardize("cifar100", x[None])[0]
    if tuple(x.shape) != spec.input_shape:
        raise CatKDError(f"image has shape {tuple(x.shape)}, model expects {spec.input_shape}")
    return x


def cmd_plot(args):
    from .plotting import plot_cam_grid, plot_table_file

    if args.cams:
        from .persistence import load_checkpoint

        ckpt, image = args.cams
        model, _ = load_checkpoint(ckpt)
        model.eval().convert()
        x = _read_image(image, model.spec)
        with torch.no_grad():
            logits, cams = model.forward_cams(x[None])
        out = Path(args.out or "cams.png")
        png = plot_cam_grid(x.numpy(), logits[0].numpy(), cams.data[0].numpy(), out, top=args.top)
        print(f"figure: {png}")
        return 0
    if args.table:
        png = plot_table_file(args.table, args.out)
        print(f"figure: {png}")
        return 0
    print("error: plot needs --cams CHECKPOINT IMAGE or --table TABLE", file=sys.stderr)
    return 2


def cmd_report(args):
    from .persistence import read_metrics, read_table
    from .plotting import plot_curves, plot_table_file

    root = Path(args.runs)
    out = Path(args.out or root / "plots")
    n = 0
    for table in sorted(root.rglob("*.tsv")):
        if table.name.endswith(".data.tsv"):
            continue
        try:
            header, rows = read_table(table)
        except (ValueError, StopIteration):
            continue
        schema = header.get("schema")
        if schema == "metrics":
            png = plot_curves(read_metrics(table), out / f"curves-{table.parent.name}.png")
        elif schema and not schema.startswith("figure:"):
            png = plot_table_file(table, out)
            means = [r for r in rows if r.get("seed") == "mean"]
            for r in means:
                metrics = {k: r[k] for k in r if k not in ("cell", "seed", "config_hash", "status") and r[k] is not None}
                print(f"{schema}\t{json.dumps(metrics)}")
        else:
            continue
        n += 1
        print(f"figure: {png}")
    print(f"{n} figure(s) written to {out}")
    return 0


def build_parser():
    from .experiments import PLAN_KINDS

    p = argparse.ArgumentParser(prog="catkd", description="Class attention transfer and CAT-KD toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", "-c", required=True, help="YAML run configuration")
        sp.add_argument("--runs", default="runs", help="root directory for run artifacts")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--force", action="store_true", help="retrain even if a finished run exists")

    sp = sub.add_parser("verify-conversion", help="check dense and converted heads agree on every zoo backbone")
    sp.add_argument("--backbones", nargs="*")
    sp.add_argument("--inputs", type=int, default=100)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_verify_conversion)

    sp = sub.add_parser("train-teacher", help="train (or reuse) the configured teacher")
    common(sp)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("cat", help="pure class attention transfer (no labels)")
    common(sp)
    sp.set_defaults(func=cmd_cat)

    sp = sub.add_parser("distill", help="CAT-KD, logit KD or CE baseline")
    common(sp)
    sp.add_argument("--method", choices=["catkd", "kd", "ce"], default="catkd")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("probe", help="linear probe on a frozen checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("ablate", help="run an experiment plan")
    sp.add_argument("kind", choices=sorted(PLAN_KINDS))
    common(sp)
    sp.add_argument("--out", help="directory for the result table and figure")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plot", help="CAM heatmaps or a table figure")
    sp.add_argument("--cams", nargs=2, metavar=("CHECKPOINT", "IMAGE"))
    sp.add_argument("--table")
    sp.add_argument("--top", type=int, default=4)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("report", help="render figures for every table under a runs directory")
    sp.add_argument("--runs", default="runs")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CatKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
