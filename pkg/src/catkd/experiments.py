"""Single runs, experiment plans and the conversion check.

A single run is identified by the hash of its resolved configuration, the
method and the seed, and lives in ``<runs_root>/<hash>/``.  Plans expand a
grid of dotted-key overrides over a base configuration; completed runs are
found by hash and reused, so rerunning a finished plan trains nothing.
"""

from __future__ import annotations

import json
import logging
import statistics
import traceback
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import torch

from .backbones import ZOO
from .cam import logits_converted
from .config import RunConfig
from .data import DatasetSpec, load, reduce_classes
from .errors import CatKDError, ConfigError
from .heads import HeadParams, logits_dense
from .models import build_model
from .persistence import (
    RunManifest,
    config_hash,
    load_checkpoint,
    save_checkpoint,
    write_table,
)
from .trainer import (
    evaluate,
    linear_probe,
    train_cat,
    train_catkd,
    train_ce,
    train_kd,
)

log = logging.getLogger(__name__)

# kind -> (fixed method or None when the grid supplies it, swept key, metric columns)
PLAN_KINDS = {
    "producer-strength": ("cat", "teacher.schedule.epochs", ["acc"]),
    "pool-size-sweep": ("cat", "transform.pool", ["acc"]),
    "binarize-transfer": ("cat", "transform.binarize", ["acc"]),
    "category-subset": ("cat", "transform.subset", ["acc"]),
    "reduced-class": ("cat", "reduce_classes", ["acc_T", "acc_S"]),
    "beta-sweep": ("catkd", "distill.beta", ["acc"]),
    "normalization-ablation": ("catkd", "distill.normalize_rule", ["acc"]),
    "data-ratio": (None, "dataset.ratio", ["acc"]),
    "transferability": (None, "method", ["acc", "probe_acc"]),
    "efficiency-report": (None, "method", ["sec_per_epoch", "acc"]),
}
BASE_COLUMNS = ["cell", "param", "method", "seed", "config_hash", "status", "producer_acc"]


def table_columns(kind: str):
    return BASE_COLUMNS + PLAN_KINDS[kind][2]


@dataclass
class PlanResult:
    rows: list
    table_path: Optional[Path]
    trained: int = 0
    failed: int = 0

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------

def eval_sets(cfg: RunConfig, train_spec: DatasetSpec):
    """``test`` is always the full test split; ``test_S`` holds categories absent from training."""
    test_spec = replace(train_spec, split="test", ratio=1.0, class_subset=None, per_class=cfg.test_per_class,
                        augmentation="none")
    sets = {"test": load(test_spec)}
    if train_spec.class_subset is not None:
        missing = sorted(set(range(train_spec.classes)) - set(train_spec.class_subset))
        if missing:
            sets["test_S"] = load(replace(test_spec, class_subset=tuple(missing)))
    return sets


def _teacher_key(cfg: RunConfig, seed: int):
    data = replace(cfg.dataset, ratio=1.0, class_subset=None)
    return {
        "teacher": cfg.teacher.to_dict(),
        "dataset": data.to_dict(),
        "test_per_class": cfg.test_per_class,
        "bias": cfg.bias,
        "seed": seed,
    }


def ensure_teacher(cfg: RunConfig, seed: int, runs_root):
    """Load the configured teacher checkpoint, or train one (cached by configuration hash).

    Returns ``(model, test accuracy, trained_now)``.
    """
    if cfg.teacher.checkpoint:
        model, payload = load_checkpoint(cfg.teacher.checkpoint)
        acc = payload.get("extra", {}).get("test_acc")
        if acc is None:
            acc = evaluate(model, eval_sets(cfg, cfg.dataset)["test"])[0]
        return model, acc, False
    key = _teacher_key(cfg, seed)
    run_dir = Path(runs_root) / "teachers" / config_hash(key)
    ckpt = run_dir / "teacher.pt"
    if ckpt.exists():
        model, payload = load_checkpoint(ckpt)
        return model, payload["extra"]["test_acc"], False
    spec = replace(cfg.dataset, ratio=1.0, class_subset=None)
    train = load(spec)
    sets = eval_sets(cfg, spec)
    manifest = RunManifest.start(run_dir, key, [seed], notes={"role": "teacher"})
    model = build_model(cfg.teacher.backbone, train.num_classes, cfg.bias, seed=seed)
    schedule = replace(cfg.teacher.schedule, seed=seed)
    train_ce(model, train, schedule, sets, run_id=f"teacher-{manifest.config_hash}", run_dir=run_dir,
             augmentation=spec.augmentation)
    acc = evaluate(model, sets["test"])[0]
    save_checkpoint(ckpt, model, schedule, manifest.config_hash, {"test_acc": acc})
    for name in ("teacher.pt", "metrics.tsv", "last.pt", "best.pt"):
        if (run_dir / name).exists():
            manifest.add_artifact(name.split(".")[0], run_dir / name)
    manifest.finalize()
    return model, acc, True


def run_key(cfg: RunConfig, seed: int) -> dict:
    return {"config": cfg.to_dict(), "seed": seed}


def run_single(cfg: RunConfig, seed: int, runs_root, method: Optional[str] = None, reuse: bool = True):
    """Train one student (or CE baseline) and return its result record.

    The record holds ``acc`` (full test set), ``acc_S`` when categories were
    held out, ``producer_acc``, ``sec_per_epoch``, ``probe_acc`` when a probe
    dataset is configured, and ``trained`` telling whether any training ran.
    """
    method = method or cfg.method
    cfg = replace(cfg, method=method)
    key = run_key(cfg, seed)
    h = config_hash(key)
    run_dir = Path(runs_root) / h
    result_path = run_dir / "result.json"
    if reuse and result_path.exists():
        result = json.loads(result_path.read_text())
        result["trained"] = False
        return result

    notes = {}
    if cfg.dataset.ratio < 1:
        notes["ratio_order"] = "first floor(ratio * count) samples of each class in original file order"
    if cfg.dataset.class_subset is not None:
        notes["class_subset"] = list(cfg.dataset.class_subset)
    manifest = RunManifest.start(run_dir, key, [seed], notes=notes)
    train = load(cfg.dataset)
    sets = eval_sets(cfg, cfg.dataset)
    schedule = replace(cfg.schedule, seed=seed)
    student = build_model(cfg.student, cfg.dataset.classes, cfg.bias, seed=seed)
    teacher, producer_acc, teacher_trained = (None, None, False)
    distill = cfg.distill
    kwargs = dict(eval_sets=sets, run_id=h, run_dir=run_dir, augmentation=cfg.dataset.augmentation)
    if method != "ce":
        teacher, producer_acc, teacher_trained = ensure_teacher(cfg, seed, runs_root)
        distill = distill.resolve(cfg.teacher.backbone.family, cfg.student.family)
        manifest.notes["resolved_normalize_rule"] = distill.normalize_rule
        manifest.write()
    if method == "ce":
        student, records = train_ce(student, train, schedule, **kwargs)
    elif method == "kd":
        student, records = train_kd(teacher, student, train, schedule, distill, **kwargs)
    elif method == "cat":
        student, records = train_cat(teacher, student, train, schedule, distill,
                                     cache_teacher=cfg.cache_teacher, **kwargs)
    else:
        student, records = train_catkd(teacher, student, train, schedule, distill,
                                       cache_teacher=cfg.cache_teacher, **kwargs)

    train_records = [r for r in records if r.split == "train"]
    result = {
        "config_hash": h,
        "method": method,
        "seed": seed,
        "producer_acc": producer_acc,
        "acc": evaluate(student, sets["test"])[0],
        "acc_S": evaluate(student, sets["test_S"])[0] if "test_S" in sets else None,
        "sec_per_epoch": (sum(r.wall_clock for r in train_records) / len(train_records)) if train_records else None,
        "probe_acc": None,
        "normalize_rule": distill.normalize_rule,
    }
    if cfg.probe.dataset is not None:
        probe_test = cfg.probe.test_dataset or replace(cfg.probe.dataset, split="test")
        result["probe_acc"], _, _ = linear_probe(student, load(cfg.probe.dataset), load(probe_test),
                                                 replace(cfg.probe.schedule, seed=seed))
    for name in ("metrics.tsv", "last.pt", "best.pt"):
        if (run_dir / name).exists():
            manifest.add_artifact(name.split(".")[0], run_dir / name)
    manifest.add_artifact("result", result_path)
    from .persistence import atomic_write_text

    atomic_write_text(result_path, json.dumps(result, indent=2))
    manifest.finalize()
    result["trained"] = True
    result["teacher_trained"] = teacher_trained
    return result


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------

def _cell_config(base: RunConfig, override: dict):
    override = dict(override)
    n = override.pop("reduce_classes", None)
    cfg = base.with_overrides(override) if override else base
    if n is not None:
        cfg = replace(cfg, dataset=reduce_classes(cfg.dataset, int(n)))
    return cfg


def _param_value(kind, override, cfg):
    key = PLAN_KINDS[kind][1]
    if key in override:
        v = override[key]
    elif key == "method":
        v = cfg.method
    else:
        v = override.get(key)
    return json.dumps(v) if isinstance(v, (list, dict)) else v


def aggregate_rows(rows, kind):
    """Mean and (population) standard deviation per cell over its completed seeds."""
    out = []
    metrics = ["producer_acc"] + PLAN_KINDS[kind][2]
    cells = []
    for r in rows:
        if r["cell"] not in cells:
            cells.append(r["cell"])
    for cell in cells:
        done = [r for r in rows if r["cell"] == cell and r["status"] == "completed"]
        if not done:
            continue
        first = done[0]
        for stat in ("mean", "std"):
            agg = {"cell": cell, "param": first["param"], "method": first["method"], "seed": stat,
                   "config_hash": first["config_hash"], "status": "aggregate"}
            for m in metrics:
                vals = [r[m] for r in done if r.get(m) is not None]
                if not vals:
                    agg[m] = None
                elif stat == "mean":
                    agg[m] = statistics.fmean(vals)
                else:
                    agg[m] = statistics.pstdev(vals)
            out.append(agg)
    return out


def run_plan(base: RunConfig, runs_root, out_dir=None, kind: Optional[str] = None, grid=None, seeds=None):
    """Execute every (grid cell, seed) pair and write ``<out_dir>/<kind>.tsv``.

    Failed cells are recorded with status ``failed`` and do not stop the plan.
    """
    kind = kind or base.plan.kind
    if kind not in PLAN_KINDS:
        raise ConfigError(f"plan.kind: expected one of {sorted(PLAN_KINDS)}, got {kind!r}")
    grid = list(base.plan.grid if grid is None else grid)
    seeds = list(base.plan.seeds if seeds is None else seeds)
    fixed_method = PLAN_KINDS[kind][0]
    rows, trained, failed = [], 0, 0
    for i, override in enumerate(grid):
        override = dict(override)
        try:
            cfg = _cell_config(base, override)
            if fixed_method:
                cfg = replace(cfg, method=fixed_method)
        except CatKDError as exc:
            for seed in seeds:
                rows.append({"cell": i, "param": None, "method": None, "seed": seed, "config_hash": None,
                             "status": f"failed: {exc}"[:200]})
                failed += 1
            continue
        for seed in seeds:
            row = {"cell": i, "param": _param_value(kind, override, cfg), "method": cfg.method, "seed": seed,
                   "config_hash": config_hash(run_key(cfg, seed))}
            try:
                res = run_single(cfg, seed, runs_root)
            except Exception as exc:  # a failing cell must not abort the plan
                log.error("cell %d seed %d failed: %s", i, seed, traceback.format_exc())
                row["status"] = f"failed: {type(exc).__name__}: {exc}"[:200]
                failed += 1
                rows.append(row)
                continue
            trained += int(res["trained"]) + int(res.get("teacher_trained", False))
            row["status"] = "completed"
            row["producer_acc"] = res.get("producer_acc")
            row["acc"] = res["acc"]
            row["acc_T"] = res["acc"]
            row["acc_S"] = res.get("acc_S")
            row["probe_acc"] = res.get("probe_acc")
            row["sec_per_epoch"] = res.get("sec_per_epoch")
            rows.append(row)
    rows = rows + aggregate_rows(rows, kind)
    table_path = None
    if out_dir is not None:
        table_path = Path(out_dir) / f"{kind}.tsv"
        write_table(table_path, table_columns(kind), rows, kind)
    return PlanResult(rows, table_path, trained, failed)


def efficiency_report(base: RunConfig, runs_root, methods=("ce", "kd", "catkd"), seeds=(0,), out_dir=None):
    """Per-epoch wall clock and final accuracy for each method on identical hardware."""
    grid = [{"method": m} for m in methods]
    return run_plan(base, runs_root, out_dir, kind="efficiency-report", grid=grid, seeds=seeds)


# ---------------------------------------------------------------------------
# conversion check
# ---------------------------------------------------------------------------

def verify_conversion(names=None, n_inputs: int = 100, seed: int = 0, num_classes: int = 10):
    """Max |dense - converted| logit deviation for each zoo backbone, in 32 and 64 bit.

    Random backbone weights, random head (with and without bias), random
    inputs; features are taken in eval mode.
    """
    names = list(ZOO) if names is None else names
    g = torch.Generator().manual_seed(seed)
    report = {}
    for name in names:
        spec = ZOO[name]
        model = build_model(spec, num_classes, seed=seed).eval()
        x = torch.randn(n_inputs, *spec.input_shape, generator=g)
        with torch.no_grad():
            feats = torch.cat([model.features(x[i : i + 25]) for i in range(0, n_inputs, 25)])
        worst = {}
        for dtype in (torch.float32, torch.float64):
            dev = 0.0
            f = feats.to(dtype)
            for with_bias in (False, True):
                w = torch.randn(num_classes, f.shape[1], generator=g, dtype=dtype) / f.shape[1] ** 0.5
                b = torch.randn(num_classes, generator=g, dtype=dtype) if with_bias else None
                head = HeadParams(w, b)
                dev = max(dev, float((logits_dense(f, head) - logits_converted(f, head)).abs().max()))
            worst["fp32" if dtype is torch.float32 else "fp64"] = dev
        report[name] = worst
    return report
