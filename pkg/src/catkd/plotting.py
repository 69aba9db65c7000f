"""Figures for CAMs, training curves and ablation tables.

Every figure is written as ``<name>.png`` next to a ``<name>.data.tsv``
sidecar holding exactly the plotted values, so charts can be audited
against their source tables.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import PlotError  # noqa: E402
from .persistence import write_table  # noqa: E402

golden_mean = (math.sqrt(5) - 1.0) / 2.0
fig_width = 5.0
colors = ["#08589e", "#d95f0e", "#2b8cbe", "#7bccc4", "#a8ddb5", "#636363"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "lines.markersize": 4,
    "lines.linewidth": 1.2,
    "image.cmap": "jet",
}

# kind -> (x column, y columns, series column or None)
FIGURE_SCHEMA = {
    "producer-strength": ("producer_acc", ["acc"], None),
    "pool-size-sweep": ("param", ["acc"], None),
    "binarize-transfer": ("param", ["acc"], None),
    "category-subset": ("param", ["acc"], None),
    "reduced-class": ("param", ["acc_T", "acc_S"], None),
    "beta-sweep": ("param", ["acc"], None),
    "normalization-ablation": ("param", ["acc"], None),
    "data-ratio": ("param", ["acc"], "method"),
    "transferability": ("param", ["acc", "probe_acc"], None),
    "efficiency-report": ("param", ["sec_per_epoch", "acc"], None),
}

_LABELS = {
    "acc": "top-1 accuracy (%)",
    "acc_T": "T: full test set",
    "acc_S": "S: held-out classes",
    "probe_acc": "linear probe accuracy (%)",
    "sec_per_epoch": "seconds / epoch",
    "producer_acc": "CAM producer accuracy (%)",
}


def new_figure(width=fig_width, height=None):
    plt.rcParams.update(params)
    return plt.figure(figsize=(width, height or width * golden_mean))


def _save(fig, out_dir, name, columns, rows):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = out_dir / f"{name}.png"
    fig.savefig(png, bbox_inches="tight")
    plt.close(fig)
    write_table(out_dir / f"{name}.data.tsv", columns, rows, f"figure:{name}")
    return png


def _summary_rows(rows):
    """Prefer the aggregate ``mean`` rows; fall back to raw completed rows."""
    means = [r for r in rows if r.get("seed") == "mean"]
    if means:
        return means
    return [r for r in rows if r.get("status") in (None, "completed")]


def _xkey(v):
    if isinstance(v, (int, float)):
        return (0, v, "")
    return (1, 0, str(v))


def plot_table(kind: str, header: dict, rows, out_dir):
    """Render the ablation chart for a plan table; returns the PNG path."""
    if kind not in FIGURE_SCHEMA:
        raise PlotError(f"no figure defined for table kind {kind!r}")
    x_col, y_cols, series_col = FIGURE_SCHEMA[kind]
    columns = header.get("columns", [])
    if header.get("schema") not in (None, kind):
        raise PlotError(f"table schema {header.get('schema')!r} does not match kind {kind!r}")
    needed = [x_col, *y_cols] + ([series_col] if series_col else [])
    missing = [c for c in needed if c not in columns]
    if missing:
        raise PlotError(f"{kind} table lacks columns {missing}")

    data = _summary_rows(rows)
    fig = new_figure()
    axes = [fig.gca()]
    if kind == "efficiency-report":
        axes.append(axes[0].twinx())
    plotted = []
    if series_col:
        groups = {}
        for r in data:
            groups.setdefault(r[series_col], []).append(r)
    else:
        groups = {None: data}
    numeric_x = all(isinstance(r.get(x_col), (int, float)) for r in data)
    labels = sorted({r.get(x_col) for r in data}, key=_xkey) if data else []
    for gi, (name, grp) in enumerate(groups.items()):
        grp = sorted(grp, key=lambda r: _xkey(r.get(x_col)))
        for yi, y in enumerate(y_cols):
            ax = axes[min(yi, len(axes) - 1)]
            xs = [r.get(x_col) for r in grp if r.get(y) is not None]
            ys = [r.get(y) for r in grp if r.get(y) is not None]
            pos = xs if numeric_x else [labels.index(v) for v in xs]
            label = _LABELS.get(y, y) if name is None else f"{name}"
            if kind == "efficiency-report":
                width = 0.35
                off = (-width / 2, width / 2)[yi]
                ax.bar(np.asarray(pos, dtype=float) + off, ys, width, label=_LABELS.get(y, y),
                       color=colors[yi % len(colors)])
                ax.set_ylabel(_LABELS.get(y, y))
            else:
                ax.plot(pos, ys, marker="o", label=label)
            for xv, yv in zip(xs, ys):
                plotted.append({"series": name if name is not None else y, "x": xv, "y": yv, "metric": y})
    if not numeric_x and labels:
        axes[0].set_xticks(range(len(labels)))
        axes[0].set_xticklabels([str(v) for v in labels], rotation=20)
    axes[0].set_xlabel(x_col if x_col != "param" else kind.replace("-", " "))
    if kind != "efficiency-report":
        axes[0].set_ylabel(_LABELS.get(y_cols[0], y_cols[0]) if len(y_cols) == 1 else "accuracy (%)")
    if plotted and (series_col or len(y_cols) > 1):
        handles, labs = [], []
        for ax in axes:
            h, l = ax.get_legend_handles_labels()
            handles += h
            labs += l
        axes[0].legend(handles, labs)
    axes[0].set_title(kind)
    return _save(fig, out_dir, kind, ["series", "metric", "x", "y"], plotted)


def plot_table_file(path, out_dir=None):
    header, rows = read_plan_table(path)
    kind = header.get("schema")
    return plot_table(kind, header, rows, out_dir or Path(path).parent)


def read_plan_table(path):
    from .persistence import read_table

    return read_table(path)


def plot_cam_grid(image, logits, cams, out_path, top: int = 4, class_names=None):
    """Input image plus the CAMs of the ``top`` highest-scoring categories, upsampled over it.

    ``image`` is ``3 x H x W`` (any range), ``logits`` length ``K``, ``cams`` ``K x h x w``.
    """
    image = np.asarray(image, dtype=float)
    logits = np.asarray(logits, dtype=float)
    cams = np.asarray(cams, dtype=float)
    order = np.argsort(-logits, kind="stable")[:top]
    rgb = image.transpose(1, 2, 0)
    rgb = (rgb - rgb.min()) / (np.ptp(rgb) + 1e-12)
    h, w = rgb.shape[:2]
    fig = new_figure(width=2.2 * (len(order) + 1), height=2.6)
    ax = fig.add_subplot(1, len(order) + 1, 1)
    ax.imshow(rgb)
    ax.set_title("input")
    ax.axis("off")
    rows = []
    for i, k in enumerate(order):
        cam = cams[k]
        scale = (h // cam.shape[0], w // cam.shape[1])
        up = np.kron(cam, np.ones(scale)) if min(scale) >= 1 else cam
        ax = fig.add_subplot(1, len(order) + 1, i + 2)
        ax.imshow(rgb)
        ax.imshow(up, alpha=0.5, extent=(0, w, h, 0), interpolation="bilinear")
        name = class_names[k] if class_names else f"class {k}"
        ax.set_title(f"Top{i + 1} {name}\n{logits[k]:.2f}")
        ax.axis("off")
        rows.append({"rank": i + 1, "category": int(k), "score": float(logits[k]),
                     "cam": json.dumps(np.round(cam, 6).tolist())})
    out_path = Path(out_path)
    return _save(fig, out_path.parent, out_path.stem, ["rank", "category", "score", "cam"], rows)


def plot_curves(records, out_path):
    """Per-epoch accuracy for each evaluation split plus the training loss."""
    fig = new_figure()
    ax = fig.gca()
    rows = []
    splits = []
    for r in records:
        if r.split != "train" and r.split not in splits:
            splits.append(r.split)
    for split in splits:
        pts = [(r.epoch, r.top1) for r in records if r.split == split and r.top1 is not None]
        if pts:
            ax.plot(*zip(*pts), marker="o", label=split)
            rows += [{"series": split, "x": e, "y": a} for e, a in pts]
    ax.set_xlabel("epoch")
    ax.set_ylabel("top-1 accuracy (%)")
    loss = [(r.epoch, r.total) for r in records if r.split == "train" and r.total is not None]
    if loss:
        ax2 = ax.twinx()
        ax2.plot(*zip(*loss), color=colors[-1], linestyle="--", label="train loss")
        ax2.set_ylabel("training loss")
        rows += [{"series": "train_loss", "x": e, "y": v} for e, v in loss]
    if splits:
        ax.legend(loc="lower right")
    out_path = Path(out_path)
    return _save(fig, out_path.parent, out_path.stem, ["series", "x", "y"], rows)


def emit_plots(tables, out_dir):
    """Render one figure per table path; returns the list of PNG paths."""
    return [plot_table_file(t, out_dir) for t in tables]
