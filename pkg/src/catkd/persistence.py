"""Run manifests, metric/result tables and checkpoints.

Tables are tab-separated text.  The first line is a schema comment
(``#schema_version=1 schema=<id>``), the second the column header.  All
writes go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import subprocess
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import torch

SCHEMA_VERSION = 1
CHECKPOINT_FORMAT = 1


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:12]


def code_version() -> str:
    from . import __version__

    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, columns, rows, schema: str):
    buf = io.StringIO()
    buf.write(f"#schema_version={SCHEMA_VERSION} schema={schema}\n")
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    atomic_write_text(path, buf.getvalue())


def _parse(v: str):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_table(path):
    """Return ``(header, rows)``; ``header`` holds the parsed schema line."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing schema header line")
    header = dict(item.split("=", 1) for item in lines[0][1:].split())
    header["schema_version"] = int(header["schema_version"])
    reader = csv.reader(lines[1:], delimiter="\t")
    columns = next(reader, [])
    rows = [{c: _parse(v) for c, v in zip(columns, r)} for r in reader]
    header["columns"] = columns
    return header, rows


@dataclass
class MetricRecord:
    run_id: str
    epoch: int
    split: str
    ce: Optional[float] = None
    cat: Optional[float] = None
    kd: Optional[float] = None
    total: Optional[float] = None
    top1: Optional[float] = None
    wall_clock: Optional[float] = None

    def numbers(self):
        return [v for v in (self.ce, self.cat, self.kd, self.total, self.top1) if v is not None]

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.numbers())

    def comparable(self) -> tuple:
        """Everything except timing; equal across deterministic reruns."""
        return (self.run_id, self.epoch, self.split, self.ce, self.cat, self.kd, self.total, self.top1)


METRIC_COLUMNS = [f.name for f in fields(MetricRecord)]


def write_metrics(path, records):
    write_table(path, METRIC_COLUMNS, [asdict(r) for r in records], "metrics")


def read_metrics(path):
    _, rows = read_table(path)
    out = []
    for r in rows:
        r["run_id"] = str(r["run_id"])
        out.append(MetricRecord(**r))
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    run_dir: Path
    config: dict
    seeds: list
    config_hash: str = ""
    code_version: str = ""
    started: str = ""
    finished: Optional[str] = None
    status: str = "running"
    artifacts: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return Path(self.run_dir) / "manifest.json"

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "config": self.config,
            "seeds": list(self.seeds),
            "code_version": self.code_version,
            "started": self.started,
            "finished": self.finished,
            "status": self.status,
            "artifacts": self.artifacts,
            "notes": self.notes,
        }

    def write(self):
        atomic_write_text(self.path, json.dumps(self.to_dict(), indent=2, default=str))

    @classmethod
    def start(cls, run_dir, config: dict, seeds, notes=None) -> "RunManifest":
        m = cls(Path(run_dir), config, list(seeds), config_hash(config), code_version(), _now(), notes=notes or {})
        m.write()
        return m

    def add_artifact(self, name: str, path):
        self.artifacts[name] = os.path.relpath(path, self.run_dir)

    def finalize(self, status: str = "completed"):
        self.status = status
        self.finished = _now()
        self.write()

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        d = json.loads((Path(run_dir) / "manifest.json").read_text())
        return cls(
            Path(run_dir), d["config"], d["seeds"], d["config_hash"], d["code_version"],
            d["started"], d["finished"], d["status"], d["artifacts"], d.get("notes", {}),
        )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, schedule=None, config_hash: str = "", extra=None):
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "backbone": model.spec.to_dict(),
        "num_classes": model.num_classes,
        "bias": model.has_bias,
        "converted": model.converted,
        "state_dict": model.state_dict(),
        "schedule": None if schedule is None else schedule.to_dict(),
        "config_hash": config_hash,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, payload)``."""
    from .backbones import BackboneSpec
    from .models import CamClassifier

    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format_version')}")
    model = CamClassifier(BackboneSpec(**payload["backbone"]), payload["num_classes"], payload["bias"])
    if payload["converted"]:
        model.convert()
    model.load_state_dict(payload["state_dict"])
    return model, payload
