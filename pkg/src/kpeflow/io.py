"""File formats: trajectory records (JSONL), tabular outputs (CSV), reports and models (JSON).

Trajectory record, one JSON object per line::

    {"id": 0, "seed": [master_seed, index], "n_steps": N, "dt": 1/N,
     "quadrature": "left-riemann", "method": "euler",
     "vel_sq_norms": [...N floats...], "kpe": E,
     "label": int | null, "guidance_scale": float | null,
     "final_features": [...] | absent, "states": [[...], ...] | absent}

Floats are written with Python's shortest round-trip repr (JSON) or 17
significant digits (CSV), so doubles survive a write/read cycle bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import IntegrityError, ValidationError
from .sampler import QUADRATURE, Trajectory, kpe_of, tercile_bins

__all__ = [
    "SCHEMA_VERSION",
    "TrajectoryRecord",
    "atomic_write",
    "fmt_float",
    "read_records",
    "read_report",
    "record_from_trajectory",
    "write_csv",
    "write_json",
    "write_records",
]

SCHEMA_VERSION = 1
KPE_RTOL = 1e-9


def fmt_float(x) -> str:
    if x is None:
        return ""
    return format(float(x), ".17g")


def atomic_write(path, text: str):
    """Write ``text`` to ``path`` through a temp file in the same directory plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=False, allow_nan=True) + "\n")


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else ("" if v is None else v) for v in row])
    atomic_write(path, buf.getvalue())


@dataclass
class TrajectoryRecord:
    id: int
    seed: Optional[list]
    n_steps: int
    dt: float
    vel_sq_norms: list
    kpe: float
    method: str = "euler"
    label: Optional[int] = None
    guidance_scale: Optional[float] = None
    final_features: Optional[list] = None
    states: Optional[list] = None
    quadrature: str = QUADRATURE

    def to_json(self) -> str:
        d = {
            "id": self.id,
            "seed": self.seed,
            "n_steps": self.n_steps,
            "dt": self.dt,
            "quadrature": self.quadrature,
            "method": self.method,
            "vel_sq_norms": self.vel_sq_norms,
            "kpe": self.kpe,
            "label": self.label,
            "guidance_scale": self.guidance_scale,
        }
        if self.final_features is not None:
            d["final_features"] = self.final_features
        if self.states is not None:
            d["states"] = self.states
        return json.dumps(d)


def record_from_trajectory(tr: Trajectory, sample_id=None, dump_states=False) -> TrajectoryRecord:
    if sample_id is None:
        sample_id = tr.seed[1] if tr.seed is not None else 0
    return TrajectoryRecord(
        id=int(sample_id),
        seed=None if tr.seed is None else [int(s) for s in tr.seed],
        n_steps=tr.n_steps,
        dt=1.0 / tr.n_steps,
        vel_sq_norms=tr.vel_sq_norms.tolist(),
        kpe=tr.kpe,
        method=tr.method,
        label=tr.label,
        guidance_scale=None if tr.guidance is None else tr.guidance.scale,
        final_features=tr.final_state.tolist(),
        states=tr.states.tolist() if dump_states else None,
    )


def write_records(path, trajectories, dump_states=False):
    lines = [record_from_trajectory(tr, dump_states=dump_states).to_json() for tr in trajectories]
    atomic_write(path, "\n".join(lines) + "\n")


_REQUIRED = ("id", "n_steps", "dt", "vel_sq_norms", "kpe")


def _parse_record(obj, lineno):
    if not isinstance(obj, dict):
        raise ValidationError(f"line {lineno}: expected a JSON object")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise ValidationError(f"line {lineno}: missing key(s) {missing}")
    quad = obj.get("quadrature", QUADRATURE)
    if quad != QUADRATURE:
        raise ValidationError(f"line {lineno}: unsupported quadrature {quad!r}")
    try:
        n_steps = int(obj["n_steps"])
        dt = float(obj["dt"])
        vsq = [float(v) for v in obj["vel_sq_norms"]]
        kpe = float(obj["kpe"])
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None
    if len(vsq) != n_steps:
        raise ValidationError(f"line {lineno}: n_steps={n_steps} but {len(vsq)} velocity norms")
    if not (dt > 0 and math.isfinite(dt)):
        raise ValidationError(f"line {lineno}: dt must be positive")
    try:
        recomputed = kpe_of(vsq, dt)
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None
    if not math.isfinite(kpe) or abs(recomputed - kpe) > KPE_RTOL * max(abs(recomputed), abs(kpe), 1e-300):
        if not (recomputed == 0.0 and kpe == 0.0):
            raise IntegrityError(f"line {lineno}: kpe {kpe!r} does not match velocity norms (recomputed {recomputed!r})")
    label = obj.get("label")
    scale = obj.get("guidance_scale")
    feats = obj.get("final_features")
    return TrajectoryRecord(
        id=int(obj["id"]),
        seed=obj.get("seed"),
        n_steps=n_steps,
        dt=dt,
        vel_sq_norms=vsq,
        kpe=kpe,
        method=obj.get("method", "euler"),
        label=None if label is None else int(label),
        guidance_scale=None if scale is None else float(scale),
        final_features=None if feats is None else [float(v) for v in feats],
        states=obj.get("states"),
        quadrature=quad,
    )


def read_records(path) -> list:
    """Parse and validate a trajectory-record file.

    Malformed lines raise :class:`ValidationError`; energies that disagree
    with their velocity norms raise :class:`IntegrityError`. Both name the
    1-based line number.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"record file not found: {path}")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            out.append(_parse_record(obj, lineno))
    if not out:
        raise ValidationError(f"{path}: no records")
    return out


def energy_rows(records):
    bins = tercile_bins([r.kpe for r in records]) if len(records) >= 3 else [None] * len(records)
    return [(r.id, r.kpe, b, r.label, r.guidance_scale) for r, b in zip(records, bins)]


ENERGY_HEADER = ("id", "kpe", "tercile", "label", "guidance_scale")


def report_envelope(kind, config, results):
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "tool": "kpeflow",
        "tool_version": __version__,
        "config": config,
        "results": results,
    }


def read_report(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"report not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc.msg})") from None
    if not isinstance(d, dict) or "schema_version" not in d:
        raise ValidationError(f"{path}: missing schema_version")
    return d


def read_points_csv(path):
    """Numeric CSV with a header row; an optional ``label`` column holds classes."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"points file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValidationError(f"{path}: expected a header and at least one row")
    header = [h.strip() for h in rows[0]]
    lab_col = header.index("label") if "label" in header else None
    cols = [i for i in range(len(header)) if i != lab_col]
    try:
        pts = np.array([[float(r[i]) for i in cols] for r in rows[1:]])
        labels = None if lab_col is None else np.array([int(r[lab_col]) for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return pts, labels
