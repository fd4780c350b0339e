"""Command-line interface: ``kpeflow <command> [options]``.

Configuration is resolved as built-in defaults, then a flat JSON file given
by ``--config``, then command-line flags. Every flag overrides the file key
of the same name (``--dump-states`` sets ``dump_states``). Unknown keys are
rejected by name.

Exit codes: 0 success, 2 validation error, 3 integrity error, 4 numeric
failure, 1 any other tool error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import builtin_spec, load_dataset
from .errors import KpeflowError, ValidationError
from .fields import GaussianMixtureField, GaussianOTField, VelocityField, field_from_dict, scaling_flow
from .io import (
    ENERGY_HEADER,
    SCHEMA_VERSION,
    atomic_write,
    energy_rows,
    read_points_csv,
    read_records,
    read_report,
    record_from_trajectory,
    report_envelope,
    write_csv,
    write_json,
    write_records,
)
from .mixture import LabeledMixtureSpec
from .pipeline import DENSITY_METHODS, analyze_density, analyze_semantics
from .sampler import METHODS, sample_batch
from .training import TrainConfig, train

__all__ = ["main", "resolve_config", "load_model", "DEFAULTS"]

_POS_INT = ("int", lambda v: v >= 1, ">= 1")
_NONNEG_INT = ("int", lambda v: v >= 0, ">= 0")
_POS_FLOAT = ("float", lambda v: v > 0 and math.isfinite(v), "> 0")
_STR = ("str", None, None)
_OPT_STR = ("str?", None, None)

# key -> (type, check, description of the check)
_KEYS = {
    "seed": _NONNEG_INT,
    "out": _OPT_STR,
    "dataset": _STR,
    "dataset_size": _POS_INT,
    "dataset_seed": _NONNEG_INT,
    "steps": _POS_INT,
    "batch_size": ("int", lambda v: v >= 2, ">= 2"),
    "lr": _POS_FLOAT,
    "lr_final": _POS_FLOAT,
    "coupling": ("str", lambda v: v in ("ot", "independent"), "one of ot, independent"),
    "label_dropout": ("float", lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
    "hidden": ("intlist", lambda v: len(v) >= 1 and all(h >= 1 for h in v), "non-empty list of positive ints"),
    "emb_dim": _POS_INT,
    "model": _OPT_STR,
    "n": _POS_INT,
    "method": ("str", lambda v: v in METHODS, "one of " + ", ".join(METHODS)),
    "guidance": ("floatlist?", lambda v: all(w >= 0 and math.isfinite(w) for w in v), "non-negative scales"),
    "dump_states": ("bool", None, None),
    "records": ("strlist", lambda v: len(v) >= 1, "at least one path"),
    "density": ("strlist", lambda v: len(v) >= 1 and all(m in DENSITY_METHODS for m in v), "subset of " + ", ".join(DENSITY_METHODS)),
    "k": _POS_INT,
    "reference": _OPT_STR,
    "grid_size": ("int", lambda v: v >= 2, ">= 2"),
    "mixture": _OPT_STR,
    "inputs": ("strlist", lambda v: len(v) >= 1, "at least one path"),
}

DEFAULTS = {
    "train": {
        "dataset": "ring8",
        "dataset_size": 20000,
        "dataset_seed": 7,
        "seed": 0,
        "steps": 20000,
        "batch_size": 128,
        "lr": 2e-3,
        "lr_final": 2e-4,
        "coupling": "ot",
        "label_dropout": 0.1,
        "hidden": [64, 64],
        "emb_dim": 4,
        "out": ".",
    },
    "sample": {
        "model": None,
        "n": 1000,
        "steps": 100,
        "method": "euler",
        "guidance": None,
        "seed": 0,
        "dump_states": False,
        "out": ".",
    },
    "ingest": {"records": None, "out": None},
    "analyze-density": {
        "records": None,
        "density": ["kde"],
        "k": 50,
        "model": None,
        "reference": None,
        "grid_size": 40,
        "out": ".",
    },
    "analyze-semantics": {"records": None, "mixture": None, "model": None, "out": "."},
    "report": {"inputs": None, "out": "."},
}

# Oracle fields addressable without a model file.
ORACLES = {
    "oracle:ring8": lambda: GaussianMixtureField(builtin_spec("ring8")),
    "oracle:two-class": lambda: GaussianMixtureField(builtin_spec("two-class")),
    "oracle:scaling": lambda: scaling_flow(2, 2.0),
}


def _split(value):
    if isinstance(value, str):
        return [s.strip() for s in value.split(",") if s.strip()]
    return list(value)


def _coerce(key, value):
    kind, check, desc = _KEYS[key]
    try:
        if value is None:
            if kind.endswith("?"):
                return None
            raise ValidationError(f"config key '{key}' must not be null")
        if kind in ("int",):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            value = int(value)
        elif kind == "float":
            value = float(value)
        elif kind in ("str", "str?"):
            if not isinstance(value, str):
                raise ValueError(value)
        elif kind == "bool":
            if not isinstance(value, bool):
                raise ValueError(value)
        elif kind == "intlist":
            value = [int(v) for v in _split(value)]
        elif kind == "floatlist?":
            value = [float(v) for v in _split(value)]
        elif kind == "strlist":
            value = [str(v) for v in _split(value)]
    except (TypeError, ValueError):
        raise ValidationError(f"config key '{key}' has invalid value {value!r}") from None
    if check is not None and not check(value):
        raise ValidationError(f"config key '{key}' must be {desc}, got {value!r}")
    return value


def resolve_config(command, file_cfg=None, overrides=None) -> dict:
    """Merge defaults, config-file keys and flag overrides; validate every key."""
    if command not in DEFAULTS:
        raise ValidationError(f"unknown command {command!r}")
    cfg = dict(DEFAULTS[command])
    for source in (file_cfg or {}, overrides or {}):
        for key, value in source.items():
            if key not in cfg:
                raise ValidationError(f"unknown config key '{key}' for command {command}")
            cfg[key] = value
    return {key: _coerce(key, value) for key, value in cfg.items()}


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: malformed JSON ({exc.msg})") from None
    if not isinstance(d, dict):
        raise ValidationError(f"{p}: config must be a JSON object")
    return d


def load_model(path):
    """Return ``(field, mixture_spec_or_None)`` from a model file or oracle name."""
    if path is None:
        raise ValidationError("config key 'model' is required")
    if path in ORACLES:
        field = ORACLES[path]()
        return field, getattr(field, "spec", None)
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"model file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: malformed JSON ({exc.msg})") from None
    if not isinstance(d, dict):
        raise ValidationError(f"{p}: model must be a JSON object")
    if "field" in d:
        field = field_from_dict(d["field"])
        spec = d.get("dataset_mixture")
        spec = None if spec is None else LabeledMixtureSpec.from_dict(spec)
    else:
        field = field_from_dict(d)
        spec = None
    if spec is None:
        spec = getattr(field, "spec", None)
    return field, spec


def _out_dir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scale_suffix(w):
    return "" if w is None else f"_w{w:g}"


def cmd_train(cfg):
    points, labels, n_labels, spec = load_dataset(cfg["dataset"], cfg["dataset_size"], cfg["dataset_seed"])
    tc = TrainConfig(
        batch_size=cfg["batch_size"],
        steps=cfg["steps"],
        lr=cfg["lr"],
        lr_final=cfg["lr_final"],
        coupling=cfg["coupling"],
        label_dropout=cfg["label_dropout"],
        seed=cfg["seed"],
        hidden=tuple(cfg["hidden"]),
        emb_dim=cfg["emb_dim"],
    )
    field = train(tc, points, labels, n_labels)
    hist = np.asarray(field.loss_history)
    tail = hist[-min(100, hist.size) :]
    results = {
        "initial_loss": float(hist[0]),
        "final_loss": float(tail.mean()),
        "loss_ratio": float(tail.mean() / hist[0]),
        "n_params": field.n_params,
    }
    out = _out_dir(cfg)
    doc = report_envelope("model", cfg, results)
    doc["field"] = field.to_dict()
    doc["dataset_mixture"] = None if spec is None else spec.to_dict()
    write_json(out / "model.json", doc)
    write_csv(out / "train_log.csv", ("step", "loss"), ((i, float(v)) for i, v in enumerate(hist)))
    print(f"trained {field.n_params} parameters for {tc.steps} steps")
    print(f"loss: initial {results['initial_loss']:.6g}, final {results['final_loss']:.6g} (ratio {results['loss_ratio']:.3f})")
    print(f"wrote {out / 'model.json'}")
    return results


def cmd_sample(cfg):
    field, _ = load_model(cfg["model"])
    scales = cfg["guidance"] if cfg["guidance"] else [None]
    if len(set(scales)) != len(scales):
        raise ValidationError("guidance scales must be distinct")
    if scales != [None] and not field.conditional:
        raise ValidationError("guidance requires a class-conditional model")
    out = _out_dir(cfg)
    per_scale = []
    for w in scales:
        trajs = sample_batch(field, cfg["n"], cfg["steps"], cfg["method"], cfg["seed"], guidance=w)
        suffix = _scale_suffix(w)
        traj_path = out / f"trajectories{suffix}.jsonl"
        energy_path = out / f"energies{suffix}.csv"
        write_records(traj_path, trajs, dump_states=cfg["dump_states"])
        recs = [record_from_trajectory(tr) for tr in trajs]
        write_csv(energy_path, ENERGY_HEADER, energy_rows(recs))
        kpe = np.array([tr.kpe for tr in trajs])
        entry = {
            "guidance_scale": w,
            "n": int(kpe.size),
            "mean_kpe": float(kpe.mean()),
            "std_kpe": float(kpe.std(ddof=1)) if kpe.size > 1 else 0.0,
            "records": traj_path.name,
            "energies": energy_path.name,
        }
        line = f"w={w:g}: " if w is not None else ""
        line += f"mean kpe {entry['mean_kpe']:.6g} over {entry['n']} trajectories"
        if isinstance(field, GaussianOTField):
            expected = field.params.expected_kpe()
            entry["half_w2_squared"] = expected
            entry["relative_error"] = abs(entry["mean_kpe"] - expected) / expected if expected > 0 else None
            line += f"; half W2^2 = {expected:.6g}"
            if entry["relative_error"] is not None:
                line += f" (relative error {entry['relative_error']:.3%})"
        print(line)
        per_scale.append(entry)
    write_json(out / "sample_summary.json", report_envelope("sample", cfg, {"scales": per_scale}))
    return per_scale


def cmd_ingest(cfg):
    (path,) = cfg["records"][:1]
    if len(cfg["records"]) != 1:
        raise ValidationError("ingest takes exactly one record file")
    records = read_records(path)
    kpe = np.array([r.kpe for r in records])
    n_labeled = sum(r.label is not None for r in records)
    results = {
        "n": len(records),
        "n_labeled": n_labeled,
        "mean_kpe": float(kpe.mean()),
        "min_kpe": float(kpe.min()),
        "max_kpe": float(kpe.max()),
        "has_features": all(r.final_features is not None for r in records),
    }
    print(f"{path}: {len(records)} records ok, mean kpe {results['mean_kpe']:.6g}, {n_labeled} labeled")
    if cfg["out"] is not None:
        out = _out_dir(cfg)
        write_csv(out / "energies.csv", ENERGY_HEADER, energy_rows(records))
        write_json(out / "ingest.json", report_envelope("ingest", cfg, results))
    return records


def _load_all_records(paths):
    records = []
    for p in paths:
        records.extend(read_records(p))
    return records


def cmd_analyze_density(cfg):
    records = _load_all_records(cfg["records"])
    field = None
    if "analytic" in cfg["density"]:
        field, spec = load_model(cfg["model"])
        if type(field).target_logpdf is VelocityField.target_logpdf:
            if spec is None:
                raise ValidationError("analytic density needs a model with a known target density")
            field = GaussianMixtureField(spec)  # trained model: score against its training mixture
    reference = None
    if cfg["reference"] is not None:
        reference, _ = read_points_csv(cfg["reference"])
    analyses = analyze_density(records, cfg["density"], cfg["k"], field, reference, cfg["grid_size"])
    out = _out_dir(cfg)
    summary = {}
    for m, a in analyses.items():
        results = a.results()
        write_json(out / f"density_{m}.json", report_envelope("density", cfg, results))
        write_csv(
            out / f"density_{m}_scatter.csv",
            ("id", "kpe", "log_density", "u", "v"),
            zip(a.ids.tolist(), a.kpe.tolist(), a.log_density.tolist(), a.embedding.coords[:, 0].tolist(), a.embedding.coords[:, 1].tolist()),
        )
        if a.grid:
            g = a.grid
            write_csv(
                out / f"density_{m}_grid.csv",
                ("u", "v", "log_density", "mean_kpe"),
                zip(g["u"].tolist(), g["v"].tolist(), np.asarray(g["log_density"]).tolist(), g["mean_kpe"].tolist()),
            )
        top = a.top10
        write_csv(
            out / f"density_{m}_top10.csv",
            ("id", "kpe", "log_density", "u", "v"),
            zip(a.ids[top].tolist(), a.kpe[top].tolist(), a.log_density[top].tolist(), a.embedding.coords[top, 0].tolist(), a.embedding.coords[top, 1].tolist()),
        )
        r = a.report
        print(
            f"{m}: rho={r.spearman_rho:.4f} (p={r.spearman_p:.3g}), cliffs delta={r.cliffs_delta:.4f}, "
            f"U={r.mannwhitney_u:.6g} (p={r.mannwhitney_p:.3g}), top-10% below median density {a.top10_below_median:.1%}"
        )
        summary[m] = results
    return summary


def _mixture_for_semantics(cfg):
    if cfg["mixture"] is not None:
        name = cfg["mixture"]
        p = Path(name)
        if p.is_file():
            try:
                return LabeledMixtureSpec.from_dict(json.loads(p.read_text()))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValidationError(f"{p}: not a mixture spec ({exc})") from None
        return builtin_spec(name)
    if cfg["model"] is not None:
        _, spec = load_model(cfg["model"])
        if spec is None:
            raise ValidationError("model carries no mixture spec; pass --mixture")
        return spec
    raise ValidationError("semantic analysis needs 'mixture' or 'model' for class posteriors")


def cmd_analyze_semantics(cfg):
    spec = _mixture_for_semantics(cfg)
    records = _load_all_records(cfg["records"])
    tables, rows = analyze_semantics(records, spec)
    out = _out_dir(cfg)
    write_json(out / "semantics.json", report_envelope("semantics", cfg, {"tables": tables}))
    write_csv(out / "margins.csv", ("id", "true_class", "margin", "kpe", "tercile", "guidance_scale"), rows)
    print(f"{'w':>6} {'low mean':>10} {'high mean':>10} {'delta':>9} {'t':>8} {'p':>10} {'d':>7}")
    for t in tables:
        w = "-" if t["guidance_scale"] is None else f"{t['guidance_scale']:g}"
        print(f"{w:>6} {t['low_mean']:10.4f} {t['high_mean']:10.4f} {t['delta_mu']:9.4f} {t['t']:8.3f} {t['p']:10.3g} {t['cohens_d']:7.3f}")
    return tables


def _signif(p):
    return "significant" if p is not None and p < 0.01 else "not significant"


def _sign(v):
    return "negative" if v < 0 else ("positive" if v > 0 else "zero")


def _summarize(path, doc):
    kind = doc.get("kind")
    res = doc.get("results", {})
    lines = []
    if kind == "density":
        r = res.get("report", {})
        rho, p = r.get("spearman_rho"), r.get("spearman_p")
        lines.append(f"[{path}] density ({res.get('method')}): energy-density correlation {_sign(rho)} (rho={rho:.4f}, p={p:.3g}, {_signif(p)})")
        d = r.get("cliffs_delta")
        lines.append(f"[{path}]   cliffs delta high vs low energy: {_sign(d)} ({d:.4f}); U p={r.get('mannwhitney_p'):.3g}")
    elif kind == "semantics":
        for t in res.get("tables", []):
            w = "unguided" if t["guidance_scale"] is None else f"w={t['guidance_scale']:g}"
            lines.append(
                f"[{path}] semantics {w}: high-minus-low margin {_sign(t['delta_mu'])} "
                f"(t={t['t']:.3f}, p={t['p']:.3g}, d={t['cohens_d']:.3f}, {_signif(t['p'])})"
            )
    elif kind == "sample":
        for s in res.get("scales", []):
            lines.append(f"[{path}] sample: mean kpe {s['mean_kpe']:.6g} over {s['n']} trajectories")
    else:
        lines.append(f"[{path}] {kind}: no findings to summarize")
    return lines


def cmd_report(cfg):
    docs = [(p, read_report(p)) for p in cfg["inputs"]]
    versions = {}
    for p, d in docs:
        versions.setdefault(d["schema_version"], []).append(p)
    if len(versions) > 1:
        desc = "; ".join(f"version {v}: {', '.join(ps)}" for v, ps in versions.items())
        raise ValidationError(f"conflicting schema versions ({desc})")
    (version,) = versions
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema version {version} (this tool reads version {SCHEMA_VERSION})")
    sections = {}
    lines = []
    for p, d in docs:
        sections.setdefault(d.get("kind", "unknown"), []).append({"source": p, **d})
        lines.extend(_summarize(p, d))
    out = _out_dir(cfg)
    write_json(out / "report.json", report_envelope("report", cfg, {"sections": sections}))
    text = "\n".join(lines) + "\n"
    atomic_write(out / "summary.txt", text)
    sys.stdout.write(text)
    return sections


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "ingest": cmd_ingest,
    "analyze-density": cmd_analyze_density,
    "analyze-semantics": cmd_analyze_semantics,
    "report": cmd_report,
}


def _parser():
    p = argparse.ArgumentParser(prog="kpeflow", description="Kinetic path energy diagnostics for flow-matching samplers.")
    p.add_argument("--version", action="version", version=f"kpeflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        sp.add_argument("--config", help="flat JSON config; flags override its keys")
        sp.add_argument("--out", help="output directory")
        for f in flags:
            f(sp)

    seed = lambda sp: sp.add_argument("--seed", type=int)  # noqa: E731
    model = lambda sp: sp.add_argument("--model", help="model JSON file or oracle:ring8|oracle:two-class|oracle:scaling")  # noqa: E731

    sp = sub.add_parser("train", help="fit a flow-matching MLP")
    common(sp, seed)
    sp.add_argument("--dataset", help="ring8, two-class or file:<points.csv>")
    sp.add_argument("--steps", type=int, help="optimizer steps")
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--coupling", choices=("ot", "independent"))

    sp = sub.add_parser("sample", help="integrate trajectories and record their energies")
    common(sp, seed, model)
    sp.add_argument("--steps", type=int, help="integration steps N")
    sp.add_argument("--n", type=int, help="number of trajectories")
    sp.add_argument("--method", help="euler or heun")
    sp.add_argument("--guidance", help="comma-separated CFG scales")
    sp.add_argument("--dump-states", action="store_true", default=None, dest="dump_states")

    sp = sub.add_parser("ingest", help="validate a trajectory-record file")
    common(sp)
    sp.add_argument("records", nargs="?", help="JSONL record file")

    sp = sub.add_parser("analyze-density", help="energy versus density statistics")
    common(sp, model)
    sp.add_argument("records", nargs="*", help="JSONL record file(s)")
    sp.add_argument("--density", help="comma-separated subset of knn,kde,analytic")
    sp.add_argument("--k", type=int, help="neighbour count for knn")
    sp.add_argument("--reference", help="CSV of reference points for the density surface")

    sp = sub.add_parser("analyze-semantics", help="energy versus class-margin statistics")
    common(sp, model)
    sp.add_argument("records", nargs="*", help="JSONL record file(s)")
    sp.add_argument("--mixture", help="ring8, two-class or a mixture JSON file")

    sp = sub.add_parser("report", help="merge report files and summarize findings")
    common(sp)
    sp.add_argument("inputs", nargs="*", help="report JSON files")
    return p


def _overrides(ns):
    skip = {"command", "config"}
    ov = {}
    for key, value in vars(ns).items():
        if key in skip or value is None:
            continue
        if isinstance(value, list) and not value:
            continue
        ov[key] = value
    return ov


def main(argv=None) -> int:
    parser = _parser()
    ns = parser.parse_args(argv)
    try:
        ov = _overrides(ns)
        if ns.command == "ingest" and "records" in ov:
            ov["records"] = [ov["records"]]
        cfg = resolve_config(ns.command, _load_config_file(ns.config), ov)
        required = {"sample": "model", "ingest": "records", "analyze-density": "records", "analyze-semantics": "records", "report": "inputs"}
        key = required.get(ns.command)
        if key is not None and cfg[key] is None:
            raise ValidationError(f"config key '{key}' is required for {ns.command}")
        COMMANDS[ns.command](cfg)
    except KpeflowError as exc:
        print(f"kpeflow {ns.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"kpeflow {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
