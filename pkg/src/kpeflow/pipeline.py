"""Energy-density and energy-semantics analyses over trajectory records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .density import Embedding2D, kde_bandwidth, kde_density, knn_density, pca2
from .errors import ValidationError
from .fields import VelocityField
from .mixture import LabeledMixtureSpec
from .sampler import tercile_bins
from .semantics import margins_for, semantic_trend
from .stats import StatsReport, correlation_report

__all__ = ["DensityAnalysis", "analyze_density", "analyze_semantics", "DENSITY_METHODS"]

DENSITY_METHODS = ("knn", "kde", "analytic")
MIN_SAMPLES = 100


@dataclass
class DensityAnalysis:
    method: str
    report: StatsReport
    kpe: np.ndarray
    log_density: np.ndarray
    embedding: Embedding2D
    ids: np.ndarray
    top10: np.ndarray  # indices of the top-10% energy samples
    top10_below_median: float
    grid: dict = field(default_factory=dict)
    reference_set: str = "samples"

    def results(self):
        return {
            "method": self.method,
            "n": int(self.kpe.size),
            "report": self.report.to_dict(),
            "top10_count": int(self.top10.size),
            "top10_below_median_fraction": self.top10_below_median,
            "explained_variance": self.embedding.explained_variance,
            "density_reference": self.reference_set,
        }


def _features(records):
    feats = [r.final_features for r in records]
    if any(f is None for f in feats):
        raise ValidationError("records lack final_features; density analysis needs them")
    arr = np.asarray(feats, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError("final_features must have a fixed length")
    return arr


def _log_kernel_weights(query, ref, h):
    z = (query[:, None, :] - ref[None, :, :]) / h
    return -0.5 * np.sum(z * z, axis=2)


def _grid(embedding, kpe, log_density_at, size):
    u = embedding.coords
    lo = u.min(axis=0)
    hi = u.max(axis=0)
    pad = 0.05 * (hi - lo)
    g0 = np.linspace(lo[0] - pad[0], hi[0] + pad[0], size)
    g1 = np.linspace(lo[1] - pad[1], hi[1] + pad[1], size)
    gu, gv = np.meshgrid(g0, g1, indexing="ij")
    pts = np.column_stack([gu.ravel(), gv.ravel()])
    logd = log_density_at(pts)
    h = kde_bandwidth(u)
    mean_kpe = np.empty(len(pts))
    for s in range(0, len(pts), 256):
        lw = _log_kernel_weights(pts[s : s + 256], u, h)
        lw -= lw.max(axis=1, keepdims=True)
        w = np.exp(lw)
        mean_kpe[s : s + 256] = (w @ kpe) / w.sum(axis=1)
    return {"u": pts[:, 0], "v": pts[:, 1], "log_density": logd, "mean_kpe": mean_kpe}


def analyze_density(records, methods=("kde",), k=50, field: VelocityField = None, reference=None, grid_size=40):
    """Correlate energy with density for each requested method.

    All methods share one PCA embedding fit on the sample features.
    ``reference`` (raw feature rows) switches the k-NN/KDE estimators to a
    density surface built on that set instead of on the samples.
    """
    if len(records) < MIN_SAMPLES:
        raise ValidationError(f"density analysis needs at least {MIN_SAMPLES} samples, got {len(records)}")
    for m in methods:
        if m not in DENSITY_METHODS:
            raise ValidationError(f"unknown density method {m!r}")
    if "analytic" in methods and field is None:
        raise ValidationError("analytic density needs a model with a known target density")
    kpe = np.array([r.kpe for r in records])
    ids = np.array([r.id for r in records])
    feats = _features(records)
    emb = pca2(feats)
    u = emb.coords
    ref = None if reference is None else emb.transform(reference)
    out = {}
    for m in methods:
        if m == "knn":
            est = knn_density(u, k, reference=ref)
            ref_pts = u if ref is None else ref

            def at(p, ref_pts=ref_pts):
                return knn_density(p, k, reference=ref_pts).log_densities

            logd = est.log_densities
        elif m == "kde":
            est = kde_density(u, reference=ref)
            ref_pts = u if ref is None else ref
            h = np.asarray(est.params["bandwidth"])

            def at(p, ref_pts=ref_pts, h=h):
                return kde_density(p, reference=ref_pts, bandwidth=h).log_densities

            logd = est.log_densities
        else:
            logd = np.asarray(field.target_logpdf(feats), dtype=np.float64)
            if feats.shape[1] == 2:

                def at(p):
                    raw = emb.mean + (p @ emb.loadings) * emb.scale
                    return field.target_logpdf(raw)

            else:
                at = None
        report = correlation_report(kpe, logd)
        cut = np.percentile(kpe, 90.0)
        top = np.nonzero(kpe > cut)[0]
        below = float(np.mean(logd[top] < np.median(logd))) if top.size else float("nan")
        grid = _grid(emb, kpe, at, grid_size) if at is not None else {}
        if m == "analytic":
            used = "analytic target"
        else:
            used = "samples" if ref is None else f"reference set (n={len(ref)})"
        out[m] = DensityAnalysis(m, report, kpe, logd, emb, ids, top, below, grid, used)
    return out


def analyze_semantics(records, spec: LabeledMixtureSpec):
    """Per guidance scale: margins under ``spec`` and the high-vs-low tercile comparison."""
    if any(r.label is None for r in records):
        raise ValidationError("semantic analysis needs labeled records")
    feats = _features(records)
    by_scale = {}
    for i, r in enumerate(records):
        by_scale.setdefault(r.guidance_scale, []).append(i)
    rows = []
    tables = []
    for scale in sorted(by_scale, key=lambda s: (s is None, s)):
        idx = np.array(by_scale[scale])
        sub = [records[i] for i in idx]
        kpe = np.array([r.kpe for r in sub])
        m = margins_for(spec, feats[idx], [r.label for r in sub])
        trend = semantic_trend(kpe, m)
        bins = tercile_bins(kpe)
        for r, mv, b in zip(sub, m, bins):
            rows.append((r.id, r.label, float(mv), r.kpe, b, scale))
        c = trend.comparison
        lo, hi = c.groups["low"], c.groups["high"]
        tables.append(
            {
                "guidance_scale": scale,
                "low_mean": lo.mean,
                "low_std": lo.std,
                "high_mean": hi.mean,
                "high_std": hi.std,
                "delta_mu": c.delta_mu,
                "t": c.welch_t,
                "dof": c.welch_dof,
                "p": c.welch_p,
                "cohens_d": c.cohens_d,
                "t_test": c.t_test,
                "n_per_bin": {b: s.n for b, s in trend.bins.items()},
                "medians": trend.medians,
                "score": "log-posterior margin",
            }
        )
    return tables, rows
