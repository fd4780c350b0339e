"""Class-posterior margins as a semantic-strength score.

A sample's score for class ``c`` is the exact log posterior ``log p(c | x)``
under a known labeled Gaussian mixture; its margin is the true-class score
minus the best competing score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mixture import LabeledMixtureSpec
from .sampler import tercile_bins
from .stats import GroupSummary, StatsReport, group_compare

__all__ = [
    "MarginRecord",
    "TrendReport",
    "class_scores",
    "margin",
    "margins_for",
    "semantic_trend",
]


def _class_log_posteriors(spec: LabeledMixtureSpec, x):
    lp = spec.component_logpdfs(x)
    comp_labels = np.array([c.label for c in spec.components])
    labels = spec.labels
    per_class = np.empty((lp.shape[0], len(labels)))
    for j, c in enumerate(labels):
        sub = lp[:, comp_labels == c]
        mx = sub.max(axis=1)
        per_class[:, j] = mx + np.log(np.exp(sub - mx[:, None]).sum(axis=1))
    mx = per_class.max(axis=1)
    total = mx + np.log(np.exp(per_class - mx[:, None]).sum(axis=1))
    return labels, per_class - total[:, None]


def class_scores(spec: LabeledMixtureSpec, x) -> dict:
    """Map class label to ``log p(label | x)`` for a single point."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("class_scores takes a single point; use margins_for for batches")
    labels, lp = _class_log_posteriors(spec, x[None, :])
    return {c: float(lp[0, j]) for j, c in enumerate(labels)}


def margin(scores: dict, true_class) -> float:
    if len(scores) < 2:
        raise ValidationError("margin needs at least 2 classes")
    if true_class not in scores:
        raise ValidationError(f"unknown true class {true_class!r}")
    others = max(v for k, v in scores.items() if k != true_class)
    return scores[true_class] - others


def margins_for(spec: LabeledMixtureSpec, points, true_classes) -> np.ndarray:
    """Vectorized margins for rows of ``points``."""
    labels, lp = _class_log_posteriors(spec, points)
    if len(labels) < 2:
        raise ValidationError("margin needs at least 2 classes")
    col = {c: j for j, c in enumerate(labels)}
    try:
        idx = np.array([col[int(c)] for c in true_classes])
    except KeyError as exc:
        raise ValidationError(f"unknown true class {exc}") from None
    rows = np.arange(lp.shape[0])
    true = lp[rows, idx]
    masked = lp.copy()
    masked[rows, idx] = -np.inf
    return true - masked.max(axis=1)


@dataclass
class MarginRecord:
    sample_id: int
    true_class: int
    scores: dict
    margin: float


@dataclass
class TrendReport:
    comparison: StatsReport
    medians: dict
    bins: dict

    def to_dict(self):
        return {
            "comparison": self.comparison.to_dict(),
            "medians": self.medians,
            "bins": {k: v.__dict__ for k, v in self.bins.items()},
        }


def semantic_trend(energies, margins) -> TrendReport:
    """Tercile-bin by energy, then compare high- vs low-bin margins."""
    e = np.asarray(energies, dtype=np.float64).reshape(-1)
    m = np.asarray(margins, dtype=np.float64).reshape(-1)
    if e.shape != m.shape:
        raise ValidationError("energies and margins differ in length")
    if e.size < 30:
        raise ValidationError("semantic_trend needs at least 30 samples")
    bins = np.array(tercile_bins(e))
    groups = {b: m[bins == b] for b in ("low", "mid", "high")}
    comparison = group_compare(groups["low"], groups["high"])
    summaries = {b: GroupSummary.of(v) for b, v in groups.items() if v.size}
    return TrendReport(comparison, {b: s.median for b, s in summaries.items()}, summaries)
