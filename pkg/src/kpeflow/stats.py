"""Rank correlation, effect sizes and two-sample tests.

Distribution tails come from ``scipy.special`` (``stdtr``, ``ndtr``); every
statistic itself is computed here.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .errors import ValidationError
from .sampler import percentile_bins

__all__ = [
    "GroupSummary",
    "StatsReport",
    "cliffs_delta",
    "cohens_d",
    "cohens_d_summary",
    "correlation_report",
    "group_compare",
    "mann_whitney_u",
    "rankdata",
    "spearman",
    "student_t",
    "welch_t",
    "welch_t_summary",
]


class UndefinedCorrelationError(ValidationError):
    pass


class DegenerateTestError(ValidationError):
    pass


def _vec(x, name):
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite values")
    return a


def rankdata(x):
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = len(x)
    starts = np.concatenate([[0], np.nonzero(xs[1:] != xs[:-1])[0] + 1])
    ends = np.concatenate([starts[1:], [n]])
    avg = 0.5 * (starts + ends - 1) + 1.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _t_two_sided(t, dof):
    if math.isnan(t):
        return float("nan")
    return float(min(1.0, 2.0 * special.stdtr(dof, -abs(t))))


def spearman(x, y):
    """Spearman's rho with the t-approximation two-sided p-value."""
    a = _vec(x, "x")
    b = _vec(y, "y")
    if a.shape != b.shape:
        raise ValidationError("x and y differ in length")
    n = a.shape[0]
    if n < 3:
        raise ValidationError("spearman needs at least 3 pairs")
    ra = rankdata(a)
    rb = rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    rho = max(-1.0, min(1.0, float(ra @ rb) / den))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, _t_two_sided(t, n - 2)


def _pair_counts(a, b):
    """(#{a_i > b_j}, #{a_i < b_j}) over all pairs, via sorting."""
    bs = np.sort(b)
    less = np.searchsorted(bs, a, side="left")  # b_j < a_i
    leq = np.searchsorted(bs, a, side="right")
    greater = len(bs) - leq  # b_j > a_i
    return int(less.sum()), int(greater.sum())


def cliffs_delta(a, b):
    """(#{a_i > b_j} - #{a_i < b_j}) / (|a| |b|)."""
    a = _vec(a, "a")
    b = _vec(b, "b")
    if a.size == 0 or b.size == 0:
        raise ValidationError("cliffs_delta needs non-empty groups")
    gt, lt = _pair_counts(a, b)
    return (gt - lt) / (a.size * b.size)


def mann_whitney_u(a, b):
    """Mann-Whitney U with ``U = #{a_i < b_j} + 0.5 #{a_i == b_j}``.

    This is the statistic of group ``b`` (rank sum of ``b`` minus
    ``n_b (n_b + 1) / 2``). The p-value is two-sided from the normal
    approximation with tie and continuity corrections.
    """
    a = _vec(a, "a")
    b = _vec(b, "b")
    n1, n2 = a.size, b.size
    if n1 < 2 or n2 < 2:
        raise ValidationError("mann_whitney_u needs at least 2 values per group")
    ranks = rankdata(np.concatenate([a, b]))
    u = float(ranks[n1:].sum() - n2 * (n2 + 1) / 2.0)
    n = n1 + n2
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie = float(np.sum(counts.astype(np.float64) ** 3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        raise DegenerateTestError("all values are identical; U test is degenerate")
    mu = n1 * n2 / 2.0
    z = (abs(u - mu) - 0.5) / math.sqrt(var)
    p = float(min(1.0, 2.0 * special.ndtr(-z)))
    return u, p


def welch_t_summary(mu1, sd1, n1, mu2, sd2, n2):
    """Welch t for ``mu2 - mu1`` from group summaries: (t, dof, two-sided p)."""
    if n1 < 2 or n2 < 2:
        raise ValidationError("each group needs n >= 2")
    if sd1 < 0 or sd2 < 0:
        raise ValidationError("standard deviations must be non-negative")
    v1 = sd1 * sd1 / n1
    v2 = sd2 * sd2 / n2
    diff = mu2 - mu1
    se2 = v1 + v2
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, float(n1 + n2 - 2), 1.0
        return math.copysign(math.inf, diff), float(n1 + n2 - 2), 0.0
    t = diff / math.sqrt(se2)
    dof = se2 * se2 / (v1 * v1 / (n1 - 1) + v2 * v2 / (n2 - 1))
    return t, dof, _t_two_sided(t, dof)


def cohens_d_summary(mu1, sd1, mu2, sd2):
    """``(mu2 - mu1) / sqrt((sd1^2 + sd2^2) / 2)`` (equal-n pooled SD)."""
    diff = mu2 - mu1
    pooled = math.sqrt((sd1 * sd1 + sd2 * sd2) / 2.0)
    if pooled == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / pooled


def welch_t(a, b):
    a = _vec(a, "a")
    b = _vec(b, "b")
    return welch_t_summary(a.mean(), a.std(ddof=1), a.size, b.mean(), b.std(ddof=1), b.size)


def student_t(a, b):
    """Pooled-variance t for ``mean(b) - mean(a)``: (t, dof, two-sided p)."""
    a = _vec(a, "a")
    b = _vec(b, "b")
    n1, n2 = a.size, b.size
    if n1 < 2 or n2 < 2:
        raise ValidationError("each group needs n >= 2")
    dof = n1 + n2 - 2
    sp2 = ((n1 - 1) * a.var(ddof=1) + (n2 - 1) * b.var(ddof=1)) / dof
    diff = b.mean() - a.mean()
    se = math.sqrt(sp2 * (1.0 / n1 + 1.0 / n2))
    if se == 0.0:
        return (0.0, float(dof), 1.0) if diff == 0.0 else (math.copysign(math.inf, diff), float(dof), 0.0)
    t = diff / se
    return t, float(dof), _t_two_sided(t, dof)


def cohens_d(a, b):
    """``(mean(b) - mean(a))`` over the (n-1)-weighted pooled SD."""
    a = _vec(a, "a")
    b = _vec(b, "b")
    n1, n2 = a.size, b.size
    sp = math.sqrt(((n1 - 1) * a.var(ddof=1) + (n2 - 1) * b.var(ddof=1)) / (n1 + n2 - 2))
    diff = float(b.mean() - a.mean())
    if sp == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / sp


@dataclass
class GroupSummary:
    n: int
    mean: float
    std: float
    median: float

    @classmethod
    def of(cls, values):
        v = np.asarray(values, dtype=np.float64)
        return cls(int(v.size), float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0, float(np.median(v)))


@dataclass
class StatsReport:
    spearman_rho: Optional[float] = None
    spearman_p: Optional[float] = None
    cliffs_delta: Optional[float] = None
    mannwhitney_u: Optional[float] = None
    mannwhitney_p: Optional[float] = None
    welch_t: Optional[float] = None
    welch_dof: Optional[float] = None
    welch_p: Optional[float] = None
    cohens_d: Optional[float] = None
    delta_mu: Optional[float] = None
    t_test: str = "welch"
    groups: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def group_compare(values_low, values_high) -> StatsReport:
    """High-minus-low comparison: Δμ, Welch t, pooled-SD Cohen's d."""
    lo = _vec(values_low, "values_low")
    hi = _vec(values_high, "values_high")
    if lo.size < 2 or hi.size < 2:
        raise ValidationError("each group needs at least 2 values")
    t, dof, p = welch_t(lo, hi)
    return StatsReport(
        welch_t=t,
        welch_dof=dof,
        welch_p=p,
        cohens_d=cohens_d(lo, hi),
        delta_mu=float(hi.mean() - lo.mean()),
        groups={"low": GroupSummary.of(lo), "high": GroupSummary.of(hi)},
    )


def correlation_report(energies, log_densities, tail_pct=20.0) -> StatsReport:
    """Spearman over all pairs plus top/bottom-``tail_pct`` energy group contrasts.

    Cliff's delta and U compare densities of the high-energy group (first
    argument) against the low-energy group.
    """
    e = _vec(energies, "energies")
    ld = _vec(log_densities, "log_densities")
    if e.shape != ld.shape:
        raise ValidationError("energies and log_densities differ in length")
    if e.size < 10:
        raise ValidationError("correlation_report needs at least 10 samples")
    rho, p = spearman(e, ld)
    low, _, high = percentile_bins(e, tail_pct, 100.0 - tail_pct)
    d_high, d_low = ld[high], ld[low]
    u, up = mann_whitney_u(d_high, d_low)
    return StatsReport(
        spearman_rho=rho,
        spearman_p=p,
        cliffs_delta=cliffs_delta(d_high, d_low),
        mannwhitney_u=u,
        mannwhitney_p=up,
        groups={"low_energy": GroupSummary.of(d_low), "high_energy": GroupSummary.of(d_high)},
    )
