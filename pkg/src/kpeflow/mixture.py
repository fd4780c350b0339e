"""Labeled Gaussian mixtures with exact log-densities and sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = [
    "Component",
    "LabeledMixtureSpec",
    "gaussian_logpdf",
    "mixture_logpdf",
    "ring_mixture",
    "two_class_mixture",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Component:
    label: int
    weight: float
    mean: np.ndarray
    cov: np.ndarray


def gaussian_logpdf(x, mean, chol):
    """Log N(x; mean, L Lᵀ) for rows of ``x`` given the Cholesky factor ``L``."""
    x = np.atleast_2d(x)
    diff = x - mean
    z = np.linalg.solve(chol, diff.T).T
    d = mean.shape[0]
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (np.sum(z * z, axis=1) + d * _LOG_2PI + logdet)


@dataclass(frozen=True)
class LabeledMixtureSpec:
    """Gaussian mixture whose components carry integer class labels."""

    components: tuple
    _chol: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        comps = []
        for c in self.components:
            if not isinstance(c, Component):
                c = Component(*c)
            mean = np.asarray(c.mean, dtype=np.float64).reshape(-1)
            cov = np.asarray(c.cov, dtype=np.float64)
            comps.append(Component(int(c.label), float(c.weight), mean, cov))
        if not comps:
            raise ValidationError("mixture has no components")
        dim = comps[0].mean.shape[0]
        chols = []
        for i, c in enumerate(comps):
            if c.weight <= 0 or not math.isfinite(c.weight):
                raise ValidationError(f"component {i}: weight must be positive")
            if c.mean.shape != (dim,) or not np.all(np.isfinite(c.mean)):
                raise ValidationError(f"component {i}: mean must be a finite vector of length {dim}")
            if c.cov.shape != (dim, dim) or not np.allclose(c.cov, c.cov.T, rtol=0, atol=1e-10 * max(1.0, np.abs(c.cov).max())):
                raise ValidationError(f"component {i}: covariance must be symmetric {dim}x{dim}")
            try:
                chols.append(np.linalg.cholesky(c.cov))
            except np.linalg.LinAlgError:
                raise ValidationError(f"component {i}: covariance is not positive definite") from None
        total = math.fsum(c.weight for c in comps)
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"mixture weights sum to {total}, expected 1")
        object.__setattr__(self, "components", tuple(comps))
        object.__setattr__(self, "_chol", tuple(chols))

    @property
    def dim(self) -> int:
        return self.components[0].mean.shape[0]

    @property
    def labels(self) -> list:
        return sorted({c.label for c in self.components})

    def component_logpdfs(self, x):
        """Matrix (n, K) of log(w_k N(x; mu_k, Sigma_k))."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValidationError(f"expected points of dimension {self.dim}, got {x.shape[1]}")
        return np.column_stack(
            [math.log(c.weight) + gaussian_logpdf(x, c.mean, L) for c, L in zip(self.components, self._chol)]
        )

    def sample(self, n, rng: np.random.Generator):
        """Draw ``n`` points; returns (points, labels, component indices)."""
        w = np.array([c.weight for c in self.components])
        idx = rng.choice(len(w), size=n, p=w / w.sum())
        z = rng.standard_normal((n, self.dim))
        pts = np.empty((n, self.dim))
        for k, (c, L) in enumerate(zip(self.components, self._chol)):
            sel = idx == k
            pts[sel] = c.mean + z[sel] @ L.T
        labels = np.array([self.components[k].label for k in idx], dtype=np.int64)
        return pts, labels, idx

    def to_dict(self):
        return {
            "components": [
                {"label": c.label, "weight": c.weight, "mean": c.mean.tolist(), "cov": c.cov.tolist()}
                for c in self.components
            ]
        }

    @classmethod
    def from_dict(cls, d):
        try:
            comps = [Component(c["label"], c["weight"], c["mean"], c["cov"]) for c in d["components"]]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed mixture spec: {exc}") from None
        return cls(tuple(comps))


def mixture_logpdf(spec: LabeledMixtureSpec, x):
    """Exact log of the mixture density at ``x`` (a vector or rows of a matrix)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    lp = spec.component_logpdfs(x)
    mx = lp.max(axis=1)
    out = mx + np.log(np.exp(lp - mx[:, None]).sum(axis=1))
    return float(out[0]) if single else out


def ring_mixture(n_modes=8, radius=4.0, std=0.5, labeled=False):
    """Equal-weight ring of isotropic 2-D Gaussians.

    With ``labeled=True`` each mode is its own class; otherwise all share label 0.
    """
    comps = []
    for k in range(n_modes):
        ang = 2.0 * math.pi * k / n_modes
        mean = radius * np.array([math.cos(ang), math.sin(ang)])
        comps.append(Component(k if labeled else 0, 1.0 / n_modes, mean, std**2 * np.eye(2)))
    return LabeledMixtureSpec(tuple(comps))


def two_class_mixture(separation=3.0, std=1.0, dim=2):
    """Two equally weighted classes centred at ±separation/2 along the first axis."""
    mu = np.zeros(dim)
    mu[0] = separation / 2.0
    cov = std**2 * np.eye(dim)
    return LabeledMixtureSpec((Component(0, 0.5, -mu, cov), Component(1, 0.5, mu.copy(), cov)))
