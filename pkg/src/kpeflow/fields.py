"""Velocity fields: analytic oracles, the guided-mixture field and CFG mixing.

Every field maps ``(x, t, label)`` to a velocity of the same dimension as
``x``. ``eval`` accepts a single point of shape ``(dim,)`` or a batch of shape
``(n, dim)``; labels are either ``None`` (unconditional), one integer for the
whole batch, or an integer per row where ``-1`` means unconditional.

Gaussian OT field
-----------------
The optimal map from N(0, I) to N(mu, Sigma) is ``T(x) = mu + A x`` with
``A = Sigma^{1/2}``. Displacement interpolation moves each particle on the
straight line ``x(t) = t mu + M_t x0`` with ``M_t = (1 - t) I + t A``, at the
constant velocity ``mu + (A - I) x0``. Solving for ``x0`` gives the Eulerian
field

    v(x, t) = mu + (A - I) M_t^{-1} (x - t mu).

``A`` and ``M_t`` share eigenvectors, so ``(A - I) M_t^{-1}`` is applied in
the eigenbasis of Sigma.

Gaussian mixture field
----------------------
For the straight interpolant ``x_t = (1 - t) x0 + t x1`` with x0 ~ N(0, I)
and x1 from component k, ``(x_t, x1 - x0)`` is jointly Gaussian, so

    E[x1 - x0 | x_t, k] = mu_k + (t Sigma_k - (1 - t) I) C_k^{-1} (x_t - t mu_k),
    C_k = (1 - t)^2 I + t^2 Sigma_k,

and the marginal velocity is the responsibility-weighted average of these,
with responsibilities proportional to ``w_k N(x_t; t mu_k, C_k)``. Passing a
class label restricts the average to that class's components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mathcore import eigh_sym, spd_sqrt
from .mixture import LabeledMixtureSpec, mixture_logpdf

__all__ = [
    "ConstantField",
    "GaussianMixtureField",
    "GaussianOTField",
    "GaussianOTParams",
    "GuidanceConfig",
    "VelocityField",
    "cfg_mix",
    "field_from_dict",
    "gaussian_ot_velocity",
    "scaling_flow",
]

NULL_LABEL = -1


def _normalize_labels(label, n):
    if label is None:
        return None
    if np.isscalar(label):
        return np.full(n, int(label), dtype=np.int64)
    lab = np.asarray(label, dtype=np.int64).reshape(-1)
    if lab.shape[0] != n:
        raise ValidationError(f"expected {n} labels, got {lab.shape[0]}")
    return lab


class VelocityField:
    """Base class. Subclasses implement ``_velocity(x, t, labels)`` on batches."""

    kind = "abstract"
    dim: int
    n_labels = 0

    def eval(self, x, t, label=None):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x.reshape(1, -1) if single else x
        if xb.ndim != 2 or xb.shape[1] != self.dim:
            raise ValidationError(f"expected state of dimension {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(xb)):
            raise ValidationError("state has non-finite entries")
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise ValidationError(f"time must lie in [0, 1], got {t}")
        labels = _normalize_labels(label, xb.shape[0])
        out = self._velocity(xb, t, labels)
        return out[0] if single else out

    __call__ = eval

    def _velocity(self, x, t, labels):
        raise NotImplementedError

    @property
    def conditional(self) -> bool:
        return self.n_labels > 0

    def target_logpdf(self, x):
        """Exact log-density of the field's terminal distribution, when known."""
        raise ValidationError(f"{self.kind} field has no analytic target density")

    def to_dict(self) -> dict:
        raise NotImplementedError


class ConstantField(VelocityField):
    kind = "constant"

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.c)):
            raise ValidationError("constant velocity must be finite")
        self.c.setflags(write=False)
        self.dim = self.c.shape[0]

    def _velocity(self, x, t, labels):
        return np.broadcast_to(self.c, x.shape).copy()

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim, "c": self.c.tolist()}


@dataclass(frozen=True)
class GaussianOTParams:
    mu: np.ndarray
    sigma: np.ndarray
    a: np.ndarray
    eigvals: np.ndarray  # of sigma
    eigvecs: np.ndarray

    @classmethod
    def from_target(cls, mu, sigma):
        mu = np.asarray(mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.shape != (mu.shape[0], mu.shape[0]):
            raise ValidationError(f"covariance shape {sigma.shape} does not match mean length {mu.shape[0]}")
        a = spd_sqrt(sigma)
        lam, vec = eigh_sym(sigma)
        for arr in (mu, sigma, a, lam, vec):
            arr.setflags(write=False)
        return cls(mu, sigma, a, lam, vec)

    @property
    def dim(self):
        return self.mu.shape[0]

    def w2_squared(self) -> float:
        """Squared 2-Wasserstein distance from N(0, I) to N(mu, Sigma)."""
        root = np.sqrt(self.eigvals)
        return float(self.mu @ self.mu + np.sum((root - 1.0) ** 2))

    def expected_kpe(self) -> float:
        return 0.5 * self.w2_squared()

    def transport(self, x0):
        return self.mu + np.asarray(x0) @ self.a.T

    def characteristic(self, x0, t):
        """Position at time ``t`` of the particle that started at ``x0``."""
        x0 = np.asarray(x0, dtype=np.float64)
        return t * self.mu + (1.0 - t) * x0 + t * (x0 @ self.a.T)


def gaussian_ot_velocity(params: GaussianOTParams, x, t):
    x = np.asarray(x, dtype=np.float64)
    root = np.sqrt(params.eigvals)
    gain = (root - 1.0) / ((1.0 - t) + t * root)
    v = params.eigvecs
    y = (x - t * params.mu) @ v
    return params.mu + (y * gain) @ v.T


class GaussianOTField(VelocityField):
    kind = "gaussian-ot"

    def __init__(self, mu, sigma):
        self.params = GaussianOTParams.from_target(mu, sigma)
        self.dim = self.params.dim

    def _velocity(self, x, t, labels):
        return gaussian_ot_velocity(self.params, x, t)

    def target_logpdf(self, x):
        p = self.params
        diff = np.atleast_2d(x) - p.mu
        y = diff @ p.eigvecs
        maha = np.sum(y * y / p.eigvals, axis=1)
        return -0.5 * (maha + np.sum(np.log(p.eigvals)) + self.dim * math.log(2 * math.pi))

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim, "mu": self.params.mu.tolist(), "sigma": self.params.sigma.tolist()}


def scaling_flow(dim, scale):
    """OT field from N(0, I) to N(0, scale² I); velocity x / (1/(scale-1) + t)."""
    return GaussianOTField(np.zeros(dim), scale**2 * np.eye(dim))


class GaussianMixtureField(VelocityField):
    """Exact marginal velocity of the straight interpolant to a labeled mixture."""

    kind = "gaussian-mixture"

    def __init__(self, spec: LabeledMixtureSpec):
        self.spec = spec
        self.dim = spec.dim
        self.class_labels = spec.labels
        self.n_labels = max(self.class_labels) + 1
        self._comp_labels = np.array([c.label for c in spec.components])
        self._log_w = np.log([c.weight for c in spec.components])

    def _velocity(self, x, t, labels):
        n, d = x.shape
        eye = np.eye(d)
        K = len(self.spec.components)
        logits = np.empty((n, K))
        cond = np.empty((K, n, d))
        for k, c in enumerate(self.spec.components):
            cov = (1.0 - t) ** 2 * eye + t**2 * c.cov
            chol = np.linalg.cholesky(cov)
            diff = x - t * c.mean
            z = np.linalg.solve(chol, diff.T)
            logdet = 2.0 * np.sum(np.log(np.diag(chol)))
            logits[:, k] = self._log_w[k] - 0.5 * (np.sum(z * z, axis=0) + logdet + d * math.log(2 * math.pi))
            white = np.linalg.solve(chol.T, z).T  # C_k^{-1} (x - t mu_k)
            cond[k] = c.mean + white @ (t * c.cov - (1.0 - t) * eye).T
        if labels is not None:
            mask = (labels[:, None] != NULL_LABEL) & (labels[:, None] != self._comp_labels[None, :])
            unknown = (labels != NULL_LABEL) & ~np.isin(labels, self._comp_labels)
            if np.any(unknown):
                raise ValidationError(f"unknown class label(s): {sorted(set(labels[unknown].tolist()))}")
            logits = np.where(mask, -np.inf, logits)
        logits -= logits.max(axis=1, keepdims=True)
        r = np.exp(logits)
        r /= r.sum(axis=1, keepdims=True)
        return np.einsum("nk,knd->nd", r, cond)

    def target_logpdf(self, x):
        return mixture_logpdf(self.spec, np.atleast_2d(x))

    def to_dict(self):
        return {"kind": self.kind, "dim": self.dim, "mixture": self.spec.to_dict()}


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float
    label: int

    def __post_init__(self):
        if not (self.scale >= 0 and math.isfinite(self.scale)):
            raise ValidationError(f"guidance scale must be a non-negative number, got {self.scale}")


def cfg_mix(v_uncond, v_cond, w):
    """Classifier-free guidance: ``v_uncond + w (v_cond - v_uncond)``.

    Evaluated as ``(1 - w) v_uncond + w v_cond`` so that ``w = 0`` and
    ``w = 1`` return the respective input bit for bit.
    """
    vu = np.asarray(v_uncond, dtype=np.float64)
    vc = np.asarray(v_cond, dtype=np.float64)
    if vu.shape != vc.shape:
        raise ValidationError(f"velocity shapes differ: {vu.shape} vs {vc.shape}")
    return (1.0 - w) * vu + w * vc


def field_from_dict(d: dict) -> VelocityField:
    kind = d.get("kind")
    try:
        if kind == ConstantField.kind:
            return ConstantField(d["c"])
        if kind == GaussianOTField.kind:
            return GaussianOTField(d["mu"], d["sigma"])
        if kind == GaussianMixtureField.kind:
            return GaussianMixtureField(LabeledMixtureSpec.from_dict(d["mixture"]))
        if kind == "mlp":
            from .training import MlpField

            return MlpField.from_dict(d)
    except KeyError as exc:
        raise ValidationError(f"{kind} field is missing key {exc}") from None
    raise ValidationError(f"unknown field kind {kind!r}")
