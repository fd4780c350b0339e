"""Feature extraction, 2-D PCA embedding and density estimation.

Image features (22, in this order)::

    mean_r mean_g mean_b  std_r std_g std_b  min_r min_g min_b  max_r max_g max_b
    gray_mean gray_std  grad_mean grad_std  edge_density
    lap_abs_mean lap_var  hist_entropy  row_var_mean col_var_mean

Gradients are Sobel responses scaled by 1/8 (a unit step yields magnitude
0.5); a pixel counts as an edge when its gradient magnitude exceeds 0.1.
Entropy is in nats over a 32-bin histogram of the grayscale image on [0, 1].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import ValidationError
from .mathcore import eigh_sym
from .mixture import mixture_logpdf

__all__ = [
    "FEATURE_NAMES",
    "DensityEstimate",
    "Embedding2D",
    "extract_features",
    "kde_bandwidth",
    "kde_density",
    "knn_density",
    "mixture_logpdf",
    "pca2",
    "unit_ball_volume",
]

FEATURE_NAMES = (
    "mean_r", "mean_g", "mean_b",
    "std_r", "std_g", "std_b",
    "min_r", "min_g", "min_b",
    "max_r", "max_g", "max_b",
    "gray_mean", "gray_std",
    "grad_mean", "grad_std",
    "edge_density",
    "lap_abs_mean", "lap_var",
    "hist_entropy",
    "row_var_mean", "col_var_mean",
)  # fmt: skip

EDGE_THRESHOLD = 0.1
HIST_BINS = 32


def extract_features(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got shape {img.shape}")
    h, w, _ = img.shape
    if h < 8 or w < 8:
        raise ValidationError(f"image must be at least 8x8, got {h}x{w}")
    if not np.all(np.isfinite(img)):
        raise ValidationError("image has non-finite pixels")
    chans = img.reshape(-1, 3)
    gray = img @ np.array([0.299, 0.587, 0.114])
    gx = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
    grad = np.hypot(gx, gy)
    lap = ndimage.laplace(gray, mode="nearest")
    counts, _ = np.histogram(np.clip(gray, 0.0, 1.0), bins=HIST_BINS, range=(0.0, 1.0))
    p = counts[counts > 0] / counts.sum()
    entropy = float(-np.sum(p * np.log(p))) + 0.0
    feats = np.concatenate(
        [
            chans.mean(axis=0),
            chans.std(axis=0),
            chans.min(axis=0),
            chans.max(axis=0),
            [gray.mean(), gray.std()],
            [grad.mean(), grad.std()],
            [np.mean(grad > EDGE_THRESHOLD)],
            [np.abs(lap).mean(), lap.var()],
            [entropy],
            [gray.var(axis=1).mean(), gray.var(axis=0).mean()],
        ]
    )
    return feats


@dataclass
class Embedding2D:
    coords: np.ndarray
    explained_variance: float
    loadings: np.ndarray  # (2, p_kept)
    eigenvalues: np.ndarray
    kept_columns: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    low_variance_warning: bool = False

    def transform(self, features):
        """Project new rows with the fitted standardization and loadings."""
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        z = (f[:, self.kept_columns] - self.mean) / self.scale
        return z @ self.loadings.T


def pca2(features) -> Embedding2D:
    """Project standardized features onto the top two correlation-matrix eigenvectors."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("features must be an (n, p) matrix")
    n, p = x.shape
    if n <= 2:
        raise ValidationError(f"PCA needs more than 2 samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features have non-finite entries")
    mean = x.mean(axis=0)
    std = x.std(axis=0, ddof=1)
    keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    if not np.all(keep):
        warnings.warn(f"dropping {int((~keep).sum())} constant feature column(s)", stacklevel=2)
    if keep.sum() < 2:
        raise ValidationError("need at least 2 non-constant feature columns")
    cols = np.nonzero(keep)[0]
    z = (x[:, cols] - mean[cols]) / std[cols]
    corr = (z.T @ z) / (n - 1)
    corr = 0.5 * (corr + corr.T)
    lam, vec = eigh_sym(corr)
    lam = np.clip(lam, 0.0, None)
    loadings = vec[:, :2].T.copy()
    explained = float((lam[0] + lam[1]) / lam.sum())
    low = explained < 0.85
    if low:
        warnings.warn(f"2-D embedding explains only {explained:.3f} of the variance", stacklevel=2)
    return Embedding2D(z @ loadings.T, explained, loadings, lam, cols, mean[cols], std[cols], low)


@dataclass
class DensityEstimate:
    method: str
    densities: np.ndarray
    log_densities: np.ndarray
    params: dict = field(default_factory=dict)
    capped: np.ndarray = None  # k-NN points whose density was capped

    @property
    def n(self):
        return len(self.densities)


def unit_ball_volume(d):
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)


def _points(points, name="points"):
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} must be a finite (n, d) array")
    return np.ascontiguousarray(x)


def knn_density(points, k=50, reference=None) -> DensityEstimate:
    """k-NN density ``k / ((n - 1) V_d r_k^d)``.

    Without ``reference`` the estimate is taken at the sample points with
    each point excluded from its own neighbour set. With ``reference`` the
    query ``points`` are scored against the reference set using ``n`` in
    place of ``n - 1``.
    """
    q = _points(points)
    self_mode = reference is None
    ref = q if self_mode else _points(reference, "reference")
    if ref.shape[1] != q.shape[1]:
        raise ValidationError("points and reference differ in dimension")
    n_eff = ref.shape[0] - 1 if self_mode else ref.shape[0]
    if not 1 <= k <= n_eff:
        raise ValidationError(f"k must satisfy 1 <= k < n (k={k}, n={ref.shape[0]})")
    d = q.shape[1]
    rk = kernels.knn_kth_distance(q, ref, int(k), self_mode)
    with np.errstate(divide="ignore"):
        log_dens = math.log(k) - math.log(n_eff) - math.log(unit_ball_volume(d)) - d * np.log(rk)
    capped = ~np.isfinite(log_dens)
    if np.any(capped):
        finite = log_dens[~capped]
        if finite.size == 0:
            raise ValidationError("all points coincide; k-NN density undefined")
        log_dens[capped] = finite.max()
        warnings.warn(f"{int(capped.sum())} point(s) have zero k-NN radius; density capped", stacklevel=2)
    return DensityEstimate("knn", np.exp(log_dens), log_dens, {"k": int(k)}, capped)


def kde_bandwidth(points):
    """Per-dimension Scott bandwidth ``sigma_j * n^(-1/(d+4))``."""
    x = _points(points)
    n, d = x.shape
    if n < 2:
        raise ValidationError("KDE needs at least 2 points")
    sd = x.std(axis=0, ddof=1)
    if np.any(sd <= 0):
        raise ValidationError(f"zero variance in dimension(s) {np.nonzero(sd <= 0)[0].tolist()}")
    return sd * n ** (-1.0 / (d + 4))


def kde_density(points, reference=None, bandwidth=None) -> DensityEstimate:
    """Product-Gaussian KDE with Scott's bandwidth, evaluated at ``points``.

    The estimator is built on ``reference`` (default: ``points`` themselves,
    self term included).
    """
    q = _points(points)
    ref = q if reference is None else _points(reference, "reference")
    if ref.shape[1] != q.shape[1]:
        raise ValidationError("points and reference differ in dimension")
    h = kde_bandwidth(ref) if bandwidth is None else np.asarray(bandwidth, dtype=np.float64)
    log_dens = kernels.kde_log_density(q, ref, np.ascontiguousarray(h), False)
    return DensityEstimate("kde", np.exp(log_dens), log_dens, {"bandwidth": h.tolist()})
