"""ODE sampling with kinetic path energy bookkeeping.

Energy uses left-Riemann quadrature over exactly the velocity evaluations the
stepper already makes, so recording it costs no extra field calls::

    kpe = 0.5 * dt * sum_k ||v(x_k, t_k)||^2
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import IntegrationError, ValidationError
from .fields import NULL_LABEL, GuidanceConfig, VelocityField, cfg_mix
from .mathcore import RngStream, gauss_draw

__all__ = [
    "CHUNK_SIZE",
    "EnergyRecord",
    "Trajectory",
    "energy_records",
    "integrate",
    "integrate_batch",
    "kpe_of",
    "sample_batch",
    "tercile_bins",
    "percentile_bins",
    "worker_count",
]

QUADRATURE = "left-riemann"
METHODS = ("euler", "heun")
# trajectories are grouped into fixed-size chunks; chunk contents never depend
# on the worker count, which keeps results bitwise independent of threading
CHUNK_SIZE = 128


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    vel_sq_norms: np.ndarray
    kpe: float
    seed: Optional[tuple] = None
    guidance: Optional[GuidanceConfig] = None
    label: Optional[int] = None
    method: str = "euler"

    @property
    def n_steps(self):
        return len(self.vel_sq_norms)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    @property
    def final_state(self):
        return self.states[-1]


@dataclass(frozen=True)
class EnergyRecord:
    sample_id: int
    kpe: float
    tercile: str
    label: Optional[int]
    guidance_scale: Optional[float]


def kpe_of(vel_sq_norms, dt):
    """Left-Riemann energy ``0.5 * dt * sum(vel_sq_norms)`` (compensated sum)."""
    vals = np.asarray(vel_sq_norms, dtype=np.float64).reshape(-1)
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise ValidationError("squared velocity norms must be finite and non-negative")
    return 0.5 * dt * math.fsum(vals.tolist())


def _velocity(field, x, t, labels, scale):
    if scale is None:
        return field._velocity(x, t, labels)
    v_u = field._velocity(x, t, None)
    v_c = field._velocity(x, t, labels)
    return cfg_mix(v_u, v_c, scale)


def integrate_batch(field: VelocityField, x0, n_steps, method="euler", labels=None, guidance_scale=None, t_span=(0.0, 1.0), index_offset=0):
    """Integrate a batch of start points; returns ``(times, states, vel_sq_norms)``.

    ``states`` has shape ``(n, n_steps + 1, dim)`` and ``vel_sq_norms`` has
    shape ``(n, n_steps)``.
    """
    if method not in METHODS:
        raise ValidationError(f"method must be one of {METHODS}, got {method!r}")
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != field.dim:
        raise ValidationError(f"start points must have shape (n, {field.dim}), got {x.shape}")
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        raise IntegrationError("non-finite start point", step=0, index=index_offset + int(np.argmax(bad)))
    t0, t1 = map(float, t_span)
    if not 0.0 <= t0 < t1 <= 1.0:
        raise ValidationError(f"invalid time span {t_span}")
    if guidance_scale is not None and labels is None:
        raise ValidationError("guided sampling needs class labels")
    n, d = x.shape
    dt = (t1 - t0) / n_steps
    times = t0 + (t1 - t0) * (np.arange(n_steps + 1) / n_steps)
    states = np.empty((n, n_steps + 1, d))
    vsq = np.empty((n, n_steps))
    states[:, 0] = x
    for k in range(n_steps):
        tk = float(times[k])
        v = _velocity(field, x, tk, labels, guidance_scale)
        vsq[:, k] = np.einsum("ij,ij->i", v, v)
        if method == "euler":
            x = x + dt * v
        else:
            pred = x + dt * v
            v2 = _velocity(field, pred, float(times[k + 1]), labels, guidance_scale)
            x = x + (0.5 * dt) * (v + v2)
        bad = ~np.all(np.isfinite(x), axis=1)
        if np.any(bad):
            raise IntegrationError("non-finite state", step=k + 1, index=index_offset + int(np.argmax(bad)))
        states[:, k + 1] = x
    return times, states, vsq


def integrate(field: VelocityField, x0, n_steps, method="euler", guidance: Optional[GuidanceConfig] = None, label=None, t_span=(0.0, 1.0), seed=None) -> Trajectory:
    """Integrate one trajectory from ``x0``.

    ``guidance`` mixes unconditional and conditional velocities for its label;
    a bare ``label`` samples the conditional field without mixing.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    scale = None
    if guidance is not None:
        label, scale = guidance.label, guidance.scale
    labels = None if label is None else np.array([label], dtype=np.int64)
    times, states, vsq = integrate_batch(field, x0, n_steps, method, labels, scale, t_span)
    dt = (t_span[1] - t_span[0]) / n_steps
    return Trajectory(times, states[0], vsq[0], kpe_of(vsq[0], dt), seed, guidance, label, method)


def worker_count(threads=None):
    if threads is None:
        env = os.environ.get("KPEFLOW_THREADS")
        try:
            threads = int(env) if env else (os.cpu_count() or 1)
        except ValueError:
            raise ValidationError(f"KPEFLOW_THREADS must be an integer, got {env!r}") from None
    if threads < 1:
        raise ValidationError("thread count must be >= 1")
    return threads


def sample_batch(field: VelocityField, n, n_steps, method="euler", master_seed=0, guidance=None, labels=None, threads=None):
    """Sample ``n`` trajectories; trajectory ``i`` draws x0 from stream (master_seed, i).

    ``guidance`` is a CFG scale (float) or ``None``. ``labels`` gives the class
    per trajectory; when guidance is requested without labels, classes cycle
    through the field's label set by index.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if labels is None and guidance is not None:
        if not field.conditional:
            raise ValidationError("guidance requires a class-conditional field")
        classes = getattr(field, "class_labels", list(range(field.n_labels)))
        labels = np.array([classes[i % len(classes)] for i in range(n)], dtype=np.int64)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != n:
            raise ValidationError(f"expected {n} labels, got {labels.shape[0]}")
    scale = None if guidance is None else GuidanceConfig(float(guidance), 0).scale
    x0 = np.stack([gauss_draw(RngStream(master_seed, i), field.dim) for i in range(n)])

    def run(start):
        stop = min(start + CHUNK_SIZE, n)
        lab = None if labels is None else labels[start:stop]
        return integrate_batch(field, x0[start:stop], n_steps, method, lab, scale, index_offset=start)

    starts = list(range(0, n, CHUNK_SIZE))
    workers = min(worker_count(threads), len(starts))
    if workers == 1:
        parts = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    dt = 1.0 / n_steps
    out = []
    for start, (times, states, vsq) in zip(starts, parts):
        for j in range(states.shape[0]):
            i = start + j
            lab = None if labels is None else int(labels[i])
            g = None if scale is None else GuidanceConfig(scale, lab)
            if lab == NULL_LABEL:
                lab = None
            out.append(Trajectory(times, states[j], vsq[j], kpe_of(vsq[j], dt), (master_seed, i), g, lab, method))
    return out


def percentile_bins(values, lower_pct, upper_pct):
    """Masks (low, mid, high) split at two linear-interpolation percentiles.

    Values equal to a cut point go to the lower bin.
    """
    v = np.asarray(values, dtype=np.float64)
    lo, hi = np.percentile(v, [lower_pct, upper_pct])
    low = v <= lo
    high = v > hi
    return low, ~low & ~high, high


def tercile_bins(energies):
    """Label each energy ``low``/``mid``/``high`` at the 33.33/66.67 percentiles."""
    e = np.asarray(energies, dtype=np.float64).reshape(-1)
    if e.shape[0] < 3:
        raise ValidationError("tercile binning needs at least 3 values")
    low, mid, high = percentile_bins(e, 100.0 / 3.0, 200.0 / 3.0)
    out = np.empty(e.shape[0], dtype=object)
    out[low] = "low"
    out[mid] = "mid"
    out[high] = "high"
    return out.tolist()


def energy_records(trajectories):
    bins = tercile_bins([tr.kpe for tr in trajectories])
    return [
        EnergyRecord(
            i if tr.seed is None else tr.seed[1],
            tr.kpe,
            b,
            tr.label,
            None if tr.guidance is None else tr.guidance.scale,
        )
        for i, (tr, b) in enumerate(zip(trajectories, bins))
    ]
