"""Conditional flow matching for a small MLP velocity field.

The network input is ``[x, sin(2π f t), cos(2π f t), E[label]]`` for
frequencies ``f = 0.5, 1, 2, 4``; ``E`` is a learned embedding table whose last
row is the null (unconditional) token. Hidden layers use tanh so that
finite-difference gradient checks are smooth; the output layer is linear.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import TrainingError, ValidationError
from .fields import NULL_LABEL, VelocityField
from .mathcore import RngStream, hungarian

__all__ = [
    "MlpField",
    "TrainConfig",
    "cfm_loss_and_grad",
    "grad_check",
    "ot_pair",
    "ot_permutation",
    "train",
]

log = logging.getLogger(__name__)

TIME_FREQS = np.array([0.5, 1.0, 2.0, 4.0])


def time_embedding(t):
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    ang = 2.0 * math.pi * t * TIME_FREQS
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class MlpField(VelocityField):
    kind = "mlp"

    def __init__(self, dim, hidden=(64, 64), n_labels=0, emb_dim=4, rng=None, weights=None, biases=None, embedding=None):
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_labels = int(n_labels)
        self.emb_dim = int(emb_dim)
        self.in_dim = self.dim + 2 * len(TIME_FREQS) + self.emb_dim
        widths = [self.in_dim, *self.hidden, self.dim]
        if weights is None:
            rng = rng if rng is not None else RngStream(0, 0).generator
            weights = [rng.standard_normal((a, b)) / math.sqrt(a) for a, b in zip(widths[:-1], widths[1:])]
            biases = [np.zeros(b) for b in widths[1:]]
            embedding = rng.standard_normal((self.n_labels + 1, self.emb_dim)) * 0.5
        self.weights = [np.asarray(w, dtype=np.float64).reshape(a, b) for w, a, b in zip(weights, widths[:-1], widths[1:])]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in biases]
        self.embedding = np.asarray(embedding, dtype=np.float64).reshape(self.n_labels + 1, self.emb_dim)
        # labels never seen during training fall back to the null token
        self.label_seen = np.ones(self.n_labels, dtype=bool)
        self.loss_history: list = []

    @property
    def null_label(self):
        return self.n_labels

    @property
    def widths(self):
        return [self.in_dim, *self.hidden, self.dim]

    # -- parameter vector -------------------------------------------------
    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        out.append(self.embedding)
        return out

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for p in self.parameters():
            size = p.size
            p[...] = flat[offset : offset + size].reshape(p.shape)
            offset += size
        if offset != flat.size:
            raise ValidationError(f"parameter vector has {flat.size} entries, expected {offset}")

    @property
    def n_params(self):
        return sum(p.size for p in self.parameters())

    # -- forward / backward ----------------------------------------------
    def _label_rows(self, labels, n):
        if labels is None:
            return np.full(n, self.null_label, dtype=np.int64)
        lab = np.asarray(labels, dtype=np.int64)
        rows = np.where(lab == NULL_LABEL, self.null_label, lab)
        bad = (rows < 0) | (rows > self.null_label)
        if np.any(bad):
            raise ValidationError(f"label out of range for vocabulary of size {self.n_labels}")
        real = rows < self.n_labels
        unseen = np.zeros_like(real)
        unseen[real] = ~self.label_seen[rows[real]]
        return np.where(unseen, self.null_label, rows)

    def forward(self, x, t, labels=None):
        """Batch forward pass; returns (output, cache for backward)."""
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        rows = self._label_rows(labels, n)
        h = np.concatenate([x, time_embedding(t), self.embedding[rows]], axis=1)
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        return h, (acts, rows)

    def backward(self, cache, grad_out):
        """Gradients of a scalar loss given d loss / d output; same order as ``parameters()``."""
        acts, rows = cache
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads_w[i] = acts[i].T @ g
            grads_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        g_emb = np.zeros_like(self.embedding)
        np.add.at(g_emb, rows, g[:, self.in_dim - self.emb_dim :])
        out = []
        for gw, gb in zip(grads_w, grads_b):
            out += [gw, gb]
        out.append(g_emb)
        return out

    def _velocity(self, x, t, labels):
        out, _ = self.forward(x, t, labels)
        return out

    # -- serialization ----------------------------------------------------
    def to_dict(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "hidden": list(self.hidden),
            "n_labels": self.n_labels,
            "emb_dim": self.emb_dim,
            "activation": "tanh",
            "time_frequencies": TIME_FREQS.tolist(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "embedding": self.embedding.tolist(),
            "label_seen": self.label_seen.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        f = cls(d["dim"], d["hidden"], d["n_labels"], d["emb_dim"], weights=d["weights"], biases=d["biases"], embedding=d["embedding"])
        f.label_seen = np.asarray(d.get("label_seen", [True] * f.n_labels), dtype=bool)
        return f


def cfm_loss_and_grad(field: MlpField, x0, x1, t, labels=None, step=None):
    """Mean squared error between the field at ``x_t`` and the target ``x1 - x0``.

    Returns ``(loss, flat_gradient)``; the gradient is exact (backprop) and
    ordered like ``field.get_flat()``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if x0.shape != x1.shape or x0.shape[0] != t.shape[0]:
        raise ValidationError("x0, x1 and t batches are not aligned")
    if np.any((t < 0) | (t > 1)):
        raise ValidationError("t must lie in [0, 1]")
    n = x0.shape[0]
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    out, cache = field.forward(xt, t, labels)
    resid = out - (x1 - x0)
    loss = float(np.sum(resid * resid) / n)
    if not math.isfinite(loss) or not np.all(np.isfinite(out)):
        raise TrainingError("non-finite forward pass", step=step)
    grads = field.backward(cache, 2.0 * resid / n)
    return loss, np.concatenate([g.ravel() for g in grads])


def grad_check(field: MlpField, x0, x1, t, labels=None, epsilon=1e-5):
    """Max relative error between backprop and central differences.

    Relative error per parameter is ``|a - f| / max(|a|, |f|, 1e-8)``.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValidationError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    theta = field.get_flat()
    _, analytic = cfm_loss_and_grad(field, x0, x1, t, labels)
    numeric = np.empty_like(theta)
    try:
        for i in range(theta.size):
            probe = theta.copy()
            probe[i] = theta[i] + epsilon
            field.set_flat(probe)
            lp, _ = cfm_loss_and_grad(field, x0, x1, t, labels)
            probe[i] = theta[i] - epsilon
            field.set_flat(probe)
            lm, _ = cfm_loss_and_grad(field, x0, x1, t, labels)
            numeric[i] = (lp - lm) / (2.0 * epsilon)
    finally:
        field.set_flat(theta)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def ot_permutation(x0, x1):
    """Permutation ``pi`` minimising ``sum_i ||x0_i - x1_pi(i)||^2``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValidationError(f"batch shapes differ: {x0.shape} vs {x1.shape}")
    if x0.shape[0] > 256:
        raise ValidationError("minibatch OT is limited to batches of at most 256")
    diff = x0[:, None, :] - x1[None, :, :]
    return hungarian(np.einsum("ijk,ijk->ij", diff, diff))


def ot_pair(x0, x1):
    return np.asarray(x1)[ot_permutation(x0, x1)]


@dataclass
class TrainConfig:
    batch_size: int = 128
    steps: int = 20000
    lr: float = 2e-3
    lr_final: float = 2e-4
    coupling: str = "ot"  # "ot" or "independent"
    label_dropout: float = 0.1
    seed: int = 0
    hidden: tuple = (64, 64)
    emb_dim: int = 4
    rms_decay: float = 0.999
    rms_eps: float = 1e-8
    log_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if not 0.0 <= self.label_dropout <= 1.0:
            raise ValidationError("label_dropout must lie in [0, 1]")
        if self.coupling not in ("ot", "independent"):
            raise ValidationError(f"coupling must be 'ot' or 'independent', got {self.coupling!r}")
        if self.coupling == "ot" and self.batch_size > 256:
            raise ValidationError("batch_size must be <= 256 with minibatch OT coupling")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        self.hidden = tuple(self.hidden)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def train(config: TrainConfig, points, labels=None, n_labels=None) -> MlpField:
    """Fit an :class:`MlpField` with (OT-)CFM; ``loss_history`` holds per-step losses.

    The step size decays geometrically from ``lr`` to ``lr_final``. Updates
    use per-parameter second-moment scaling without momentum.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValidationError("dataset must be a non-empty (n, dim) array")
    if labels is None:
        labels = np.zeros(len(points), dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if n_labels is None:
        n_labels = int(labels.max()) + 1
    if labels.shape != (len(points),) or labels.min() < 0 or labels.max() >= n_labels:
        raise ValidationError("labels must be integers in [0, n_labels) aligned with points")

    init_rng = RngStream(config.seed, 0).generator
    rng = RngStream(config.seed, 1).generator
    field = MlpField(points.shape[1], config.hidden, n_labels, config.emb_dim, rng=init_rng)
    field.label_seen[:] = False
    params = field.parameters()
    second = [np.zeros_like(p) for p in params]
    decay_rate = math.log(config.lr_final / config.lr) / max(config.steps - 1, 1)
    history = []
    bs = config.batch_size
    for step in range(config.steps):
        idx = rng.integers(0, len(points), size=bs)
        x1 = points[idx]
        lab = labels[idx]
        x0 = rng.standard_normal(x1.shape)
        t = rng.random(bs)
        drop = rng.random(bs) < config.label_dropout
        if config.coupling == "ot":
            perm = ot_permutation(x0, x1)
            x1 = x1[perm]
            lab = lab[perm]
        lab = np.where(drop, NULL_LABEL, lab)
        field.label_seen[lab[lab != NULL_LABEL]] = True
        # during training every real label maps to its own row
        seen = field.label_seen
        field.label_seen = np.ones_like(seen)
        try:
            loss, flat = cfm_loss_and_grad(field, x0, x1, t, lab, step=step)
        finally:
            field.label_seen = seen
        history.append(loss)
        lr = config.lr * math.exp(decay_rate * step)
        corr = 1.0 - config.rms_decay ** (step + 1)
        offset = 0
        for p, s in zip(params, second):
            g = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size
            s *= config.rms_decay
            s += (1.0 - config.rms_decay) * g * g
            p -= lr * g / (np.sqrt(s / corr) + config.rms_eps)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.5f", step, loss)
    if not np.all(np.isfinite(field.get_flat())):
        raise TrainingError("parameters diverged", step=config.steps - 1)
    field.loss_history = history
    return field
