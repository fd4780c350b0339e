"""Kinetic path energy diagnostics for flow-matching samplers."""

__version__ = "0.1.0"

from .errors import IntegrityError, IntegrationError, NumericError, TrainingError, ValidationError  # noqa: E402
from .fields import ConstantField, GaussianMixtureField, GaussianOTField, cfg_mix, scaling_flow  # noqa: E402
from .kernels import BACKEND  # noqa: E402
from .sampler import integrate, kpe_of, sample_batch, tercile_bins  # noqa: E402

__all__ = [
    "BACKEND",
    "ConstantField",
    "GaussianMixtureField",
    "GaussianOTField",
    "IntegrationError",
    "IntegrityError",
    "NumericError",
    "TrainingError",
    "ValidationError",
    "cfg_mix",
    "integrate",
    "kpe_of",
    "sample_batch",
    "scaling_flow",
    "tercile_bins",
]
