"""Score matching versus tempered generalized score matching on Gaussian mixtures."""

from .mixture import SharedCovMixture, DerivativeBundle, MixtureError, symmetric_mixture
from .temper import TemperatureSchedule, TemperedSample, noise_channel, schedule_for

__version__ = "0.1.0"

__all__ = [
    "SharedCovMixture", "DerivativeBundle", "MixtureError", "symmetric_mixture",
    "TemperatureSchedule", "TemperedSample", "noise_channel", "schedule_for",
]
