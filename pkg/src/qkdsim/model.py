"""Domain types and closed-form physics of the four-laser BB84 transmitter.

Everything here is immutable and side-effect free. Times are in seconds,
rates in Hz, losses in dB.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace

import numpy as np

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class ConfigError(ValueError):
    """Invalid configuration value. ``field`` names the offending parameter."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class Basis(enum.IntEnum):
    RECTILINEAR = 0
    DIAGONAL = 1


class Polarization(enum.IntEnum):
    """The four BB84 states. The integer value encodes ``2*basis + bit``."""

    H = 0
    V = 1
    D = 2
    A = 3

    @property
    def basis(self) -> Basis:
        return Basis(self.value >> 1)

    @property
    def bit(self) -> int:
        return self.value & 1

    @classmethod
    def from_basis_bit(cls, basis: int, bit: int) -> "Polarization":
        return cls((int(basis) << 1) | int(bit))

    def orthogonal(self) -> "Polarization":
        return Polarization(self.value ^ 1)


def basis_of(pol: np.ndarray) -> np.ndarray:
    return np.right_shift(pol, 1)


def bit_of(pol: np.ndarray) -> np.ndarray:
    return np.bitwise_and(pol, 1)


@dataclass(frozen=True)
class SystemConfig:
    """Source, channel, detector and protocol parameters.

    Defaults reproduce the 400 MHz testbed: mu=0.5, 10 dB channel, 2 dB at
    the receiver, 50 % detection efficiency, 500 cps dark counts, 65 ps
    optical pulses, 125 ps timing bins, f=1.22.
    """

    clock_rate: float = 400e6
    mean_photon_number: float = 0.5
    channel_loss_db: float = 10.0
    receiver_loss_db: float = 2.0
    detector_efficiency: float = 0.5
    dark_count_rate: float = 500.0
    optical_pulse_fwhm: float = 65e-12
    detection_jitter_fwhm: float = 747e-12
    bin_width: float = 125e-12
    dc_bias_ratio: float = 0.0
    se_rate_per_laser: float = 0.0
    optical_error_prob: float = 0.0
    ec_coefficient: float = 1.22
    sifting_ratio: float = 0.5
    dead_time: float = 0.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise ConfigError(f.name, f"must be a finite number, got {v!r}")
        if self.clock_rate <= 0:
            raise ConfigError("clock_rate", "must be > 0")
        for name in ("mean_photon_number", "channel_loss_db", "receiver_loss_db",
                     "dark_count_rate", "se_rate_per_laser", "ec_coefficient", "dead_time"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        for name in ("detector_efficiency", "optical_error_prob", "sifting_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(name, f"must lie in [0, 1], got {v}")
        if not 0.0 <= self.dc_bias_ratio < 1.0:
            raise ConfigError("dc_bias_ratio", "must lie in [0, 1) (laser stays below threshold)")
        for name in ("optical_pulse_fwhm", "detection_jitter_fwhm", "bin_width"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be > 0")
        ratio = self.slot_period / self.bin_width
        if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
            raise ConfigError("bin_width", f"must divide the slot period exactly ({ratio:.6g} bins)")

    @property
    def slot_period(self) -> float:
        return 1.0 / self.clock_rate

    @property
    def bins_per_slot(self) -> int:
        return int(round(self.slot_period / self.bin_width))

    def with_(self, **changes) -> "SystemConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class SideChannelModel:
    """Interval-dependent timing shift and intensity excess of a gain-switched pulse.

    Both effects relax as ``exp(-(interval - min_interval) / relaxation_time)``,
    where ``interval`` is the time since the same laser last fired and
    ``min_interval`` is one clock period. ``enabled=False`` models a laser
    biased close to threshold, for which every pulse looks the same.
    """

    base_offset: float = 1.25e-9
    max_temporal_offset: float = 150e-12
    relaxation_time: float = 10e-9
    max_amplitude_deviation: float = 0.3
    enabled: bool = True
    min_interval: float = 2.5e-9

    def __post_init__(self) -> None:
        if not self.relaxation_time > 0:
            raise ConfigError("relaxation_time", "must be > 0")
        if self.max_temporal_offset < 0:
            raise ConfigError("max_temporal_offset", "must be >= 0")
        if self.max_amplitude_deviation < 0:
            raise ConfigError("max_amplitude_deviation", "must be >= 0")
        if not self.min_interval > 0:
            raise ConfigError("min_interval", "must be > 0")
        if not math.isfinite(self.base_offset):
            raise ConfigError("base_offset", "must be finite")

    def with_(self, **changes) -> "SideChannelModel":
        return replace(self, **changes)

    def _relaxation(self, interval):
        interval = np.asarray(interval, dtype=float)
        if np.any(np.isnan(interval)) or np.any(interval < 0):
            raise ConfigError("interval", "must be a non-negative time")
        # allow a few ulps of rounding below the anchor
        if np.any(interval < self.min_interval * (1 - 1e-9)):
            raise ConfigError("interval", f"must be >= {self.min_interval:g} s (one slot)")
        with np.errstate(over="ignore"):
            return np.exp(-(interval - self.min_interval) / self.relaxation_time)


def temporal_offset(interval, model: SideChannelModel):
    """Shift of the pulse peak (s) for a pulse fired ``interval`` after the previous one."""
    r = model._relaxation(interval)
    if not model.enabled:
        return np.zeros_like(r)[()]
    return (model.max_temporal_offset * r)[()]


def amplitude_factor(interval, model: SideChannelModel):
    """Relative pulse energy, >= 1 and decaying back to 1 for long intervals."""
    r = model._relaxation(interval)
    if not model.enabled:
        return np.ones_like(r)[()]
    return (1.0 + model.max_amplitude_deviation * r)[()]


def pulse_waveform(t_rel, interval, model: SideChannelModel, fwhm: float):
    """Emitted intensity density (1/s) at time ``t_rel`` after the slot start.

    A Gaussian of the given FWHM centred on ``base_offset + temporal_offset``,
    scaled so that its area equals ``amplitude_factor(interval)``.
    """
    if not fwhm > 0:
        raise ConfigError("fwhm", "must be > 0")
    sigma = fwhm * FWHM_TO_SIGMA
    center = model.base_offset + temporal_offset(interval, model)
    amp = amplitude_factor(interval, model)
    z = (np.asarray(t_rel, dtype=float) - center) / sigma
    return amp * np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))


def link_transmittance(config: SystemConfig) -> float:
    """Probability that an emitted photon produces a click (channel, receiver, detector)."""
    loss = config.channel_loss_db + config.receiver_loss_db
    return 10.0 ** (-loss / 10.0) * config.detector_efficiency
