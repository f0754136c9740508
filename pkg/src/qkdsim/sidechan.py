"""Timing side channel of the multi-laser transmitter: per-interval pulse shapes and their
distinguishability."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .model import FWHM_TO_SIGMA, SideChannelModel, SystemConfig, amplitude_factor, pulse_waveform

DEFAULT_INTERVALS = tuple(2.5e-9 * k for k in range(1, 17))

_GRID_STEP = 1e-12


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IntervalWaveformSet:
    intervals: tuple[float, ...]
    waveforms: np.ndarray  # (len(intervals), bins_per_slot), rows sum to 1

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.intervals, self.intervals[1:])):
            raise ValueError("intervals must be strictly increasing")
        if not np.allclose(self.waveforms.sum(axis=1), 1.0):
            raise ValueError("waveforms must be normalized")

    def tv_matrix(self) -> np.ndarray:
        w = self.waveforms
        return 0.5 * np.abs(w[:, None, :] - w[None, :, :]).sum(axis=2)


def waveform_for_interval(interval: float, model: SideChannelModel,
                          config: SystemConfig) -> np.ndarray:
    """Detected arrival-time distribution over the slot's bins for one interval.

    The emitted pulse is sampled on a 1 ps grid spanning three slots,
    convolved with the Gaussian detection jitter, folded back into one slot
    (spill-over wraps like in the simulator) and integrated per bin.
    """
    period = config.slot_period
    n = int(round(3 * period / _GRID_STEP))
    t = -period + (np.arange(n) + 0.5) * _GRID_STEP
    mass = pulse_waveform(t, interval, model, config.optical_pulse_fwhm) * _GRID_STEP

    sigma_j = config.detection_jitter_fwhm * FWHM_TO_SIGMA
    half = int(math.ceil(6 * sigma_j / _GRID_STEP))
    tk = np.arange(-half, half + 1) * _GRID_STEP
    kernel = np.exp(-0.5 * (tk / sigma_j) ** 2)
    kernel /= kernel.sum()
    detected = np.clip(fftconvolve(mass, kernel, mode="same"), 0.0, None)

    nb = config.bins_per_slot
    bins = np.minimum((np.mod(t, period) / config.bin_width).astype(np.int64), nb - 1)
    w = np.bincount(bins, weights=detected, minlength=nb)
    return w / w.sum()


def interval_waveforms(model: SideChannelModel, config: SystemConfig,
                       intervals=DEFAULT_INTERVALS) -> IntervalWaveformSet:
    intervals = tuple(float(i) for i in intervals)
    w = np.array([waveform_for_interval(i, model, config) for i in intervals])
    return IntervalWaveformSet(intervals, w)


def distinguishability(w1, w2) -> float:
    """Total variation distance between two binned distributions."""
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    if w1.shape != w2.shape:
        raise ShapeError(f"shape mismatch: {w1.shape} vs {w2.shape}")
    return float(0.5 * np.abs(w1 - w2).sum())


def guess_probability(tv: float) -> float:
    """Best single-shot probability of telling two pulses apart from timing alone."""
    return 0.5 * (1.0 + tv)


@dataclass(frozen=True, eq=False)
class ClosureReport:
    passed: bool
    max_tv: float
    max_amplitude_deviation: float
    epsilon: float
    waveforms: IntervalWaveformSet

    @property
    def tv_matrix(self) -> np.ndarray:
        return self.waveforms.tv_matrix()


def certify_closure(model: SideChannelModel, config: SystemConfig, epsilon: float = 0.05,
                    intervals=DEFAULT_INTERVALS) -> ClosureReport:
    """Pass iff both the worst pairwise timing TV and the worst |a - 1| are below epsilon."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    ws = interval_waveforms(model, config, intervals)
    max_tv = float(ws.tv_matrix().max())
    amp_dev = float(np.max(np.abs(amplitude_factor(np.array(ws.intervals), model) - 1.0)))
    return ClosureReport(max_tv < epsilon and amp_dev < epsilon, max_tv, amp_dev, epsilon, ws)
