"""Asymptotic decoy-state key rate, temporal-filter sweep and noise calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .engine import DetectionRecord, RngSeed, simulate_run
from .model import SideChannelModel, SystemConfig
from .sifting import SiftedStats, apply_window, best_window, qber_sigma, squash_and_sift

DEFAULT_WIDTHS = tuple(round(w, 12) for w in np.arange(0.5e-9, 2.5e-9 + 1e-13, 0.25e-9))

CALIBRATION_KNOBS = ("optical_error_prob", "se_rate_per_laser")


class CalibrationError(RuntimeError):
    """Calibration target not reachable, or QBER not monotone in the knob."""

    def __init__(self, message: str, bracket: tuple[float, float] | None = None):
        super().__init__(message)
        self.bracket = bracket


def binary_entropy(e):
    """Shannon entropy of a Bernoulli(e) variable in bits, with H(0) = H(1) = 0.

    >>> float(binary_entropy(0.5))
    1.0
    """
    e = np.asarray(e, dtype=float)
    if np.any(np.isnan(e)) or np.any((e < 0) | (e > 1)):
        raise ValueError("binary_entropy is defined on [0, 1]")
    inner = (e > 0) & (e < 1)
    safe = np.where(inner, e, 0.5)
    h = -safe * np.log2(safe) - (1 - safe) * np.log2(1 - safe)
    return np.where(inner, h, 0.0)[()]


@dataclass(frozen=True)
class KeyRateInputs:
    q: float
    mu: float
    eta: float
    e_det: float
    f: float = 1.22
    clock_rate: float = 400e6
    retained_fraction: float = 1.0

    def __post_init__(self) -> None:
        for name in ("q", "eta", "retained_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.e_det <= 0.5:
            raise ValueError(f"e_det must lie in [0, 0.5], got {self.e_det}")
        if self.mu < 0 or self.f < 0 or self.clock_rate <= 0:
            raise ValueError("mu and f must be >= 0, clock_rate > 0")


def secure_key_rate(inputs: KeyRateInputs) -> float:
    """Secure key rate in bit/s, clamped at zero.

    Per pulse: q * retained * (eta*mu*exp(-mu)*(1 - H(e)) - eta*mu*f*H(e)).
    """
    h = float(binary_entropy(inputs.e_det))
    gain = inputs.eta * inputs.mu
    per_pulse = inputs.q * inputs.retained_fraction * (
        -gain * inputs.f * h + gain * math.exp(-inputs.mu) * (1.0 - h))
    return max(per_pulse, 0.0) * inputs.clock_rate


@dataclass(frozen=True)
class SweepRow:
    width: float
    start_bin: int
    qber: float
    sifted_rate: float
    secure_rate: float
    stats: SiftedStats


@dataclass(frozen=True)
class WindowSweepResult:
    rows: tuple[SweepRow, ...]
    optimal_width: float

    @property
    def optimal(self) -> SweepRow:
        return self.row(self.optimal_width)

    def row(self, width: float) -> SweepRow:
        for r in self.rows:
            if math.isclose(r.width, width, rel_tol=1e-9):
                return r
        raise KeyError(width)


def window_key_rate(stats: SiftedStats, unfiltered_detections: int, n_slots: int,
                    config: SystemConfig) -> float:
    """Secure rate from measured sifted flux and QBER.

    q, eta*mu and the retained fraction are all taken from the data, so their
    product equals the measured sifted clicks per slot.
    """
    if stats.no_data or config.mean_photon_number == 0 or stats.detections == 0:
        return 0.0
    eta_emp = unfiltered_detections / (n_slots * config.mean_photon_number)
    inputs = KeyRateInputs(
        q=stats.sifted_count / stats.detections,
        mu=config.mean_photon_number,
        eta=min(eta_emp, 1.0),
        e_det=min(stats.qber, 0.5),
        f=config.ec_coefficient,
        clock_rate=config.clock_rate,
        retained_fraction=stats.retained_fraction,
    )
    return secure_key_rate(inputs)


def sweep_windows(record: DetectionRecord, config: SystemConfig,
                  widths: Sequence[float] = DEFAULT_WIDTHS,
                  rng: RngSeed = RngSeed()) -> WindowSweepResult:
    """Evaluate QBER, sifted and secure rate for each gate width at its best placement."""
    if len(widths) == 0:
        raise ValueError("widths must be nonempty")
    rows = []
    for width in sorted(widths):
        window = best_window(record, width, config.bin_width)
        stats = squash_and_sift(apply_window(record, window), rng)
        secure = window_key_rate(stats, record.n_unfiltered, record.n_slots, config)
        rows.append(SweepRow(window.width, window.start_bin, stats.qber,
                             stats.sifted_rate, secure, stats))
    # widest among equals
    best = max(rows, key=lambda r: (r.secure_rate, r.width))
    assert all(best.secure_rate >= r.secure_rate for r in rows)
    return WindowSweepResult(tuple(rows), best.width)


@dataclass(frozen=True)
class CalibrationProbe:
    value: float
    qber: float
    sigma: float


@dataclass(frozen=True)
class Calibration:
    knob: str
    value: float
    qber: float
    probes: tuple[CalibrationProbe, ...] = field(default_factory=tuple)


_INITIAL_UPPER = {"optical_error_prob": 0.05, "se_rate_per_laser": 1e-3}
_MAX_UPPER = {"optical_error_prob": 1.0, "se_rate_per_laser": 1.0}


def calibrate(config: SystemConfig, target_qber_full_window: float, knob: str,
              rng: RngSeed, *, side_channel: SideChannelModel | None = None,
              n_slots: int = 10**7, tolerance: float = 2e-4, threads: int = 1,
              max_probes: int = 60,
              on_probe: Callable[[CalibrationProbe], None] | None = None) -> Calibration:
    """Bisect ``knob`` until the full-window QBER is within ``tolerance`` of the target.

    Every probe reruns the simulator with the same seed, so successive probes
    share their random numbers and the QBER moves smoothly with the knob. A
    probe falling outside its bracket's QBER values by more than three
    standard errors aborts the search as non-monotone.
    """
    if knob not in CALIBRATION_KNOBS:
        raise ValueError(f"knob must be one of {CALIBRATION_KNOBS}, got {knob!r}")
    if n_slots < 10**7:
        raise ValueError("calibration needs at least 1e7 slots per probe")
    side_channel = side_channel or SideChannelModel(min_interval=config.slot_period)
    probes: list[CalibrationProbe] = []

    def probe(value: float) -> CalibrationProbe:
        if len(probes) >= max_probes:
            raise CalibrationError(f"no convergence after {max_probes} probes", (lo, hi))
        res = simulate_run(config.with_(**{knob: value}), side_channel, n_slots, rng, threads)
        st = squash_and_sift(res.record, rng)
        p = CalibrationProbe(value, st.qber, qber_sigma(st.qber, st.sifted_count))
        probes.append(p)
        if on_probe:
            on_probe(p)
        return p

    def done(p: CalibrationProbe) -> Calibration:
        return Calibration(knob, p.value, p.qber, tuple(probes))

    lo, hi = 0.0, _INITIAL_UPPER[knob]
    p_lo = probe(lo)
    if abs(p_lo.qber - target_qber_full_window) <= tolerance:
        return done(p_lo)
    if p_lo.qber > target_qber_full_window:
        raise CalibrationError(
            f"QBER {p_lo.qber:.6g} at {knob}=0 already exceeds target "
            f"{target_qber_full_window:.6g}", (lo, hi))
    p_hi = probe(hi)
    while p_hi.qber < target_qber_full_window - tolerance:
        if hi >= _MAX_UPPER[knob]:
            raise CalibrationError(
                f"target {target_qber_full_window:.6g} unreachable: QBER "
                f"{p_hi.qber:.6g} at {knob}={hi:g}", (lo, hi))
        lo, p_lo = hi, p_hi
        hi = min(2 * hi, _MAX_UPPER[knob])
        p_hi = probe(hi)
    if abs(p_hi.qber - target_qber_full_window) <= tolerance:
        return done(p_hi)
    while True:
        mid = 0.5 * (lo + hi)
        p = probe(mid)
        slack = 3 * p.sigma
        if not p_lo.qber - slack <= p.qber <= p_hi.qber + slack:
            raise CalibrationError(
                f"QBER not monotone in {knob}: {p.qber:.6g} at {mid:g} outside "
                f"[{p_lo.qber:.6g}, {p_hi.qber:.6g}]", (lo, hi))
        if abs(p.qber - target_qber_full_window) <= tolerance:
            return done(p)
        if p.qber < target_qber_full_window:
            lo, p_lo = mid, p
        else:
            hi, p_hi = mid, p
