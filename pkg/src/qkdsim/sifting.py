"""Bob's post-processing front end: temporal gate, squashing, basis sifting, QBER."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import DetectionRecord, Origin, RngSeed


@dataclass(frozen=True)
class TimeWindow:
    """Inclusive range of time bins accepted inside every slot."""

    start_bin: int
    end_bin: int
    bin_width: float
    bins_per_slot: int

    def __post_init__(self) -> None:
        if not 0 <= self.start_bin <= self.end_bin < self.bins_per_slot:
            raise ValueError(
                f"window [{self.start_bin}, {self.end_bin}] outside 0..{self.bins_per_slot - 1}")

    @property
    def n_bins(self) -> int:
        return self.end_bin - self.start_bin + 1

    @property
    def width(self) -> float:
        return self.n_bins * self.bin_width

    @classmethod
    def full(cls, bins_per_slot: int, bin_width: float) -> "TimeWindow":
        return cls(0, bins_per_slot - 1, bin_width, bins_per_slot)

    @classmethod
    def of_width(cls, width: float, start_bin: int, bin_width: float,
                 bins_per_slot: int) -> "TimeWindow":
        return cls(start_bin, start_bin + bins_for_width(width, bin_width) - 1,
                   bin_width, bins_per_slot)


def bins_for_width(width: float, bin_width: float) -> int:
    k = width / bin_width
    if abs(k - round(k)) > 1e-6 or round(k) < 1:
        raise ValueError(f"width {width:g} s is not a whole number of {bin_width:g} s bins")
    return int(round(k))


@dataclass(frozen=True)
class SiftedStats:
    sifted_count: int
    error_count: int
    qber: float
    sifted_rate: float
    retained_fraction: float
    detections: int
    clicked_slots: int
    no_data: bool = False


@dataclass(frozen=True)
class QberDecomposition:
    """Share of the QBER owed to each detection origin; shares sum to ``total``."""

    total: float
    signal: float
    spont_emission: float
    dark: float
    sifted_count: int
    no_data: bool = False

    def by_origin(self) -> dict[Origin, float]:
        return {Origin.SIGNAL: self.signal, Origin.SPONT_EMISSION: self.spont_emission,
                Origin.DARK: self.dark}


def apply_window(record: DetectionRecord, window: TimeWindow) -> DetectionRecord:
    """Keep only detections whose time bin falls inside ``window``."""
    if window.bins_per_slot != record.bins_per_slot:
        raise ValueError("window and record disagree on bins per slot")
    tb = record.time_bin
    return record.select((tb >= window.start_bin) & (tb <= window.end_bin))


def best_window(record: DetectionRecord, width: float, bin_width: float) -> TimeWindow:
    """Placement of a ``width`` gate that keeps the most detections (first one on ties)."""
    nb = record.bins_per_slot
    k = bins_for_width(width, bin_width)
    if k > nb:
        raise ValueError(f"width {width:g} s exceeds the slot")
    profile = np.bincount(record.time_bin, minlength=nb).astype(np.int64)
    sums = np.convolve(profile, np.ones(k, dtype=np.int64), mode="valid")
    start = int(np.argmax(sums))
    return TimeWindow(start, start + k - 1, bin_width, nb)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _squash_keys(record: DetectionRecord, rng: RngSeed) -> np.ndarray:
    # keyed on what Bob observes, so a detection's key survives filtering
    ident = (record.slot.astype(np.uint64) * np.uint64(4 * 256)
             + record.channel.astype(np.uint64) * np.uint64(256)
             + record.time_bin.astype(np.uint64))
    with np.errstate(over="ignore"):
        return _splitmix64(ident ^ _splitmix64(np.array([rng.seed], dtype=np.uint64)))


def _resolve(record: DetectionRecord, rng: RngSeed):
    """Squash each clicked slot to one detection; return its index and sift/error masks."""
    if record.n_detections == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.astype(bool), empty.astype(bool)
    order = np.lexsort((_squash_keys(record, rng), record.slot))
    s = record.slot[order]
    last = np.ones(len(s), dtype=bool)
    last[:-1] = s[1:] != s[:-1]
    chosen = order[last]
    ch = record.channel[chosen]
    pol = record.alice.polarization[record.slot[chosen]]
    sifted = (ch >> 1) == (pol >> 1)
    error = sifted & ((ch & 1) != (pol & 1))
    return chosen, sifted, error


def squash_and_sift(record: DetectionRecord, rng: RngSeed) -> SiftedStats:
    """Resolve multi-clicks uniformly at random, sift on basis and count bit errors."""
    chosen, sifted, error = _resolve(record, rng)
    n_sift = int(sifted.sum())
    n_err = int(error.sum())
    retained = record.n_detections / record.n_unfiltered if record.n_unfiltered else 0.0
    return SiftedStats(
        sifted_count=n_sift,
        error_count=n_err,
        qber=n_err / n_sift if n_sift else 0.0,
        sifted_rate=n_sift / record.n_slots * record.clock_rate,
        retained_fraction=retained,
        detections=record.n_detections,
        clicked_slots=len(chosen),
        no_data=n_sift == 0,
    )


def qber_decomposition(record: DetectionRecord, window: TimeWindow,
                       rng: RngSeed) -> QberDecomposition:
    """Split the windowed QBER by the ground-truth origin of each resolved click."""
    windowed = apply_window(record, window)
    chosen, sifted, error = _resolve(windowed, rng)
    n_sift = int(sifted.sum())
    if n_sift == 0:
        return QberDecomposition(0.0, 0.0, 0.0, 0.0, 0, no_data=True)
    err_origin = windowed.origin[chosen[error]]
    share = np.bincount(err_origin, minlength=len(Origin)) / n_sift
    return QberDecomposition(
        total=float(share.sum()),
        signal=float(share[Origin.SIGNAL]),
        spont_emission=float(share[Origin.SPONT_EMISSION]),
        dark=float(share[Origin.DARK]),
        sifted_count=n_sift,
    )


def qber_sigma(qber: float, sifted_count: int) -> float:
    """Binomial standard error of a QBER estimate."""
    if sifted_count <= 0:
        return math.inf
    return math.sqrt(max(qber * (1 - qber), 1.0 / sifted_count) / sifted_count)
