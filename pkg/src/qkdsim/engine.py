"""Seeded slot-level Monte Carlo of Alice's transmitter and Bob's four detectors.

The run is cut into fixed blocks of ``BLOCK_SLOTS`` slots. Every block draws
from its own counter-based stream keyed by ``(seed, purpose, block, sub)``,
so the result does not depend on how many worker threads process the blocks.
"""
from __future__ import annotations

import enum
import functools
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import (
    FWHM_TO_SIGMA,
    ConfigError,
    SideChannelModel,
    SystemConfig,
    amplitude_factor,
    basis_of,
    bit_of,
    link_transmittance,
    temporal_offset,
)

BLOCK_SLOTS = 1 << 22
N_CHANNELS = 4
# interval counter saturates here; exp(-65534 slots / tau) is zero for any sane tau
_MAX_INTERVAL_SLOTS = np.iinfo(np.uint16).max


class Origin(enum.IntEnum):
    SIGNAL = 0
    SPONT_EMISSION = 1
    DARK = 2


class _Stream(enum.IntEnum):
    ALICE = 0
    SIGNAL = 1
    PHOTON = 2
    SE_COUNT = 3
    SE_ATTR = 4
    DARK_COUNT = 5
    DARK_ATTR = 6
    SQUASH = 7


@dataclass(frozen=True)
class RngSeed:
    seed: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {self.seed!r}")

    def stream(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AliceSequence:
    """Per-slot polarization and the slots elapsed since that laser last fired.

    ``interval_slots == 0`` marks the first firing of a laser (fully relaxed).
    """

    polarization: np.ndarray
    interval_slots: np.ndarray

    def __len__(self) -> int:
        return len(self.polarization)

    @property
    def bit(self) -> np.ndarray:
        return bit_of(self.polarization)

    @property
    def basis(self) -> np.ndarray:
        return basis_of(self.polarization)

    def interval(self, slot_period: float) -> np.ndarray:
        iv = self.interval_slots.astype(float) * slot_period
        iv[self.interval_slots == 0] = np.inf
        return iv


def _alice_block(rng: RngSeed, block: int, n: int) -> np.ndarray:
    return rng.stream(_Stream.ALICE, block).integers(0, 4, size=n, dtype=np.uint8)


def _fill_intervals(pol: np.ndarray, start: int, last: np.ndarray, out: np.ndarray) -> None:
    # stable sort groups each laser's firings in time order
    order = np.argsort(pol, kind="stable")
    bounds = np.concatenate(([0], np.cumsum(np.bincount(pol, minlength=4))))
    gaps = np.diff(order, prepend=0)
    for laser in range(4):
        lo, hi = bounds[laser], bounds[laser + 1]
        if lo == hi:
            continue
        first = order[lo] + start
        gaps[lo] = first - last[laser] if last[laser] >= 0 else 0
        last[laser] = order[hi - 1] + start
    out[start + order] = np.minimum(gaps, _MAX_INTERVAL_SLOTS)


@functools.lru_cache(maxsize=1)
def generate_alice_sequence(n_slots: int, rng: RngSeed) -> AliceSequence:
    """Uniform random polarization per slot, plus the per-laser firing interval."""
    if n_slots < 0:
        raise ConfigError("n_slots", "must be >= 0")
    pol = np.empty(n_slots, dtype=np.uint8)
    intervals = np.zeros(n_slots, dtype=np.uint16)
    last = np.full(4, -1, dtype=np.int64)
    for b, start in enumerate(range(0, n_slots, BLOCK_SLOTS)):
        stop = min(start + BLOCK_SLOTS, n_slots)
        pol[start:stop] = _alice_block(rng, b, stop - start)
        _fill_intervals(pol[start:stop], start, last, intervals)
    return AliceSequence(_frozen(pol), _frozen(intervals))


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    """Alice's per-slot truth and every detection Bob registered.

    Detections are sorted by (slot, channel, time_bin, origin). ``origin`` is
    simulation ground truth and must only be used for diagnostics.
    ``n_unfiltered`` is the detection count before any temporal window was
    applied, so the retained fraction survives chained filtering.
    """

    n_slots: int
    slot_period: float
    bins_per_slot: int
    alice: AliceSequence
    slot: np.ndarray
    channel: np.ndarray
    time_bin: np.ndarray
    origin: np.ndarray
    n_unfiltered: int = -1

    def __post_init__(self) -> None:
        if self.n_unfiltered < 0:
            object.__setattr__(self, "n_unfiltered", len(self.slot))
        if len(self.slot) and (self.slot.max() >= self.n_slots or self.slot.min() < 0):
            raise ValueError("detection slot index out of range")
        if len(self.time_bin) and self.time_bin.max() >= self.bins_per_slot:
            raise ValueError("time bin out of range")

    @property
    def n_detections(self) -> int:
        return len(self.slot)

    @property
    def clock_rate(self) -> float:
        return 1.0 / self.slot_period

    def select(self, mask: np.ndarray) -> "DetectionRecord":
        return DetectionRecord(
            self.n_slots, self.slot_period, self.bins_per_slot, self.alice,
            _frozen(self.slot[mask]), _frozen(self.channel[mask]),
            _frozen(self.time_bin[mask]), _frozen(self.origin[mask]),
            self.n_unfiltered,
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.n_slots, self.bins_per_slot, self.n_unfiltered]).tobytes())
        h.update(np.float64(self.slot_period).tobytes())
        for a in (self.alice.polarization, self.alice.interval_slots,
                  self.slot, self.channel, self.time_bin, self.origin):
            h.update(a.tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class SlotHistogram:
    """Detection counts per (channel, time bin) within a slot."""

    counts: np.ndarray
    bin_width: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def bins_per_slot(self) -> int:
        return self.counts.shape[1]

    def normalized(self) -> np.ndarray:
        t = self.total
        return self.counts / t if t else np.zeros(self.counts.shape)

    def profile(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def lobe_fwhm(self) -> float:
        """FWHM (s) of the channel-summed detection lobe above its floor.

        The floor is the smallest bin; half-maximum crossings are linearly
        interpolated between bin centres.
        """
        p = self.profile().astype(float)
        if p.max() <= p.min():
            return float("nan")
        peak = int(np.argmax(p))
        half = p.min() + 0.5 * (p[peak] - p.min())
        i = peak
        while i > 0 and p[i - 1] > half:
            i -= 1
        left = i - 1 + (half - p[i - 1]) / (p[i] - p[i - 1]) if i > 0 else -0.5
        j = peak
        while j < len(p) - 1 and p[j + 1] > half:
            j += 1
        right = j + (p[j] - half) / (p[j] - p[j + 1]) if j < len(p) - 1 else len(p) - 0.5
        return (right - left) * self.bin_width


@dataclass(frozen=True, eq=False)
class ScenarioResult:
    record: DetectionRecord
    histogram: SlotHistogram
    config_echo: SystemConfig
    side_channel: SideChannelModel
    seed: RngSeed = field(default_factory=RngSeed)


def build_histogram(record: DetectionRecord, config: SystemConfig) -> SlotHistogram:
    nb = record.bins_per_slot
    flat = record.channel.astype(np.int64) * nb + record.time_bin
    counts = np.bincount(flat, minlength=N_CHANNELS * nb).reshape(N_CHANNELS, nb)
    return SlotHistogram(_frozen(counts.astype(np.int64)), config.bin_width)


def route_photons(pol: np.ndarray, u: np.ndarray, optical_error_prob: float) -> np.ndarray:
    """Passive-basis BB84 receiver: map a photon of polarization ``pol`` to a detector.

    ``u`` is a uniform variate. [0, .25) and [.25, .5) go to the two detectors
    of the conjugate basis, [.5, .5 + e/2) to the orthogonal detector of the
    correct basis, the rest to the matching detector. Raising ``e`` only ever
    moves photons from the matching to the orthogonal detector.
    """
    pol = np.asarray(pol, dtype=np.uint8)
    conj = np.bitwise_xor(pol, 2) & 2
    det = np.where(u < 0.5, conj | (u >= 0.25), pol)
    wrong = (u >= 0.5) & (u < 0.5 + 0.5 * optical_error_prob)
    det = np.where(wrong, np.bitwise_xor(pol, 1), det)
    return det.astype(np.uint8)


def _coupled_poisson_count(gen: np.random.Generator, lam: float) -> int:
    """Poisson(lam) as the number of unit-rate arrivals before ``lam``.

    Drawn from a fixed stream, so a larger ``lam`` keeps every event of a
    smaller one and only adds new ones.
    """
    if lam <= 0:
        return 0
    n, total = 0, 0.0
    while True:
        k = int(lam - total + 6.0 * math.sqrt(lam - total + 1.0) + 16)
        arrivals = total + np.cumsum(-np.log1p(-gen.random(k)))
        inside = int(np.searchsorted(arrivals, lam, side="left"))
        if inside < k:
            return n + inside
        n += k
        total = float(arrivals[-1])


@dataclass
class _BlockOut:
    slot: np.ndarray
    channel: np.ndarray
    time_bin: np.ndarray
    origin: np.ndarray
    t_abs: np.ndarray


def _bin_times(emit_slot: np.ndarray, t_rel: np.ndarray, period: float, bin_width: float, nb: int):
    shift = np.floor(t_rel / period)
    rel = t_rel - shift * period
    tb = np.clip(np.floor(rel / bin_width), 0, nb - 1).astype(np.uint8)
    return emit_slot + shift.astype(np.int64), tb


def _interval_tables(cfg, sc, eta):
    """Photon mean and vacuum probability indexed by the uint16 interval counter."""
    grid = np.arange(_MAX_INTERVAL_SLOTS + 1, dtype=float) * cfg.slot_period
    grid[0] = np.inf
    lam = cfg.mean_photon_number * eta * amplitude_factor(grid, sc)
    return lam, np.exp(-lam), temporal_offset(grid, sc)


def _signal_block(cfg, sc, rng, b, start, pol, ivs, tables):
    n = len(pol)
    period = cfg.slot_period
    lam_t, p0_t, offset_t = tables
    u = rng.stream(_Stream.SIGNAL, b).random(n)
    hit = np.flatnonzero(u >= p0_t[ivs])
    if hit.size == 0:
        return None
    # photon number by inverse CDF of Poisson(lam), only for non-vacuum slots
    uh, lh = u[hit], lam_t[ivs[hit]]
    term = p0_t[ivs[hit]].copy()
    cdf = term.copy()
    nph = np.zeros(hit.size, dtype=np.int64)
    k = 0
    active = np.ones(hit.size, dtype=bool)
    while active.any():
        nph += active
        k += 1
        term *= lh / k
        cdf += term
        active &= uh >= cdf
        if k > 200:  # cdf saturated in floating point
            break
    emit = np.repeat(hit, nph)
    m = emit.size
    g = rng.stream(_Stream.PHOTON, b)
    z = g.standard_normal((m, 2))
    ur = g.random(m)
    det = route_photons(pol[emit], ur, cfg.optical_error_prob)
    t_rel = (sc.base_offset + offset_t[ivs[emit]]
             + cfg.optical_pulse_fwhm * FWHM_TO_SIGMA * z[:, 0]
             + cfg.detection_jitter_fwhm * FWHM_TO_SIGMA * z[:, 1])
    # threshold detector: one click per detector per pulse, at the first photon
    order = np.lexsort((t_rel, det, emit))
    key = emit[order] * N_CHANNELS + det[order]
    first = np.ones(m, dtype=bool)
    first[1:] = key[1:] != key[:-1]
    keep = order[first]
    emit, det, t_rel = emit[keep], det[keep], t_rel[keep]
    slot, tb = _bin_times(emit + start, t_rel, period, cfg.bin_width, cfg.bins_per_slot)
    t_abs = (emit + start) * period + t_rel
    return _BlockOut(slot, det, tb, np.full(len(slot), Origin.SIGNAL, np.uint8), t_abs)


def _uniform_events(count_gen, attr_gen, lam, n, start, cfg):
    count = _coupled_poisson_count(count_gen, lam)
    attrs = attr_gen.random((count, 2))
    pos = attrs[:, 0] * n
    slot_rel = np.minimum(np.floor(pos).astype(np.int64), n - 1)
    frac = pos - slot_rel
    tb = np.minimum(np.floor(frac * cfg.bins_per_slot), cfg.bins_per_slot - 1).astype(np.uint8)
    t_abs = (start + pos) * cfg.slot_period
    return slot_rel + start, tb, t_abs, attrs[:, 1]


def _noise_block(cfg, rng, b, start, n, eta):
    parts = []
    # spontaneous emission: every laser, every slot, polarized along its own axis
    lam_se = cfg.se_rate_per_laser * eta * n
    for laser in range(4):
        if lam_se <= 0:
            break
        slot, tb, t_abs, u = _uniform_events(
            rng.stream(_Stream.SE_COUNT, b, laser), rng.stream(_Stream.SE_ATTR, b, laser),
            lam_se, n, start, cfg)
        det = route_photons(np.full(len(slot), laser, np.uint8), u, cfg.optical_error_prob)
        parts.append(_BlockOut(slot, det, tb, np.full(len(slot), Origin.SPONT_EMISSION, np.uint8), t_abs))
    lam_dark = cfg.dark_count_rate * cfg.slot_period * n
    for ch in range(N_CHANNELS):
        if lam_dark <= 0:
            break
        slot, tb, t_abs, _ = _uniform_events(
            rng.stream(_Stream.DARK_COUNT, b, ch), rng.stream(_Stream.DARK_ATTR, b, ch),
            lam_dark, n, start, cfg)
        parts.append(_BlockOut(slot, np.full(len(slot), ch, np.uint8), tb,
                               np.full(len(slot), Origin.DARK, np.uint8), t_abs))
    return parts


def _apply_dead_time(out: _BlockOut, dead_time: float) -> np.ndarray:
    keep = np.zeros(len(out.slot), dtype=bool)
    for ch in range(N_CHANNELS):
        idx = np.flatnonzero(out.channel == ch)
        idx = idx[np.argsort(out.t_abs[idx], kind="stable")]
        t = out.t_abs[idx].tolist()
        ready = -math.inf
        for i, ti in zip(idx.tolist(), t):
            if ti >= ready:
                keep[i] = True
                ready = ti + dead_time
    return keep


def simulate_run(config: SystemConfig, side_channel: SideChannelModel, n_slots: int,
                 rng: RngSeed, threads: int = 1) -> ScenarioResult:
    """Simulate ``n_slots`` clock slots and return the detections plus their histogram.

    Signal, spontaneous-emission and dark-count photons are generated
    independently and all recorded; resolving multi-click slots is left to
    sifting. Jittered clicks that leave their emission slot are booked in the
    slot they land in.
    """
    if not isinstance(n_slots, (int, np.integer)) or n_slots < 1:
        raise ConfigError("n_slots", "n_slots must be ≥ 1")
    config.validate()
    # cached: calibration re-runs the same sequence with one knob changed
    alice = generate_alice_sequence(int(n_slots), rng)
    eta = link_transmittance(config)
    starts = list(range(0, n_slots, BLOCK_SLOTS))
    tables = _interval_tables(config, side_channel, eta)

    def work(b: int) -> list[_BlockOut]:
        start = starts[b]
        stop = min(start + BLOCK_SLOTS, n_slots)
        pol = alice.polarization[start:stop]
        parts = []
        if config.mean_photon_number > 0 and eta > 0:
            sig = _signal_block(config, side_channel, rng, b, start, pol,
                                alice.interval_slots[start:stop], tables)
            if sig is not None:
                parts.append(sig)
        parts.extend(_noise_block(config, rng, b, start, stop - start, eta))
        return parts

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(work, range(len(starts))))
    else:
        chunks = [work(b) for b in range(len(starts))]
    parts = [p for chunk in chunks for p in chunk]

    def cat(name, dtype):
        arrs = [getattr(p, name) for p in parts]
        return np.concatenate(arrs).astype(dtype, copy=False) if arrs else np.empty(0, dtype)

    merged = _BlockOut(cat("slot", np.int64), cat("channel", np.uint8), cat("time_bin", np.uint8),
                       cat("origin", np.uint8), cat("t_abs", np.float64))
    inside = (merged.slot >= 0) & (merged.slot < n_slots)
    if config.dead_time > 0:
        inside &= _apply_dead_time(merged, config.dead_time)
    order = np.lexsort((merged.origin, merged.time_bin, merged.channel, merged.slot))
    order = order[inside[order]]
    record = DetectionRecord(
        int(n_slots), config.slot_period, config.bins_per_slot, alice,
        _frozen(merged.slot[order]), _frozen(merged.channel[order]),
        _frozen(merged.time_bin[order]), _frozen(merged.origin[order]),
    )
    return ScenarioResult(record, build_histogram(record, config), config, side_channel, rng)


def expected_detections_per_slot(config: SystemConfig, mean_amplitude: float = 1.0) -> float:
    """First-order mean detections per slot: signal clicks + SE + dark."""
    eta = link_transmittance(config)
    return (-math.expm1(-config.mean_photon_number * eta * mean_amplitude)
            + 4 * config.se_rate_per_laser * eta
            + N_CHANNELS * config.dark_count_rate * config.slot_period)


def mean_amplitude_factor(side_channel: SideChannelModel, slot_period: float) -> float:
    """Average amplitude factor for uniformly random lasers (geometric intervals)."""
    if not side_channel.enabled:
        return 1.0
    k = np.arange(1, 2000)
    w = 0.25 * 0.75 ** (k - 1)
    return float(np.sum(w * amplitude_factor(k * slot_period, side_channel)))
