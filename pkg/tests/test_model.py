import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from qkdsim.model import (
    ConfigError,
    Polarization,
    SideChannelModel,
    SystemConfig,
    amplitude_factor,
    link_transmittance,
    pulse_waveform,
    temporal_offset,
)

NS, PS = 1e-9, 1e-12
SIGMA_65 = 65 * PS / (2 * math.sqrt(2 * math.log(2)))


def test_default_config():
    cfg = SystemConfig()
    assert cfg.clock_rate == 400e6
    assert cfg.bins_per_slot == 20
    assert cfg.slot_period == pytest.approx(2.5 * NS)


@pytest.mark.parametrize("field,value", [
    ("clock_rate", 0.0),
    ("mean_photon_number", -0.1),
    ("channel_loss_db", -1.0),
    ("detector_efficiency", 1.5),
    ("optical_error_prob", -0.01),
    ("dc_bias_ratio", 1.0),
    ("bin_width", 300 * PS),
    ("detection_jitter_fwhm", 0.0),
])
def test_invalid_config_names_field(field, value):
    with pytest.raises(ConfigError) as exc:
        SystemConfig(**{field: value})
    assert exc.value.field == field


def test_polarization_bijection():
    pairs = {(p.basis, p.bit) for p in Polarization}
    assert len(pairs) == 4
    for p in Polarization:
        assert Polarization.from_basis_bit(p.basis, p.bit) is p
    assert [p.bit for p in Polarization] == [0, 1, 0, 1]
    assert Polarization.H.orthogonal() is Polarization.V
    assert Polarization.D.orthogonal() is Polarization.A


def test_disabled_peak_is_unit_gaussian_peak():
    model = SideChannelModel(enabled=False)
    for interval in (2.5 * NS, 7.5 * NS, math.inf):
        peak = pulse_waveform(model.base_offset, interval, model, 65 * PS)
        assert peak == pytest.approx(1 / (SIGMA_65 * math.sqrt(2 * math.pi)), rel=1e-12)


def test_long_interval_limit_matches_disabled():
    on = SideChannelModel()
    off = on.with_(enabled=False)
    t = np.linspace(0, 2.5 * NS, 1001)
    np.testing.assert_allclose(pulse_waveform(t, math.inf, on, 65 * PS),
                               pulse_waveform(t, 2.5 * NS, off, 65 * PS), rtol=1e-12)


def test_peak_shift_at_minimum_interval():
    model = SideChannelModel(max_temporal_offset=100 * PS, relaxation_time=10 * NS)
    t = model.base_offset + np.arange(-300, 301) * 0.5 * PS
    w = pulse_waveform(t, 2.5 * NS, model, 65 * PS)
    assert t[np.argmax(w)] - model.base_offset == pytest.approx(100 * PS, abs=0.5 * PS)


def test_temporal_offset_examples():
    model = SideChannelModel(max_temporal_offset=100 * PS, relaxation_time=10 * NS)
    assert temporal_offset(2.5 * NS, model.with_(enabled=False)) == 0
    assert temporal_offset(2.5 * NS, model) == pytest.approx(100 * PS)
    # 100 ps * e^-1
    assert temporal_offset(12.5 * NS, model) == pytest.approx(36.787944117 * PS, rel=1e-9)


def test_amplitude_factor_examples():
    model = SideChannelModel(max_amplitude_deviation=0.2, relaxation_time=10 * NS)
    assert amplitude_factor(12.5 * NS, model.with_(enabled=False)) == 1
    assert amplitude_factor(2.5 * NS, model) == pytest.approx(1.2)
    assert amplitude_factor(12.5 * NS, model) == pytest.approx(1.0735758882, rel=1e-9)


@pytest.mark.parametrize("bad", [-1 * NS, 1 * NS, float("nan")])
def test_bad_interval_rejected(bad):
    with pytest.raises(ConfigError):
        temporal_offset(bad, SideChannelModel())
    with pytest.raises(ConfigError):
        pulse_waveform(0.0, bad, SideChannelModel(), 65 * PS)


def test_link_transmittance_examples():
    assert link_transmittance(SystemConfig(channel_loss_db=0, receiver_loss_db=0,
                                           detector_efficiency=1)) == 1
    assert link_transmittance(SystemConfig()) == pytest.approx(0.0315478672, rel=1e-9)
    half = SystemConfig(channel_loss_db=3.0103, receiver_loss_db=0, detector_efficiency=1)
    assert link_transmittance(half) == pytest.approx(0.5, rel=1e-4)


@pytest.mark.parametrize("interval", [2.5 * NS, 5 * NS, 12.5 * NS, 40 * NS, math.inf])
def test_waveform_area_is_amplitude_factor(interval):
    model = SideChannelModel()
    t = np.linspace(0, 2.5 * NS, 10_000)
    area = trapezoid(pulse_waveform(t, interval, model, 65 * PS), t)
    assert area == pytest.approx(amplitude_factor(interval, model), rel=1e-6)


models = st.builds(
    SideChannelModel,
    max_temporal_offset=st.floats(0, 500e-12),
    relaxation_time=st.floats(0.1e-9, 100e-9),
    max_amplitude_deviation=st.floats(0, 2),
)


@settings(max_examples=200, deadline=None)
@given(models)
def test_side_channel_non_increasing(model):
    grid = np.linspace(2.5 * NS, 40 * NS, 200)
    assert np.all(np.diff(temporal_offset(grid, model)) <= 1e-30)
    amp = amplitude_factor(grid, model)
    assert np.all(np.diff(amp) <= 1e-15)
    assert np.all(amp >= 1.0)


@settings(max_examples=100, deadline=None)
@given(models, st.floats(2.5e-9, 1e-6), st.floats(2.5e-9, 1e-6))
def test_disabled_waveforms_interval_independent(model, d1, d2):
    off = model.with_(enabled=False)
    t = np.linspace(0, 2.5 * NS, 501)
    np.testing.assert_array_equal(pulse_waveform(t, d1, off, 65 * PS),
                                  pulse_waveform(t, d2, off, 65 * PS))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 40), st.floats(0, 1))
def test_transmittance_splits_multiplicatively(loss, split):
    whole = link_transmittance(SystemConfig(channel_loss_db=loss, receiver_loss_db=0))
    parts = link_transmittance(SystemConfig(channel_loss_db=loss * split,
                                            receiver_loss_db=loss * (1 - split)))
    assert parts == pytest.approx(whole, rel=1e-12)
