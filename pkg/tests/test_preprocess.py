import logging

import numpy as np
import pytest
from scipy import signal

from snspdpnr.constants import PS
from snspdpnr.errors import DataError, DegenerateFitError, LengthMismatchError, TraceError
from snspdpnr.estimators import build_basis, project_set
from snspdpnr.preprocess import (
    align_dataset,
    bandpass_first_order,
    bandpass_set,
    baseline_ok,
    decimate,
    decimate_set,
    first_order_section,
    fourier_shift,
    parabola_peak,
    peak_times,
)
from snspdpnr.synth import SynthConfig, generate_dataset, generate_pair
from snspdpnr.traces import Trace, TraceSet


def _gaussian(centre, sigma, n=64, dt=1.0):
    k = np.arange(n)
    return Trace(np.exp(-0.5 * ((k - centre) / sigma) ** 2), dt)


def test_parabola_on_sampled_parabola_is_exact():
    k = np.arange(20, dtype=float)
    tr = Trace(5.0 - 0.3 * (k - 9.4) ** 2, 1.0)
    assert parabola_peak(tr) == pytest.approx(9.4, abs=1e-9)
    assert parabola_peak(tr, window=(6, 13)) == pytest.approx(9.4, abs=1e-9)


def test_parabola_peak_on_centred_gaussian():
    assert parabola_peak(_gaussian(32.0, 8.0)) == pytest.approx(32.0, abs=1e-9)


def test_parabola_peak_off_grid_gaussian():
    assert parabola_peak(_gaussian(13.37, 8.0)) == pytest.approx(13.37, abs=0.03)


def test_parabola_peak_respects_t0():
    tr = _gaussian(20.0, 4.0, dt=0.5)
    shifted = Trace(tr.samples, 0.5, t0=-3.0)
    assert parabola_peak(shifted) == pytest.approx(parabola_peak(tr) - 3.0)


def test_parabola_peak_errors():
    with pytest.raises(DataError):
        parabola_peak(_gaussian(1.0, 4.0))
    with pytest.raises(DegenerateFitError):
        parabola_peak(Trace(np.ones(16), 1.0), window=(4, 11))
    valley = Trace(np.abs(np.arange(16) - 8.0), 1.0)
    with pytest.raises(DegenerateFitError):
        parabola_peak(valley, window=(5, 12))


def test_peak_times_matches_scalar_version():
    rows = np.stack([_gaussian(c, 6.0).samples for c in (20.0, 20.3, 31.7)])
    traces = TraceSet(rows, 1.0)
    expected = [parabola_peak(tr) for tr in traces]
    np.testing.assert_allclose(peak_times(traces), expected)


def test_peak_at_edge_names_the_trace():
    rows = np.stack([_gaussian(30.0, 6.0).samples, np.arange(64.0) / 64.0])
    with pytest.raises(TraceError) as info:
        peak_times(TraceSet(rows, 1.0))
    assert info.value.index == 1


def test_peak_window_must_be_odd():
    with pytest.raises(DataError):
        peak_times(TraceSet(np.zeros((1, 16)), 1.0), width=6)


def test_fourier_shift_delays_a_pulse(quiet_cfg):
    snspd, _, _ = generate_pair(1, quiet_cfg, np.random.default_rng(0))
    delayed = fourier_shift(snspd, 30 * PS)
    expected = quiet_cfg.template.evaluate(quiet_cfg.times() - 30 * PS)
    np.testing.assert_allclose(delayed.samples, expected, atol=2e-3 * np.abs(expected).max())


def test_fourier_shift_by_whole_samples_rolls():
    tr = _gaussian(30.0, 3.0)
    np.testing.assert_allclose(fourier_shift(tr, 2.0).samples, np.roll(tr.samples, 2), atol=1e-12)


def test_fourier_shift_rejects_huge_shift():
    with pytest.raises(DataError):
        fourier_shift(_gaussian(30.0, 3.0), 64.0)


def test_fourier_shift_warns_on_wrapping(caplog):
    ramp = Trace(np.linspace(0.0, 1.0, 64), 1.0)
    with caplog.at_level(logging.WARNING, logger="snspdpnr.preprocess"):
        fourier_shift(ramp, 0.5)
    assert "baseline" in caplog.text


def test_baseline_ok():
    assert baseline_ok(_gaussian(32.0, 3.0).samples)
    assert not baseline_ok(np.linspace(0.0, 1.0, 64))
    assert not baseline_ok(np.zeros(10))


@pytest.mark.parametrize("shift_ps", [-20.0, -8.0, 0.0, 8.0, 20.0])
def test_projection_recovers_small_shifts(quiet_cfg, shift_ps):
    t = quiet_cfg.times()
    reference = TraceSet(quiet_cfg.template.evaluate(t)[None, :], quiet_cfg.dt, quiet_cfg.t0)
    basis = build_basis(reference)
    shift = shift_ps * PS
    moved = quiet_cfg.template.evaluate(t - shift)
    dt = project_set(basis, reference.replace(moved[None, :]))[0]
    assert abs(dt - shift) <= 0.05 * abs(shift) + 0.2 * PS


def test_alignment_removes_trigger_jitter():
    cfg = SynthConfig(mu=0.003, noise_sigma=2e-4, seed=21)
    data = generate_dataset(cfg, 200)
    result = align_dataset(data.sync, data.snspd)
    assert result.passes >= 1
    np.testing.assert_allclose(
        result.shifts - np.median(result.shifts),
        data.trigger_shifts - np.median(data.trigger_shifts),
        atol=0.5 * PS,
    )
    assert result.aligned.meta["aligned"] is True
    peaks = peak_times(result.aligned_sync)
    assert np.ptp(peaks) < 0.1 * PS


def test_alignment_is_idempotent(default_cfg):
    data = generate_dataset(default_cfg.with_updates(noise_sigma=0.0), 50)
    first = align_dataset(data.sync, data.snspd)
    second = align_dataset(first.aligned_sync, first.aligned)
    assert np.max(np.abs(second.shifts)) < 0.05 * PS


def test_alignment_input_checks(default_cfg):
    data = generate_dataset(default_cfg, 4)
    with pytest.raises(LengthMismatchError):
        align_dataset(data.sync, data.snspd.subset([0, 1]))
    empty = TraceSet(np.zeros((0, 512)), data.sync.dt)
    with pytest.raises(DataError):
        align_dataset(empty, empty)


def test_alignment_fails_on_sync_peak_at_edge(default_cfg):
    data = generate_dataset(default_cfg, 3)
    sync = np.array(data.sync.data)
    sync[2] = 0.0
    sync[2, -1] = 1.0
    with pytest.raises(TraceError) as info:
        align_dataset(data.sync.replace(sync), data.snspd)
    assert info.value.index == 2


def test_first_order_sections_match_analog_gains():
    fs = 5e9
    b, a = first_order_section("lowpass", 2e8, fs)
    _, h = signal.freqz(b, a, worN=[0.0, 2e8], fs=fs)
    assert abs(h[0]) == pytest.approx(1.0)
    assert abs(h[1]) == pytest.approx(1 / np.sqrt(2), rel=1e-6)
    b, a = first_order_section("highpass", 1e7, fs)
    _, h = signal.freqz(b, a, worN=[0.0, 1e7], fs=fs)
    assert abs(h[0]) == pytest.approx(0.0, abs=1e-12)
    assert abs(h[1]) == pytest.approx(1 / np.sqrt(2), rel=1e-6)
    with pytest.raises(DataError):
        first_order_section("lowpass", 3e9, fs)
    with pytest.raises(DataError):
        first_order_section("notch", 1e8, fs)


def test_bandpass_blocks_dc():
    tr = Trace(np.ones(20000), 1 / 5e9)
    out = bandpass_first_order(tr, 10e6, 2e9)
    assert abs(out.samples[-1]) < 1e-3


def test_bandpass_set_validates_and_tags(default_cfg):
    data = generate_dataset(default_cfg, 3).snspd
    out = bandpass_set(data, 10e6, 2e9)
    assert out.meta["bandpass"] == [10e6, 2e9]
    np.testing.assert_allclose(out.data[1], bandpass_first_order(data[1], 10e6, 2e9).samples)
    with pytest.raises(DataError):
        bandpass_set(data, 2e9, 10e6)


def test_decimation_grid():
    traces = TraceSet(np.random.default_rng(0).standard_normal((2, 3328)), 1 / 128e9, t0=-520 / 128e9)
    out = decimate_set(traces, 26)
    assert out.samples_per_trace == 128
    assert out.dt == pytest.approx(26 / 128e9)
    assert out.t0 == traces.t0
    assert out.meta["pre_trigger_samples"] == 20
    np.testing.assert_array_equal(out.data, traces.data[:, ::26])
    assert len(decimate(traces[0], 26)) == 128


def test_decimation_factor_checks():
    tr = Trace(np.zeros(10), 1.0)
    with pytest.raises(DataError):
        decimate(tr, 0)
    with pytest.raises(DataError):
        decimate(tr, 11)


def test_decimation_needs_two_output_samples():
    with pytest.raises(DataError, match="at least 4 samples"):
        decimate(Trace([1.0, 2.0], 1.0), 2)
    with pytest.raises(DataError, match="at least 4 samples"):
        decimate(Trace([1.0, 2.0, 3.0], 1.0), 2)
    np.testing.assert_array_equal(decimate(Trace(np.arange(4.0), 1.0), 2).samples, [0.0, 2.0])
    with pytest.raises(DataError):
        decimate_set(TraceSet(np.zeros((2, 51)), 1.0), 26)
    assert decimate_set(TraceSet(np.zeros((2, 52)), 1.0), 26).samples_per_trace == 2


@pytest.mark.parametrize("shift_ps", [17.0, -17.0])
def test_fourier_shift_round_trip_is_lossless(quiet_cfg, shift_ps):
    snspd, _, _ = generate_pair(1, quiet_cfg, np.random.default_rng(0))
    there = fourier_shift(snspd, shift_ps * PS)
    back = fourier_shift(there, -shift_ps * PS)
    rms = np.sqrt(np.mean((back.samples - snspd.samples) ** 2)) / np.sqrt(np.mean(snspd.samples**2))
    assert rms < 1e-6
    energy = np.sum(snspd.samples**2)
    assert np.sum(there.samples**2) == pytest.approx(energy, rel=1e-12)


def test_fourier_shift_negative_roll_and_nyquist_content():
    tr = _gaussian(30.0, 3.0)
    np.testing.assert_allclose(fourier_shift(tr, -3.0).samples, np.roll(tr.samples, -3), atol=1e-12)
    alternating = Trace(np.tile([1.0, -1.0], 32), 1.0)
    np.testing.assert_allclose(fourier_shift(alternating, 0.2, check_edges=False).samples, alternating.samples, atol=1e-12)
