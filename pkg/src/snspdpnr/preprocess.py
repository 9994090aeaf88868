"""Trigger-jitter correction, first-order band-pass filtering and decimation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import signal

from snspdpnr.constants import EDGE_SAMPLES, EDGE_TOLERANCE, PEAK_WINDOW
from snspdpnr.errors import (
    EXIT_NUMERICAL,
    DataError,
    DegenerateFitError,
    EmptySetError,
    LengthMismatchError,
    TraceError,
)
from snspdpnr.parallel import map_chunks
from snspdpnr.traces import Trace, TraceSet, mean_trace

logger = logging.getLogger(__name__)

# Refinement stops once every sync peak sits within this distance of the reference.
REFINE_TOL = 1e-15
REFINE_PASSES = 4


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    aligned: TraceSet
    shifts: np.ndarray
    reference_time: float
    aligned_sync: TraceSet
    passes: int = 0


# --------------------------------------------------------------------------
# Peak finding
# --------------------------------------------------------------------------


def _vertex(y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Least-squares parabola over the last axis on symmetric abscissae.

    Returns (vertex offset from the window centre in samples, curvature).
    """
    width = y.shape[-1]
    k = np.arange(width) - (width - 1) / 2.0
    s0, s2, s4 = float(width), float(np.sum(k**2)), float(np.sum(k**4))
    t0 = y.sum(axis=-1)
    t1 = y @ k
    t2 = y @ (k**2)
    c1 = t1 / s2
    c2 = (s0 * t2 - s2 * t0) / (s0 * s4 - s2 * s2)
    with np.errstate(divide="ignore", invalid="ignore"):
        vertex = -c1 / (2.0 * c2)
    return vertex, c2


def parabola_peak(trace: Trace, window: Optional[Tuple[int, int]] = None) -> float:
    """Time of the vertex of a least-squares parabola through the top of a pulse.

    ``window`` is a half-open sample range; by default 7 samples centred on
    the largest sample.
    """
    samples = trace.samples
    if window is None:
        centre = int(np.argmax(samples))
        half = PEAK_WINDOW // 2
        start, stop = centre - half, centre + half + 1
    else:
        start, stop = int(window[0]), int(window[1])
    if start < 0 or stop > samples.size or stop - start < 3:
        raise DataError(f"peak window [{start}, {stop}) must hold >= 3 samples inside the trace")
    y = samples[start:stop]
    if np.ptp(y) == 0:
        raise DegenerateFitError("flat peak window")
    vertex, c2 = _vertex(y)
    half_width = (stop - start - 1) / 2.0
    if not c2 < 0:
        raise DegenerateFitError("parabola has no maximum (zero or positive curvature)")
    if abs(vertex) > half_width:
        raise DegenerateFitError("parabola vertex lies outside the window")
    return trace.t0 + (start + half_width + float(vertex)) * trace.dt


def _peaks(data: np.ndarray, dt: float, t0: float, width: int, offset: int = 0) -> np.ndarray:
    """Vectorised :func:`parabola_peak` over rows with the default centred window."""
    half = width // 2
    n = data.shape[1]
    centre = np.argmax(data, axis=1)
    rows = np.arange(data.shape[0])
    bad = np.flatnonzero((centre - half < 0) | (centre + half >= n))
    if bad.size:
        raise TraceError(offset + int(bad[0]), "maximum sample too close to the trace edge")
    y = data[rows[:, None], centre[:, None] + np.arange(-half, half + 1)[None, :]]
    flat = np.flatnonzero(np.ptp(y, axis=1) == 0)
    if flat.size:
        raise TraceError(offset + int(flat[0]), "flat peak window", EXIT_NUMERICAL)
    vertex, c2 = _vertex(y)
    bad = np.flatnonzero(~(c2 < 0) | (np.abs(vertex) > half))
    if bad.size:
        raise TraceError(offset + int(bad[0]), "degenerate parabola fit", EXIT_NUMERICAL)
    return t0 + (centre + vertex) * dt


def peak_times(sync: TraceSet, width: int = PEAK_WINDOW, threads: int = 1) -> np.ndarray:
    if width < 3 or width % 2 == 0:
        raise DataError("peak window width must be an odd number >= 3")
    parts = map_chunks(lambda a, b: _peaks(sync.data[a:b], sync.dt, sync.t0, width, a), len(sync), threads)
    return np.concatenate(parts) if parts else np.zeros(0)


# --------------------------------------------------------------------------
# Spectral shifting
# --------------------------------------------------------------------------


def shift_rows(data: np.ndarray, shifts: np.ndarray, dt: float) -> np.ndarray:
    """Delay each row by its shift (seconds) using the Fourier shift theorem.

    The Nyquist bin of an even-length row must stay real, so it takes the sign
    of the nearest whole-sample shift instead of a phase. Every factor then has
    unit modulus, so energy is kept and a shift undone by its negative is exact.
    """
    n = data.shape[-1]
    spectrum = np.fft.rfft(data, axis=-1)
    k = np.arange(spectrum.shape[-1])
    phase = np.exp(-2j * np.pi * np.outer(shifts, k) / (n * dt))
    if n % 2 == 0:
        phase[:, -1] = np.where(np.rint(np.asarray(shifts) / dt) % 2 == 0, 1.0, -1.0)
    return np.fft.irfft(spectrum * phase, n=n, axis=-1)


def shift_set(traces: TraceSet, shifts: np.ndarray, threads: int = 1) -> np.ndarray:
    shifts = np.asarray(shifts, dtype=np.float64)
    parts = map_chunks(lambda a, b: shift_rows(traces.data[a:b], shifts[a:b], traces.dt), len(traces), threads)
    return np.vstack(parts) if parts else np.zeros((0, traces.samples_per_trace))


def baseline_ok(samples: np.ndarray, edge: int = EDGE_SAMPLES, tolerance: float = EDGE_TOLERANCE) -> bool:
    """True when ``edge`` samples at both ends sit near the baseline (the median)."""
    samples = np.asarray(samples)
    if samples.size < 2 * edge:
        return False
    span = np.ptp(samples)
    if span == 0:
        return True
    ends = np.concatenate([samples[:edge], samples[-edge:]])
    return bool(np.max(np.abs(ends - np.median(samples))) <= tolerance * span)


def fourier_shift(trace: Trace, shift: float, check_edges: bool = True) -> Trace:
    """Delay a trace by ``shift`` seconds (circularly, via the DFT)."""
    if not abs(shift) < trace.duration:
        raise DataError(f"shift {shift!r} s exceeds the trace duration {trace.duration!r} s")
    if check_edges and not baseline_ok(trace.samples):
        logger.warning("trace does not start and end at baseline; spectral shift will wrap the pulse")
    return trace.with_samples(shift_rows(trace.samples[None, :], np.array([shift]), trace.dt)[0])


def align_dataset(
    sync: TraceSet,
    target: TraceSet,
    window: int = PEAK_WINDOW,
    threads: int = 1,
    refine: bool = True,
) -> AlignmentResult:
    """Remove the trigger jitter measured on the sync channel from the target channel.

    Each sync peak is located with a parabola fit; target trace i is shifted by
    minus (peak_i - median peak). With ``refine`` the sync traces are shifted
    by the running estimate and re-measured until every peak sits on the
    median, which removes the bias the parabola has at off-grid peak positions.
    """
    if len(sync) != len(target):
        raise LengthMismatchError(f"{len(sync)} sync traces vs {len(target)} target traces")
    if len(sync) == 0:
        raise EmptySetError("nothing to align")
    if sync.dt != target.dt:
        raise DataError("sync and target must share dt")

    peaks = peak_times(sync, window, threads)
    reference = float(np.median(peaks))
    shifts = peaks - reference
    passes = 0
    shifted_sync = shift_set(sync, -shifts, threads)
    while refine and passes < REFINE_PASSES:
        residual = peak_times(sync.replace(shifted_sync), window, threads) - reference
        passes += 1
        if np.max(np.abs(residual)) < REFINE_TOL:
            break
        shifts = shifts + residual
        shifted_sync = shift_set(sync, -shifts, threads)

    too_far = np.flatnonzero(np.abs(shifts) >= target.duration)
    if too_far.size:
        raise TraceError(int(too_far[0]), "alignment shift exceeds the trace duration")
    if not baseline_ok(mean_trace(target).samples):
        logger.warning("target traces do not start and end at baseline; spectral shift will wrap pulses")

    aligned = target.replace(shift_set(target, -shifts, threads), aligned=True)
    logger.info(
        "aligned %d traces: shift spread %.3g s (std), %d refinement passes",
        len(target), float(np.std(shifts)), passes,
    )
    return AlignmentResult(aligned, shifts, reference, sync.replace(shifted_sync, aligned=True), passes)


# --------------------------------------------------------------------------
# Filtering and decimation
# --------------------------------------------------------------------------


def first_order_section(kind: str, cutoff: float, fs: float) -> Tuple[np.ndarray, np.ndarray]:
    """Digital one-pole high-pass or low-pass by the bilinear transform, prewarped at ``cutoff``."""
    if not 0 < cutoff < fs / 2:
        raise DataError(f"cutoff {cutoff!r} Hz must lie in (0, {fs / 2!r})")
    omega = 2.0 * fs * np.tan(np.pi * cutoff / fs)
    if kind == "highpass":
        b, a = [1.0, 0.0], [1.0, omega]
    elif kind == "lowpass":
        b, a = [0.0, omega], [1.0, omega]
    else:
        raise DataError(f"unknown section kind {kind!r}")
    return signal.bilinear(b, a, fs=fs)


def _bandpass_rows(data: np.ndarray, dt: float, f_lo: float, f_hi: float) -> np.ndarray:
    fs = 1.0 / dt
    if not 0 < f_lo < f_hi < fs / 2:
        raise DataError(f"need 0 < f_lo < f_hi < {fs / 2!r} Hz, got f_lo={f_lo!r}, f_hi={f_hi!r}")
    b_hp, a_hp = first_order_section("highpass", f_lo, fs)
    b_lp, a_lp = first_order_section("lowpass", f_hi, fs)
    return signal.lfilter(b_lp, a_lp, signal.lfilter(b_hp, a_hp, data, axis=-1), axis=-1)


def bandpass_first_order(trace: Trace, f_lo: float, f_hi: float) -> Trace:
    """One-pole high-pass at f_lo followed by one-pole low-pass at f_hi, zero initial state."""
    return trace.with_samples(_bandpass_rows(trace.samples, trace.dt, f_lo, f_hi))


def bandpass_set(traces: TraceSet, f_lo: float, f_hi: float) -> TraceSet:
    if len(traces) == 0:
        _bandpass_rows(np.zeros((0, 2)), traces.dt, f_lo, f_hi)
        return traces
    return traces.replace(_bandpass_rows(traces.data, traces.dt, f_lo, f_hi), bandpass=[f_lo, f_hi])


def lowpass_first_order(samples: np.ndarray, dt: float, cutoff: float) -> np.ndarray:
    b, a = first_order_section("lowpass", cutoff, 1.0 / dt)
    return signal.lfilter(b, a, samples, axis=-1)


def decimate(trace: Trace, k: int) -> Trace:
    """Keep every k-th sample starting at index 0 (no anti-alias filter)."""
    _check_factor(k, len(trace))
    return trace.with_samples(trace.samples[::k], dt=trace.dt * k)


def decimate_set(traces: TraceSet, k: int) -> TraceSet:
    _check_factor(k, traces.samples_per_trace)
    dt = traces.dt * k
    return traces.replace(
        traces.data[:, ::k],
        dt=dt,
        sample_rate=1.0 / dt,
        pre_trigger_samples=int(round(-traces.t0 / dt)) if traces.t0 < 0 else 0,
    )


def _check_factor(k: int, length: int) -> None:
    if int(k) != k or k < 1:
        raise DataError("decimation factor must be a positive integer")
    if length < 2 * k:
        raise DataError(
            f"decimating {length} samples by {k} needs at least {2 * k} samples (two output samples)"
        )
