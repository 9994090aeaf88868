"""Acquisition and analysis constants shared across modules."""

from __future__ import annotations

import numpy as np

PS = 1e-12
NS = 1e-9

# Digitizer defaults: 512 samples at 5 GS/s with 20 samples before the trigger.
SAMPLE_RATE = 5e9
TRACE_LEN = 512
PRE_TRIGGER = 20

# Full-rate acquisition of the downsampling study and its decimation factor.
FULL_RATE = 128e9
DECIMATION = 26

# First-order band-pass cutoffs used before decimation.
F_LO = 10e6
F_HI = 2e9

# Analog low-pass on the sync photodiode channel.
SYNC_LOWPASS = 190e6

PEAK_WINDOW = 7
EDGE_SAMPLES = 20
EDGE_TOLERANCE = 0.05

REFERENCE_MU = 0.003
SWEEP_MU_MIN = 0.003
SWEEP_MU_MAX = 2.55
SWEEP_POINTS = 20

PCA_COMPONENTS = 10
GRID_POINTS = 4096
BOOTSTRAP_DRAWS = 1000
GRID_SPAN_SIGMAS = 8.0
MIN_BINS = 20
MAX_BINS = 2000

# Chunk size for index-parallel work; fixed so results never depend on thread count.
CHUNK = 4096


def to_ps(seconds):
    """Seconds to picoseconds (works on scalars and arrays)."""
    if np.ndim(seconds) == 0:
        return float(seconds) / PS
    return np.asarray(seconds, dtype=float) / PS


def sweep_mus(points: int = SWEEP_POINTS, lo: float = SWEEP_MU_MIN, hi: float = SWEEP_MU_MAX) -> np.ndarray:
    """Log-spaced mean photon numbers for a μ sweep."""
    if points < 1:
        raise ValueError("points must be positive")
    if not 0 < lo <= hi:
        raise ValueError("need 0 < lo <= hi")
    return np.geomspace(lo, hi, points)
