"""Joint projection of an SNSPD trace and its sync trace.

The sync part undoes the digitizer trigger jitter without a separate
alignment pass: the result is the SNSPD delay minus the sync delay.

The projection vector is the constant (deriv(V1)/C1, -deriv(V_PD)/C_PD).
Used once (``passes=0``) it is a single dot product, accurate to first order
in the trigger shift. With ``passes > 0`` the sync half is re-applied to the
pair after moving both channels by the running sync delay, so the SNSPD half
only ever sees the small photon-number shift. Bases are built the same way
from trigger-corrected reference means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from snspdpnr.errors import ConfigError, DataError, DegenerateBasisError, EmptySetError, LengthMismatchError
from snspdpnr.estimators.base import TimeEstimator
from snspdpnr.estimators.derivative import CONSISTENCY_RTOL
from snspdpnr.parallel import map_chunks
from snspdpnr.preprocess import shift_rows
from snspdpnr.traces import Trace, TraceSet

logger = logging.getLogger(__name__)

# Fixed pass counts keep each row independent of the chunk it is computed in.
REFINE_PASSES = 4
REFERENCE_PASSES = 3


@dataclass(frozen=True, eq=False)
class HybridBasis:
    """snspd_part = deriv(V1)/C1, sync_part = -deriv(V_PD)/C_PD on a shared grid."""

    snspd_part: np.ndarray
    sync_part: np.ndarray
    dt: float
    norm_c_snspd: float
    norm_c_sync: float
    reference_label: str = "reference"

    def __post_init__(self):
        snspd = np.array(self.snspd_part, dtype=np.float64)
        sync = np.array(self.sync_part, dtype=np.float64)
        if snspd.ndim != 1 or snspd.shape != sync.shape:
            raise DataError("hybrid parts must be 1-d vectors of equal length")
        if not (np.isfinite(snspd).all() and np.isfinite(sync).all()):
            raise DataError("hybrid parts must be finite")
        if not (self.norm_c_snspd > 0 and self.norm_c_sync > 0):
            raise DegenerateBasisError("hybrid normalisation constants must be positive")
        for part, c, name in ((snspd, self.norm_c_snspd, "snspd_part"), (sync, self.norm_c_sync, "sync_part")):
            # part * C is the raw derivative, whose own normalisation is C
            if abs(float(np.dot(part, part)) * self.dt * c - 1.0) > CONSISTENCY_RTOL:
                raise DataError(f"{name} is inconsistent with its normalisation constant")
        snspd.flags.writeable = False
        sync.flags.writeable = False
        object.__setattr__(self, "snspd_part", snspd)
        object.__setattr__(self, "sync_part", sync)

    def __len__(self) -> int:
        return self.snspd_part.size

    def vector(self) -> np.ndarray:
        """The concatenated projection vector for a concatenated (SNSPD, sync) measurement."""
        return np.concatenate([self.snspd_part, self.sync_part])


def _check_passes(passes: int) -> int:
    if isinstance(passes, bool) or int(passes) != passes or passes < 0:
        raise ConfigError(f"passes must be a non-negative integer, got {passes!r}")
    return int(passes)


def _mean_part(data: np.ndarray, dt: float, sign: float, channel: str) -> Tuple[np.ndarray, float]:
    deriv = np.gradient(data.mean(axis=0), dt)
    c = float(np.dot(deriv, deriv) * dt)
    if not c > 0:
        raise DegenerateBasisError(f"{channel} reference has a zero mean derivative")
    return sign * deriv / c, c


def _basis_from_rows(snspd: np.ndarray, sync: np.ndarray, dt: float, label: str) -> HybridBasis:
    snspd_part, c_snspd = _mean_part(snspd, dt, 1.0, "SNSPD")
    sync_part, c_sync = _mean_part(sync, dt, -1.0, "sync")
    return HybridBasis(snspd_part, sync_part, dt, c_snspd, c_sync, label)


def _pair_rows(basis: HybridBasis, snspd: np.ndarray, sync: np.ndarray, passes: int) -> Tuple[np.ndarray, np.ndarray]:
    """(SNSPD delay - sync delay, refined sync delay) for each row of a pair block."""
    tau = np.zeros(sync.shape[0])
    moved_sync = sync
    for i in range(passes + 1):
        # sync delay of the sync rows moved by -tau; sync_part carries the minus sign
        residual = (moved_sync @ basis.sync_part) * basis.dt
        if i == passes:
            break
        tau = tau + residual
        moved_sync = shift_rows(sync, -tau, basis.dt)
    moved_snspd = shift_rows(snspd, -tau, basis.dt) if passes else snspd
    return -(moved_snspd @ basis.snspd_part) * basis.dt - residual, tau + residual


def build_hybrid_basis(
    snspd_ref: TraceSet,
    sync_ref: TraceSet,
    passes: int = REFERENCE_PASSES,
    label: Optional[str] = None,
) -> HybridBasis:
    """Hybrid basis from paired references.

    The first basis comes from the raw means, which the trigger jitter blurs.
    Each of ``passes`` further rounds measures every reference pair's sync
    delay against the current basis, moves both channels by it and rebuilds
    the basis from the corrected means.
    """
    if snspd_ref.dt != sync_ref.dt:
        raise DataError("SNSPD and sync references must share dt")
    if len(snspd_ref) != len(sync_ref):
        raise LengthMismatchError(f"{len(snspd_ref)} SNSPD references vs {len(sync_ref)} sync references")
    if len(snspd_ref) == 0:
        raise EmptySetError("reference set is empty")
    if snspd_ref.samples_per_trace != sync_ref.samples_per_trace:
        raise LengthMismatchError("SNSPD and sync references differ in trace length")
    passes = _check_passes(passes)

    dt = snspd_ref.dt
    label = label or snspd_ref.label
    basis = _basis_from_rows(snspd_ref.data, sync_ref.data, dt, label)
    for _ in range(passes):
        _, tau = _pair_rows(basis, snspd_ref.data, sync_ref.data, REFINE_PASSES)
        basis = _basis_from_rows(shift_rows(snspd_ref.data, -tau, dt), shift_rows(sync_ref.data, -tau, dt), dt, label)
    logger.debug(
        "hybrid basis from %s: %d pairs, C_snspd=%.6g, C_sync=%.6g",
        label, len(snspd_ref), basis.norm_c_snspd, basis.norm_c_sync,
    )
    return basis


def hybrid_project(basis: HybridBasis, snspd: Trace, sync: Trace, passes: int = REFINE_PASSES) -> float:
    """(SNSPD delay) - (sync delay), in seconds."""
    if len(snspd) != len(basis) or len(sync) != len(basis):
        raise LengthMismatchError(f"traces must have {len(basis)} samples")
    times, _ = _pair_rows(basis, snspd.samples[None, :], sync.samples[None, :], _check_passes(passes))
    return float(times[0])


def hybrid_project_set(
    basis: HybridBasis,
    snspd: TraceSet,
    sync: TraceSet,
    threads: int = 1,
    passes: int = REFINE_PASSES,
) -> np.ndarray:
    passes = _check_passes(passes)
    if len(snspd) != len(sync):
        raise LengthMismatchError("SNSPD and sync sets differ in trace count")
    if len(snspd) == 0:
        return np.zeros(0)
    if snspd.samples_per_trace != len(basis) or sync.samples_per_trace != len(basis):
        raise LengthMismatchError(f"traces must have {len(basis)} samples")

    def chunk(a: int, b: int) -> np.ndarray:
        return _pair_rows(basis, snspd.data[a:b], sync.data[a:b], passes)[0]

    return np.concatenate(map_chunks(chunk, len(snspd), threads))


class HybridEstimator(TimeEstimator):
    """Needs the sync trace alongside each SNSPD trace."""

    name = "hybrid"
    needs_sync = True

    def __init__(self, basis: HybridBasis, passes: int = REFINE_PASSES):
        self.basis = basis
        self.passes = _check_passes(passes)

    def estimate(self, trace: Trace, sync: Optional[Trace] = None) -> float:
        if sync is None:
            raise ConfigError("the hybrid estimator needs the sync trace of each pair")
        return hybrid_project(self.basis, trace, sync, self.passes)

    def estimate_set(self, traces: TraceSet, threads: int = 1, sync: Optional[TraceSet] = None) -> np.ndarray:
        if sync is None:
            raise ConfigError("the hybrid estimator needs the sync traces of the set")
        return hybrid_project_set(self.basis, traces, sync, threads, self.passes)
