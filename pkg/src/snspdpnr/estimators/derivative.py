"""Mean-derivative time projection.

A pulse delayed by a small s is, to first order, V(t - s) = V(t) - s V'(t).
Because a function that starts and ends at baseline is orthogonal to its own
derivative, projecting a trace onto V' and dividing by C = sum(V'^2) dt
recovers -s; the sign is flipped so the result reads as a delay.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from snspdpnr.errors import DataError, DegenerateBasisError, EmptySetError, LengthMismatchError
from snspdpnr.estimators.base import TimeEstimator
from snspdpnr.parallel import map_chunks
from snspdpnr.traces import Trace, TraceSet, derivative, mean_trace

logger = logging.getLogger(__name__)

CONSISTENCY_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class ProjectionBasis:
    """Derivative of the reference mean trace and its normalisation constant C.

    C must equal sum(deriv**2) * dt to 1e-12 relative; a float64 sum over a
    few thousand samples stays well inside that.
    """

    deriv: Trace
    norm_c: float
    reference_label: str = "reference"

    def __post_init__(self):
        c = float(self.norm_c)
        if not np.isfinite(c) or c <= 0:
            raise DegenerateBasisError(f"normalisation constant must be positive, got {c!r}")
        expected = float(np.dot(self.deriv.samples, self.deriv.samples) * self.deriv.dt)
        if abs(expected - c) > CONSISTENCY_RTOL * c:
            raise DataError("norm_c is inconsistent with the derivative vector")
        object.__setattr__(self, "norm_c", c)

    def __len__(self) -> int:
        return len(self.deriv)


def build_basis(reference: TraceSet, label: Optional[str] = None) -> ProjectionBasis:
    """Basis from the derivative of the reference set's mean trace."""
    if len(reference) == 0:
        raise EmptySetError("reference set is empty")
    deriv = derivative(mean_trace(reference))
    c = float(np.dot(deriv.samples, deriv.samples) * deriv.dt)
    if not c > 0:
        raise DegenerateBasisError(f"reference {reference.label} has a zero mean derivative")
    basis = ProjectionBasis(deriv, c, label or reference.label)
    logger.debug("basis from %s: %d traces, C=%.6g V^2/s", basis.reference_label, len(reference), c)
    return basis


def project_time(basis: ProjectionBasis, trace: Trace) -> float:
    """Projected time (seconds) of one trace."""
    if len(trace) != len(basis):
        raise LengthMismatchError(f"trace has {len(trace)} samples, basis has {len(basis)}")
    return -float(np.dot(basis.deriv.samples, trace.samples)) * basis.deriv.dt / basis.norm_c


def project_set(basis: ProjectionBasis, traces: TraceSet, threads: int = 1) -> np.ndarray:
    """Projected times of every trace, in input order."""
    if len(traces) == 0:
        return np.zeros(0)
    if traces.samples_per_trace != len(basis):
        raise LengthMismatchError(f"traces have {traces.samples_per_trace} samples, basis has {len(basis)}")
    scale = -basis.deriv.dt / basis.norm_c
    d = basis.deriv.samples
    parts = map_chunks(lambda a, b: traces.data[a:b] @ d, len(traces), threads)
    return np.concatenate(parts) * scale


def centred(times: np.ndarray) -> np.ndarray:
    """Projected times with their median removed (the zero of projected time is arbitrary)."""
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        return times
    return times - np.median(times)


class DerivativeEstimator(TimeEstimator):
    name = "derivative"

    def __init__(self, basis: ProjectionBasis):
        self.basis = basis

    def estimate(self, trace: Trace, sync: Optional[Trace] = None) -> float:
        return project_time(self.basis, trace)

    def estimate_set(self, traces: TraceSet, threads: int = 1, sync: Optional[TraceSet] = None) -> np.ndarray:
        return project_set(self.basis, traces, threads)
