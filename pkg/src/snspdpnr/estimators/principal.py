from __future__ import annotations

from typing import Optional

import numpy as np
from scipy import stats

from snspdpnr.errors import DataError, LengthMismatchError
from snspdpnr.estimators.base import TimeEstimator
from snspdpnr.estimators.derivative import ProjectionBasis, project_set
from snspdpnr.pca import PcaModel, pca_scores, pca_scores_set
from snspdpnr.traces import Trace, TraceSet


class PrincipalEstimator(TimeEstimator):
    """Projected time from the PC1 score, mapped to seconds by ``scale * score + offset``.

    Use :meth:`calibrate` to fit scale and offset by least squares against the
    mean-derivative projection of the same traces, which puts both routes on
    one axis.
    """

    name = "pc1"

    def __init__(self, model: PcaModel, scale: float = 1.0, offset: float = 0.0):
        if not np.isfinite(scale) or scale == 0:
            raise DataError("scale must be finite and non-zero")
        self.model = model
        self.scale = float(scale)
        self.offset = float(offset)

    @classmethod
    def calibrate(
        cls,
        model: PcaModel,
        basis: ProjectionBasis,
        traces: TraceSet,
        threads: int = 1,
    ) -> "PrincipalEstimator":
        if len(traces) < 2:
            raise DataError("calibration needs at least 2 traces")
        if traces.samples_per_trace != len(model.mean):
            raise LengthMismatchError("calibration traces do not match the PCA model")
        scores = pca_scores_set(model, traces, 1)[:, 0]
        times = project_set(basis, traces, threads)
        scale, offset = np.polyfit(scores, times, 1)
        return cls(model, scale, offset)

    def score(self, trace: Trace) -> float:
        return float(pca_scores(self.model, trace, 1)[0])

    def estimate(self, trace: Trace, sync: Optional[Trace] = None) -> float:
        return self.scale * self.score(trace) + self.offset

    def estimate_set(self, traces: TraceSet, threads: int = 1, sync: Optional[TraceSet] = None) -> np.ndarray:
        return self.scale * pca_scores_set(self.model, traces, 1)[:, 0] + self.offset

    def agreement(self, basis: ProjectionBasis, traces: TraceSet, threads: int = 1) -> Optional[float]:
        """Spearman rank correlation between PC1 scores and derivative projections."""
        if len(traces) < 3:
            return None
        rho = stats.spearmanr(pca_scores_set(self.model, traces, 1)[:, 0], project_set(basis, traces, threads))[0]
        return float(rho)
