from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Optional

import numpy as np

from snspdpnr.errors import LengthMismatchError
from snspdpnr.traces import Trace, TraceSet


class TimeEstimator(ABC):
    """Interface for anything that turns an SNSPD trace into a projected time (seconds).

    Estimators with ``needs_sync`` read the paired sync trace as well; the
    others ignore it.
    """

    name = "estimator"
    needs_sync = False

    @abstractmethod
    def estimate(self, trace: Trace, sync: Optional[Trace] = None) -> float:
        """Projected time of one trace; positive values mean a later pulse."""
        raise NotImplementedError

    def estimate_set(self, traces: TraceSet, threads: int = 1, sync: Optional[TraceSet] = None) -> np.ndarray:
        """Projected times of every trace, in input order."""
        if sync is None:
            return np.array([self.estimate(tr) for tr in traces], dtype=np.float64)
        if len(sync) != len(traces):
            raise LengthMismatchError(f"{len(traces)} traces vs {len(sync)} sync traces")
        return np.array([self.estimate(tr, sy) for tr, sy in zip(traces, sync)], dtype=np.float64)
