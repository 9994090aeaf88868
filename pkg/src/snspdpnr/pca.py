"""Principal component analysis over trace ensembles."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from snspdpnr.constants import PCA_COMPONENTS
from snspdpnr.errors import DataError, DegenerateFitError, LengthMismatchError
from snspdpnr.parallel import map_chunks
from snspdpnr.traces import Trace, TraceSet, mean_trace

logger = logging.getLogger(__name__)

_ORTHO_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Fitted components (rows of ``components``) ordered by explained variance."""

    mean: Trace
    components: np.ndarray
    explained_variance: np.ndarray
    n_fitted: int
    total_variance: float

    def __post_init__(self):
        comps = np.array(self.components, dtype=np.float64, ndmin=2)
        ev = np.array(self.explained_variance, dtype=np.float64, ndmin=1)
        if comps.shape[0] != ev.size:
            raise DataError("one explained variance per component required")
        if comps.shape[1] != len(self.mean):
            raise LengthMismatchError("components must match the mean trace length")
        if comps.shape[0] > min(comps.shape[1], self.n_fitted):
            raise DataError("more components than min(trace length, n_fitted)")
        if np.any(ev < 0) or np.any(np.diff(ev) > 1e-12 * max(ev[0], 1.0)):
            raise DataError("explained variance must be non-negative and non-increasing")
        gram = comps @ comps.T
        if np.max(np.abs(gram - np.eye(comps.shape[0]))) >= _ORTHO_TOL:
            raise DataError("components are not orthonormal")
        comps.flags.writeable = False
        ev.flags.writeable = False
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "explained_variance", ev)

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def _sign_convention(components: np.ndarray) -> np.ndarray:
    """Flip each row so its entry of largest magnitude is positive."""
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def _scatter(data: np.ndarray, mean: np.ndarray, threads: int) -> np.ndarray:
    """Sum of outer products of the centred rows, accumulated chunk by chunk in index order."""

    def partial(start: int, stop: int) -> np.ndarray:
        x = data[start:stop] - mean
        return x.T @ x

    total = np.zeros((data.shape[1], data.shape[1]))
    for block in map_chunks(partial, data.shape[0], threads):
        total += block
    return total


def _complete_basis(components: np.ndarray, dim: int, needed: int) -> np.ndarray:
    """Append ``needed`` unit vectors orthogonal to ``components`` (deterministic)."""
    projector = np.eye(dim) - components.T @ components
    _, vecs = linalg.eigh(projector)
    extra = vecs[:, ::-1][:, :needed].T
    return np.vstack([components, extra])


def fit_pca(traces: TraceSet, k: int = PCA_COMPONENTS, threads: int = 1) -> PcaModel:
    """Top-k principal components of the mean-centred traces.

    Uses the d x d sample covariance when there are at least as many traces as
    samples, otherwise the n x n Gram (snapshot) matrix.
    """
    n, d = len(traces), traces.samples_per_trace
    if n < 2:
        raise DataError("PCA needs at least 2 traces")
    if k < 1:
        raise DataError("k must be at least 1")
    if k > min(d, n):
        raise DataError(f"k={k} exceeds the rank bound min(samples={d}, traces={n})")

    mean = mean_trace(traces)
    data = traces.data
    if n >= d:
        cov = _scatter(data, mean.samples, threads) / (n - 1)
        total = float(np.trace(cov))
        if total <= 0:
            raise DegenerateFitError("all traces are identical; no variance to decompose")
        vals, vecs = linalg.eigh(cov)
        order = np.argsort(vals)[::-1][:k]
        ev = np.clip(vals[order], 0.0, None)
        comps = vecs[:, order].T
        route = "covariance"
    else:
        centred = data - mean.samples
        gram = centred @ centred.T / (n - 1)
        total = float(np.trace(gram))
        if total <= 0:
            raise DegenerateFitError("all traces are identical; no variance to decompose")
        vals, vecs = linalg.eigh(gram)
        order = np.argsort(vals)[::-1][:k]
        vals = np.clip(vals[order], 0.0, None)
        keep = vals > 1e-12 * vals[0]
        comps = (centred.T @ vecs[:, order[keep]]) / np.sqrt((n - 1) * vals[keep])
        comps = comps.T
        # re-orthonormalise to remove the round-off of the snapshot division
        q, r = np.linalg.qr(comps.T)
        comps = (q * np.sign(np.diag(r))).T
        if comps.shape[0] < k:
            comps = _complete_basis(comps, d, k - comps.shape[0])
        ev = np.where(np.arange(k) < keep.sum(), vals, 0.0)
        route = "gram"

    comps = _sign_convention(comps)
    logger.debug("PCA via %s route: n=%d d=%d k=%d, leading ratio %.4f", route, n, d, k, ev[0] / total)
    return PcaModel(mean, comps, ev, n, total)


def pca_scores(model: PcaModel, trace: Trace, k: Optional[int] = None) -> np.ndarray:
    """Scores of one trace on the first ``k`` components."""
    k = model.n_components if k is None else k
    if len(trace) != len(model.mean):
        raise LengthMismatchError(f"trace has {len(trace)} samples, model expects {len(model.mean)}")
    if not 1 <= k <= model.n_components:
        raise DataError(f"k must be in [1, {model.n_components}]")
    return model.components[:k] @ (trace.samples - model.mean.samples)


def pca_scores_set(model: PcaModel, traces: TraceSet, k: Optional[int] = None) -> np.ndarray:
    """Score matrix (traces x k)."""
    k = model.n_components if k is None else k
    if traces.samples_per_trace != len(model.mean):
        raise LengthMismatchError("trace length does not match the model")
    if not 1 <= k <= model.n_components:
        raise DataError(f"k must be in [1, {model.n_components}]")
    return (traces.data - model.mean.samples) @ model.components[:k].T


def scree(model: PcaModel) -> Tuple[np.ndarray, np.ndarray]:
    """Explained-variance ratios and their running sum."""
    ratios = model.explained_variance / model.total_variance
    return ratios, np.cumsum(ratios)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatchError("vectors differ in length")
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        raise DataError("cosine similarity of a zero vector")
    return float(np.dot(a, b) / denom)


@dataclass(frozen=True)
class ComponentComparison:
    labels: Tuple[str, ...]
    similarity: np.ndarray


def compare_components(
    models: Mapping[str, PcaModel],
    references: Optional[Mapping[str, np.ndarray]] = None,
) -> ComponentComparison:
    """|cos| between the first components of several fits and optional reference directions.

    Answers whether per-μ fits and a pooled fit find the same PC1, and how
    close each is to the normalised mean derivative.
    """
    vectors: List[np.ndarray] = []
    labels: List[str] = []
    for label, model in models.items():
        labels.append(label)
        vectors.append(model.components[0])
    for label, vec in (references or {}).items():
        labels.append(label)
        vectors.append(np.asarray(vec, dtype=np.float64))
    if not vectors:
        raise DataError("nothing to compare")
    size = len(vectors)
    sim = np.ones((size, size))
    for i in range(size):
        for j in range(i + 1, size):
            sim[i, j] = sim[j, i] = abs(cosine_similarity(vectors[i], vectors[j]))
    return ComponentComparison(tuple(labels), sim)


def pooled(sets: Sequence[TraceSet]) -> TraceSet:
    """Concatenate sets recorded on the same grid (for pooled PCA)."""
    if not sets:
        raise DataError("no sets to pool")
    first = sets[0]
    for s in sets[1:]:
        if s.samples_per_trace != first.samples_per_trace or s.dt != first.dt or s.t0 != first.t0:
            raise LengthMismatchError("pooled sets must share the sampling grid")
    data = np.vstack([s.data for s in sets])
    return TraceSet(data, first.dt, first.t0, first.channel, None, {"label": "pooled"})
