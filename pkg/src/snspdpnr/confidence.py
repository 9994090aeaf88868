"""Photon-number resolvability as one minus the Bhattacharyya overlap of consecutive class densities."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, linalg

from snspdpnr.constants import BOOTSTRAP_DRAWS, GRID_POINTS, GRID_SPAN_SIGMAS
from snspdpnr.errors import DataError
from snspdpnr.fitting import MixtureFit, PhotonClass
from snspdpnr.parallel import map_chunks

logger = logging.getLogger(__name__)

NORMALISATION_TOL = 1e-3
# Bootstrap draws are handed to worker threads in blocks of this size.
DRAW_CHUNK = 64


@dataclass(frozen=True)
class GridSpec:
    lo: float
    hi: float
    points: int

    def __post_init__(self):
        if not self.hi > self.lo:
            raise DataError("grid needs hi > lo")
        if self.points < 2:
            raise DataError("grid needs at least 2 points")

    def values(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.points)


@dataclass(frozen=True)
class PairConfidence:
    from_label: str
    to_label: str
    confidence: float
    std_error: float

    def __post_init__(self):
        if not 0 <= self.confidence <= 1:
            raise DataError(f"confidence {self.confidence!r} outside [0, 1]")
        if not self.std_error >= 0:
            raise DataError("std_error must be non-negative")

    @property
    def key(self) -> str:
        return f"C{self.from_label}->{self.to_label}"

    @property
    def order(self) -> int:
        return int(self.from_label.rstrip("+"))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "from_n": self.from_label,
            "to_n": self.to_label,
            "confidence": self.confidence,
            "std_error": self.std_error,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PairConfidence":
        return cls(str(data["from_n"]), str(data["to_n"]), float(data["confidence"]), float(data["std_error"]))


@dataclass(frozen=True)
class ConfidenceReport:
    pairs: Tuple[PairConfidence, ...]
    grid: GridSpec
    n_bootstrap: int
    seed: int = 0
    label: str = ""
    mu_label: Optional[float] = None
    warnings: Tuple[str, ...] = field(default_factory=tuple)

    def pair(self, from_label: str, to_label: str) -> Optional[PairConfidence]:
        for p in self.pairs:
            if p.from_label == from_label and p.to_label == to_label:
                return p
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "confidence",
            "label": self.label,
            "mu_label": self.mu_label,
            "pairs": [p.to_dict() for p in self.pairs],
            "grid": {"lo": self.grid.lo, "hi": self.grid.hi, "points": self.grid.points},
            "n_bootstrap": self.n_bootstrap,
            "seed": self.seed,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ConfidenceReport":
        if data.get("kind") != "confidence":
            raise DataError("not a confidence report document")
        grid = data["grid"]
        mu = data.get("mu_label")
        return cls(
            tuple(PairConfidence.from_dict(p) for p in data["pairs"]),
            GridSpec(float(grid["lo"]), float(grid["hi"]), int(grid["points"])),
            int(data["n_bootstrap"]),
            int(data.get("seed", 0)),
            str(data.get("label", "")),
            None if mu is None else float(mu),
            tuple(data.get("warnings", ())),
        )


# --------------------------------------------------------------------------
# Overlap
# --------------------------------------------------------------------------


def bhattacharyya(pdf_a: Sequence[float], pdf_b: Sequence[float], grid: Sequence[float]) -> float:
    """Trapezoidal integral of sqrt(pdf_a * pdf_b) over ``grid``, clamped to [0, 1]."""
    a = np.asarray(pdf_a, dtype=np.float64)
    b = np.asarray(pdf_b, dtype=np.float64)
    x = np.asarray(grid, dtype=np.float64)
    if a.shape != x.shape or b.shape != x.shape or x.ndim != 1:
        raise DataError("densities and grid must have the same 1-D shape")
    for name, pdf in (("pdf_a", a), ("pdf_b", b)):
        if np.any(pdf < 0) or not np.isfinite(pdf).all():
            raise DataError(f"{name} must be finite and non-negative")
        area = integrate.trapezoid(pdf, x)
        if abs(area - 1.0) > NORMALISATION_TOL:
            raise DataError(f"{name} integrates to {area:.6f}, not 1")
    return float(np.clip(integrate.trapezoid(np.sqrt(a * b), x), 0.0, 1.0))


def make_grid(
    fit: MixtureFit,
    classes: Sequence[PhotonClass],
    points: int = GRID_POINTS,
    span: float = GRID_SPAN_SIGMAS,
) -> GridSpec:
    """Uniform grid over the union of the supports of the given class densities."""
    bounds = [fit.support(cls, span) for cls in classes]
    return GridSpec(min(lo for lo, _ in bounds), max(hi for _, hi in bounds), int(points))


def class_density(fit: MixtureFit, cls: PhotonClass, grid: np.ndarray) -> np.ndarray:
    return np.asarray(fit.shape_pdf(cls, grid), dtype=np.float64)


def _overlap(fit: MixtureFit, a: PhotonClass, b: PhotonClass, x: np.ndarray) -> float:
    # bootstrap draws skip the normalisation check: perturbed shapes are still densities
    coefficient = integrate.trapezoid(np.sqrt(class_density(fit, a, x) * class_density(fit, b, x)), x)
    return 1.0 - float(np.clip(coefficient, 0.0, 1.0))


def confidence_pair(
    fit: MixtureFit,
    from_n: Union[PhotonClass, int, str],
    to_n: Union[PhotonClass, int, str],
    points: int = GRID_POINTS,
    grid: Optional[GridSpec] = None,
) -> float:
    """C(from -> to) = 1 - overlap of the two normalised shapes; weights do not enter."""
    a, b = PhotonClass.parse(from_n), PhotonClass.parse(to_n)
    for cls in (a, b):
        if fit.weight(cls) <= 0:
            raise DataError(f"photon class {cls.label} is missing from the fit (weight 0)")
    x = (grid or make_grid(fit, (a, b), points)).values()
    return 1.0 - bhattacharyya(class_density(fit, a, x), class_density(fit, b, x), x)


# --------------------------------------------------------------------------
# Parametric bootstrap
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    values: np.ndarray
    std_error: float
    warnings: Tuple[str, ...] = ()


def psd_factor(covariance: np.ndarray) -> Tuple[np.ndarray, Optional[str]]:
    """Matrix L with L @ L.T equal to the covariance, negative eigenvalues clipped to 0."""
    cov = np.asarray(covariance, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DataError("covariance must be a square matrix")
    if not np.isfinite(cov).all():
        raise DataError("covariance must be finite")
    sym = 0.5 * (cov + cov.T)
    # decompose the correlation matrix: parameters mix seconds and unitless weights
    diag = np.diag(sym)
    scale = np.sqrt(np.where(diag > 0, diag, 1.0))
    corr = sym / np.outer(scale, scale)
    eigvals, eigvecs = linalg.eigh(corr)
    note = None
    if eigvals.size and eigvals.min() < -1e-10 * max(float(np.max(np.abs(eigvals))), 1.0):
        note = f"covariance not positive semi-definite (min correlation eigenvalue {eigvals.min():.3g}); clipped to 0"
    return scale[:, None] * (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))), note


def bootstrap_confidence(
    fit: MixtureFit,
    pair: Tuple[Union[PhotonClass, int, str], Union[PhotonClass, int, str]],
    n_draws: int = BOOTSTRAP_DRAWS,
    seed: int = 0,
    threads: int = 1,
    points: int = GRID_POINTS,
) -> BootstrapResult:
    """Recompute the pair confidence for parameter vectors drawn from N(fit, covariance).

    Draw i uses its own stream ``SeedSequence(seed, spawn_key=(i,))`` so the
    result does not depend on ``threads``.
    """
    if n_draws < 1:
        raise DataError("n_draws must be positive")
    a, b = PhotonClass.parse(pair[0]), PhotonClass.parse(pair[1])
    factor, note = psd_factor(fit.covariance)
    notes = ()
    if note:
        logger.warning(note)
        notes = (note,)
    centre = fit.parameter_vector()
    x = make_grid(fit, (a, b), points).values()

    def block(start: int, stop: int) -> np.ndarray:
        out = np.empty(stop - start)
        for j, i in enumerate(range(start, stop)):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
            drawn = centre + factor @ rng.standard_normal(centre.size)
            out[j] = _overlap(fit.with_parameters(drawn), a, b, x)
        return out

    values = np.concatenate(map_chunks(block, n_draws, threads, DRAW_CHUNK))
    std = float(np.std(values, ddof=1)) if n_draws > 1 else 0.0
    return BootstrapResult(values, std, notes)


def confidence_error(
    fit: MixtureFit,
    pair: Tuple[Union[PhotonClass, int, str], Union[PhotonClass, int, str]],
    n_draws: int = BOOTSTRAP_DRAWS,
    seed: int = 0,
    threads: int = 1,
    points: int = GRID_POINTS,
) -> float:
    """Sample standard deviation of the bootstrap confidences."""
    return bootstrap_confidence(fit, pair, n_draws, seed, threads, points).std_error


def consecutive_pairs(fit: MixtureFit) -> List[Tuple[PhotonClass, PhotonClass]]:
    classes = list(PhotonClass)
    return [(a, b) for a, b in zip(classes, classes[1:]) if fit.weight(a) > 0 and fit.weight(b) > 0]


def build_report(
    fit: MixtureFit,
    pairs: Optional[Sequence[Tuple[Any, Any]]] = None,
    n_bootstrap: int = BOOTSTRAP_DRAWS,
    seed: int = 0,
    threads: int = 1,
    points: int = GRID_POINTS,
    label: str = "",
) -> ConfidenceReport:
    """Confidence and bootstrap error for every consecutive pair present in the fit."""
    notes: List[str] = []
    if pairs is None:
        pairs = consecutive_pairs(fit)
        skipped = [cls.label for cls in PhotonClass if fit.weight(cls) <= 0]
        if skipped:
            notes.append(f"classes {', '.join(skipped)} have zero weight; their pairs are omitted")
    pairs = [(PhotonClass.parse(a), PhotonClass.parse(b)) for a, b in pairs]
    if not pairs:
        raise DataError("no photon-class pair with positive weights to report")

    results = []
    hi = lo = None
    for index, (a, b) in enumerate(pairs):
        grid = make_grid(fit, (a, b), points)
        lo = grid.lo if lo is None else min(lo, grid.lo)
        hi = grid.hi if hi is None else max(hi, grid.hi)
        value = confidence_pair(fit, a, b, grid=grid)
        boot = bootstrap_confidence(fit, (a, b), n_bootstrap, seed + index, threads, points)
        notes.extend(n for n in boot.warnings if n not in notes)
        results.append(PairConfidence(a.label, b.label, value, boot.std_error))
        logger.info("C%s->%s = %.4f +- %.4f", a.label, b.label, value, boot.std_error)
    return ConfidenceReport(
        tuple(results),
        GridSpec(lo, hi, int(points)),
        int(n_bootstrap),
        int(seed),
        label or ("" if fit.mu_label is None else f"mu={fit.mu_label:g}"),
        fit.mu_label,
        tuple(notes),
    )


# --------------------------------------------------------------------------
# Cross-system comparison
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonTable:
    systems: Tuple[str, ...]
    rows: Tuple[Tuple[str, Tuple[Optional[PairConfidence], ...]], ...]

    def cell(self, row: int, column: int) -> str:
        entry = self.rows[row][1][column]
        return "-" if entry is None else f"{entry.confidence:.3f} +- {entry.std_error:.3f}"

    def format(self) -> str:
        width = max([12] + [len(s) + 2 for s in self.systems])
        lines = [f"{'':<10}" + "".join(f"{s:>{width}}" for s in self.systems)]
        for r, (name, _) in enumerate(self.rows):
            lines.append(f"{name:<10}" + "".join(f"{self.cell(r, c):>{width}}" for c in range(len(self.systems))))
        return "\n".join(lines)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            header = ["pair"]
            for s in self.systems:
                header += [s, f"{s}_err"]
            writer.writerow(header)
            for name, entries in self.rows:
                row = [name]
                for entry in entries:
                    row += ["-", "-"] if entry is None else [repr(entry.confidence), repr(entry.std_error)]
                writer.writerow(row)
        return path


def compare_systems(reports: Sequence[ConfidenceReport]) -> ComparisonTable:
    """Align several reports into one table of C(n -> n+1); absent pairs stay empty."""
    if not reports:
        raise DataError("compare_systems needs at least one report")
    names = []
    for i, report in enumerate(reports):
        name = report.label or f"system {i + 1}"
        while name in names:
            name = f"{name}'"
        names.append(name)
    keyed: Dict[str, PairConfidence] = {}
    for report in reports:
        for p in report.pairs:
            keyed.setdefault(p.key, p)
    ordered = sorted(keyed.values(), key=lambda p: (p.order, p.to_label))
    rows = []
    for proto in ordered:
        rows.append(
            (
                f"C{proto.from_label}->{proto.to_label}",
                tuple(r.pair(proto.from_label, proto.to_label) for r in reports),
            )
        )
    return ComparisonTable(tuple(names), tuple(rows))

