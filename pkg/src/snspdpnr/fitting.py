"""Histogram fitting of projected times.

The 1-photon peak is an exponentially modified Gaussian (EMG) whose shape is
fitted once on a low-μ set. For any other μ the mixture is fitted in stages:
the amplitude of the fixed 1-photon shape first, then a Gaussian on the
dominant peak of what remains, and whatever is left after that becomes the
tabulated 3+ photon density.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, optimize
from scipy.special import erfc, erfcx, gammaln
from scipy.stats import norm

from snspdpnr.constants import MAX_BINS, MIN_BINS
from snspdpnr.errors import DataError, DegenerateFitError, FitConvergenceError
from snspdpnr.traces import Trace, TraceSet, mean_trace

logger = logging.getLogger(__name__)

_SQRT2 = math.sqrt(2.0)
_TAU_EPS = 1e-9
_MAX_FEV = 5000

# Background term of the single-photon fit is kept only if it improves chi^2 by this much.
BACKGROUND_MIN_DELTA_CHI2 = 25.0
# Stage 1 fits P1 where the 1-photon density exceeds this fraction of its peak.
STAGE1_LEVEL = 0.25
# Stage 2 window around the residual peak, as fractions of its distance to the 1-photon mode.
STAGE2_NEAR = 0.5
STAGE2_FAR = 0.35
MIN_MIXTURE_SAMPLES = 5000
MIN_SINGLE_COUNTS = 1000

MIXTURE_PARAMS = ("m", "s", "tau", "P1", "P2", "mu2", "sigma2")


class PhotonClass(IntEnum):
    ONE = 1
    TWO = 2
    THREE_PLUS = 3

    @property
    def label(self) -> str:
        return "3+" if self is PhotonClass.THREE_PLUS else str(int(self))

    @classmethod
    def parse(cls, value: Any) -> "PhotonClass":
        if isinstance(value, PhotonClass):
            return value
        text = str(value).strip().rstrip("+")
        try:
            number = int(text)
        except ValueError:
            raise DataError(f"unknown photon class {value!r}") from None
        if number >= 3:
            return cls.THREE_PLUS
        if number < 1:
            raise DataError(f"unknown photon class {value!r}")
        return cls(number)


# --------------------------------------------------------------------------
# Densities
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EmgParams:
    """Gaussian(m, s) convolved with an exponential of scale |tau|; tau < 0 skews left, tau = 0 is the Gaussian."""

    m: float
    s: float
    tau: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.m, self.s, self.tau)):
            raise DataError("EMG parameters must be finite")
        if not self.s > 0:
            raise DataError("EMG sigma must be positive")

    @property
    def mean(self) -> float:
        return self.m + self.tau

    @property
    def variance(self) -> float:
        return self.s**2 + self.tau**2

    @property
    def width(self) -> float:
        return math.sqrt(self.variance)

    def to_dict(self) -> Dict[str, float]:
        return {"m": self.m, "s": self.s, "tau": self.tau}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EmgParams":
        return cls(float(data["m"]), float(data["s"]), float(data["tau"]))


@dataclass(frozen=True)
class GaussianParams:
    weight: float
    mean: float
    sigma: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.weight, self.mean, self.sigma)):
            raise DataError("Gaussian parameters must be finite")
        if not self.sigma > 0:
            raise DataError("Gaussian sigma must be positive")
        if not 0 <= self.weight <= 1:
            raise DataError("Gaussian weight must lie in [0, 1]")

    def pdf(self, t: Any) -> np.ndarray:
        return norm.pdf(t, self.mean, self.sigma)

    def to_dict(self) -> Dict[str, float]:
        return {"weight": self.weight, "mean": self.mean, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GaussianParams":
        return cls(float(data["weight"]), float(data["mean"]), float(data["sigma"]))


def _emg(x: np.ndarray, m: float, s: float, tau: float) -> np.ndarray:
    if abs(tau) <= _TAU_EPS * s:
        return norm.pdf(x, m, s)
    if tau < 0:
        x = 2.0 * m - x
        tau = -tau
    u = (x - m) / s
    z = (s / tau - u) / _SQRT2
    out = np.empty_like(u)
    upper = z >= 0
    # erfc(z) = erfcx(z) exp(-z^2) folds the exponentials together where z >= 0
    out[upper] = np.exp(-0.5 * u[upper] ** 2) * erfcx(z[upper])
    lower = ~upper
    out[lower] = np.exp((s / tau) * (0.5 * s / tau - u[lower])) * erfc(z[lower])
    return out / (2.0 * tau)


def emg_pdf(t: Any, params: EmgParams) -> Union[float, np.ndarray]:
    """EMG density at ``t`` (1/seconds when t is in seconds)."""
    x = np.atleast_1d(np.asarray(t, dtype=np.float64))
    out = _emg(x, params.m, params.s, params.tau)
    return float(out[0]) if np.ndim(t) == 0 else out.reshape(np.shape(t))


def emg_sample(params: EmgParams, size: int, rng: np.random.Generator) -> np.ndarray:
    expo = rng.standard_exponential(size) * abs(params.tau)
    return params.m + params.s * rng.standard_normal(size) + math.copysign(1.0, params.tau) * expo


def emg_mode(params: EmgParams) -> float:
    span = 3.0 * (params.s + abs(params.tau))
    res = optimize.minimize_scalar(
        lambda x: -float(emg_pdf(x, params)),
        bounds=(params.m - span, params.m + span),
        method="bounded",
        options={"xatol": 1e-6 * params.s},
    )
    return float(res.x)


def emg_fwhm(params: EmgParams) -> float:
    """Full width at half maximum of the EMG, found numerically."""
    mode = emg_mode(params)
    half = float(emg_pdf(mode, params)) / 2.0
    reach = 20.0 * (params.s + abs(params.tau))

    def excess(x: float) -> float:
        return float(emg_pdf(x, params)) - half

    # times are in seconds, so brentq's absolute default tolerance is far too coarse
    xtol = 1e-9 * params.width
    left = optimize.brentq(excess, mode - reach, mode, xtol=xtol)
    right = optimize.brentq(excess, mode, mode + reach, xtol=xtol)
    return right - left


# --------------------------------------------------------------------------
# Histograms
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        counts = np.asarray(self.counts)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise DataError("histogram edges must be strictly increasing")
        if counts.shape != (edges.size - 1,):
            raise DataError("need one count per bin")
        if np.any(counts < 0) or not np.all(np.equal(np.mod(counts, 1), 0)):
            raise DataError("histogram counts must be non-negative integers")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> Dict[str, Any]:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Histogram":
        return cls(np.asarray(data["edges"], dtype=np.float64), np.asarray(data["counts"], dtype=np.int64))


def freedman_diaconis_bins(samples: np.ndarray) -> int:
    q75, q25 = np.percentile(samples, [75, 25])
    span = float(np.ptp(samples))
    width = 2.0 * (q75 - q25) * samples.size ** (-1.0 / 3.0)
    if width <= 0 or span <= 0:
        raise DegenerateFitError("degenerate histogram: samples have no spread")
    return int(np.clip(math.ceil(span / width), MIN_BINS, MAX_BINS))


def make_histogram(samples: Sequence[float], bins: Optional[int] = None) -> Histogram:
    """Histogram over the sample range; Freedman-Diaconis bin count unless ``bins`` is given."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise DataError("need at least 2 samples to histogram")
    if not np.isfinite(x).all():
        raise DataError("samples must be finite")
    if np.ptp(x) == 0:
        raise DegenerateFitError("degenerate histogram: all samples identical")
    nbins = freedman_diaconis_bins(x) if bins is None else int(bins)
    if nbins < 1:
        raise DataError("bins must be positive")
    counts, edges = np.histogram(x, bins=nbins, range=(float(x.min()), float(x.max())))
    return Histogram(edges, counts)


def histogram_table(hist: Histogram, model: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """Columns ``left,right,count,model`` for CSV export."""
    return {
        "left": hist.edges[:-1],
        "right": hist.edges[1:],
        "count": hist.counts,
        "model": np.full(hist.counts.size, np.nan) if model is None else np.asarray(model, dtype=np.float64),
    }


# --------------------------------------------------------------------------
# Single-photon fit
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SinglePhotonFit:
    g1: EmgParams
    bg: GaussianParams
    covariance: np.ndarray
    reduced_chi2: float
    fwhm: float
    n_counts: int
    background_used: bool
    warnings: Tuple[str, ...] = ()
    histogram: Optional[Histogram] = None

    def model_counts(self, hist: Histogram) -> np.ndarray:
        x, w = hist.centers, hist.widths
        mix = (1.0 - self.bg.weight) * emg_pdf(x, self.g1) + self.bg.weight * self.bg.pdf(x)
        return hist.total * w * mix

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "kind": "single_photon",
            "g1": self.g1.to_dict(),
            "bg": self.bg.to_dict(),
            "covariance": np.asarray(self.covariance).tolist(),
            "param_names": ["m", "s", "tau"],
            "reduced_chi2": self.reduced_chi2,
            "fwhm": self.fwhm,
            "n_counts": self.n_counts,
            "background_used": self.background_used,
            "warnings": list(self.warnings),
        }
        if self.histogram is not None:
            out["histogram"] = self.histogram.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SinglePhotonFit":
        if data.get("kind") != "single_photon":
            raise DataError("not a single-photon fit document")
        hist = data.get("histogram")
        return cls(
            EmgParams.from_dict(data["g1"]),
            GaussianParams.from_dict(data["bg"]),
            np.asarray(data["covariance"], dtype=np.float64),
            float(data["reduced_chi2"]),
            float(data["fwhm"]),
            int(data["n_counts"]),
            bool(data["background_used"]),
            tuple(data.get("warnings", ())),
            Histogram.from_dict(hist) if hist else None,
        )


def _weighted_start(x: np.ndarray, c: np.ndarray) -> Tuple[float, float, float]:
    """(m, s, tau) starting point from histogram median, spread and skewness sign."""
    weights = c / c.sum()
    cdf = np.cumsum(weights)
    median = float(np.interp(0.5, cdf, x))
    q25, q75 = np.interp([0.25, 0.75], cdf, x)
    mean = float(np.dot(weights, x))
    std = math.sqrt(max(float(np.dot(weights, (x - mean) ** 2)), 1e-300))
    skew = float(np.dot(weights, (x - mean) ** 3)) / std**3
    spread = max((q75 - q25) / 1.349, 0.25 * std)
    tau = math.copysign(spread * min(max(abs(skew) / 2.0, 0.05), 0.9) ** (1.0 / 3.0), skew if skew else 1.0)
    s = math.sqrt(max(spread**2 - tau**2, (0.3 * spread) ** 2))
    return median - 0.5 * tau, s, tau


def _curve_fit(model, x, y, p0, sigma, stage: str):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", optimize.OptimizeWarning)
        try:
            popt, pcov = optimize.curve_fit(
                model, x, y, p0=p0, sigma=sigma, absolute_sigma=True, method="lm", maxfev=_MAX_FEV
            )
        except RuntimeError as exc:
            raise FitConvergenceError(f"{stage}: {exc}") from exc
    if not np.all(np.isfinite(popt)):
        raise FitConvergenceError(f"{stage}: non-finite parameters")
    if not np.all(np.isfinite(pcov)):
        raise DegenerateFitError(f"{stage}: rank-deficient Jacobian, covariance undefined")
    chi2 = float(np.sum(((y - model(x, *popt)) / sigma) ** 2))
    return popt, pcov, chi2


def fit_single_photon(
    hist: Histogram,
    background: bool = True,
    min_delta_chi2: float = BACKGROUND_MIN_DELTA_CHI2,
) -> SinglePhotonFit:
    """Fit counts with N * (w * EMG + (1 - w) * Gaussian) by weighted Levenberg-Marquardt.

    The EMG alone is fitted first. The background Gaussian is kept only when
    it converges, its weight lies in (0, 0.5) and it lowers chi^2 by more than
    ``min_delta_chi2`` (default 25).
    """
    if not min_delta_chi2 >= 0:
        raise DataError("min_delta_chi2 must be non-negative")
    total = hist.total
    if total < MIN_SINGLE_COUNTS:
        raise DataError(f"single-photon fit needs >= {MIN_SINGLE_COUNTS} counts, histogram has {total}")
    centers, widths, counts = hist.centers, hist.widths, hist.counts.astype(np.float64)
    m0, s0, tau0 = _weighted_start(centers, counts)
    # Work in units of the starting width around the starting location so all parameters are O(1).
    unit = math.sqrt(s0**2 + tau0**2)
    x = (centers - m0) / unit
    w = widths / unit
    sigma = np.sqrt(np.maximum(counts, 1.0))

    def emg_model(xx, a, m, s, tau):
        return total * w * a * _emg(xx, m, abs(s) + 1e-12, tau)

    p_emg, cov_emg, chi2_emg = _curve_fit(emg_model, x, counts, [1.0, 0.0, s0 / unit, tau0 / unit], sigma, "EMG fit")
    notes: List[str] = []
    popt, pcov, chi2 = p_emg, cov_emg, chi2_emg
    bg = None
    n_free = 4
    if background:
        resid = counts - emg_model(x, *p_emg)
        pos = np.clip(resid, 0.0, None)
        bg_mean = float(np.dot(pos, x) / pos.sum()) if pos.sum() > 0 else 0.0

        def full_model(xx, a, m, s, tau, b, mb, sb):
            return total * w * (a * _emg(xx, m, abs(s) + 1e-12, tau) + b * norm.pdf(xx, mb, abs(sb) + 1e-12))

        try:
            p_full, cov_full, chi2_full = _curve_fit(
                full_model, x, counts, list(p_emg) + [0.01, bg_mean, 3.0], sigma, "EMG+background fit"
            )
            weight = p_full[4] / (p_full[0] + p_full[4])
            if chi2_emg - chi2_full > min_delta_chi2 and 0 < weight < 0.5 and p_full[0] > 0:
                popt, pcov, chi2 = p_full, cov_full, chi2_full
                bg = GaussianParams(float(weight), m0 + unit * float(p_full[5]), unit * abs(float(p_full[6])))
                n_free = 7
            else:
                notes.append("background Gaussian not significant; EMG-only fit kept")
        except (FitConvergenceError, DegenerateFitError, DataError) as exc:
            notes.append(f"background Gaussian fit failed ({exc}); EMG-only fit kept")

    g1 = EmgParams(m0 + unit * float(popt[1]), unit * abs(float(popt[2])), unit * float(popt[3]))
    if bg is None:
        bg = GaussianParams(0.0, g1.mean, g1.width)
    # (m, s, tau) block in physical units; |s| has the same variance as s.
    cov = np.asarray(pcov)[1:4, 1:4] * unit**2
    dof = max(counts.size - n_free, 1)
    fit = SinglePhotonFit(
        g1=g1,
        bg=bg,
        covariance=cov,
        reduced_chi2=chi2 / dof,
        fwhm=emg_fwhm(g1),
        n_counts=total,
        background_used=bg.weight > 0,
        warnings=tuple(notes),
        histogram=hist,
    )
    for note in notes:
        logger.info("single-photon fit: %s", note)
    logger.info(
        "single-photon fit: m=%.4g s=%.4g tau=%.4g FWHM=%.4g chi2/dof=%.3f",
        g1.m, g1.s, g1.tau, fit.fwhm, fit.reduced_chi2,
    )
    return fit


# --------------------------------------------------------------------------
# Mixture fit
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MixtureFit:
    g1: EmgParams
    bg: GaussianParams
    g2: GaussianParams
    p: Tuple[float, float, float]
    residual_grid: np.ndarray
    residual_density: np.ndarray
    covariance: np.ndarray
    mu_label: Optional[float] = None
    reduced_chi2: float = float("nan")
    warnings: Tuple[str, ...] = ()
    param_names: Tuple[str, ...] = MIXTURE_PARAMS
    histogram: Optional[Histogram] = None

    def __post_init__(self):
        p = tuple(float(v) for v in self.p)
        if len(p) != 3 or any(not 0 <= v <= 1 for v in p) or abs(sum(p) - 1) > 1e-6:
            raise DataError(f"weights must lie in [0, 1] and sum to 1, got {p}")
        grid = np.asarray(self.residual_grid, dtype=np.float64)
        dens = np.asarray(self.residual_density, dtype=np.float64)
        if grid.shape != dens.shape or grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise DataError("residual density needs a strictly increasing grid of equal length")
        if np.any(dens < 0):
            raise DataError("residual density must be non-negative")
        if abs(integrate.trapezoid(dens, grid) - 1.0) > 1e-3:
            raise DataError("residual density must integrate to 1")
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (len(self.param_names), len(self.param_names)):
            raise DataError("covariance must be square over param_names")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "residual_grid", grid)
        object.__setattr__(self, "residual_density", dens)
        object.__setattr__(self, "covariance", cov)

    def weight(self, cls: PhotonClass) -> float:
        return self.p[int(cls) - 1]

    def shape_pdf(self, cls: PhotonClass, t: Any) -> np.ndarray:
        """Normalised density of one photon class (weights excluded)."""
        cls = PhotonClass.parse(cls)
        t = np.asarray(t, dtype=np.float64)
        if cls is PhotonClass.ONE:
            return np.asarray(emg_pdf(t, self.g1))
        if cls is PhotonClass.TWO:
            return self.g2.pdf(t)
        return np.interp(t, self.residual_grid, self.residual_density, left=0.0, right=0.0)

    def support(self, cls: PhotonClass, span: float) -> Tuple[float, float]:
        """Interval holding essentially all mass of one class density."""
        cls = PhotonClass.parse(cls)
        if cls is PhotonClass.ONE:
            reach = span * (self.g1.s + abs(self.g1.tau))
            return self.g1.m - reach, self.g1.m + reach
        if cls is PhotonClass.TWO:
            return self.g2.mean - span * self.g2.sigma, self.g2.mean + span * self.g2.sigma
        return float(self.residual_grid[0]), float(self.residual_grid[-1])

    def model_counts(self, hist: Histogram) -> np.ndarray:
        x = hist.centers
        dens = sum(self.p[i] * self.shape_pdf(cls, x) for i, cls in enumerate(PhotonClass))
        return hist.total * hist.widths * dens

    def with_parameters(self, values: Sequence[float]) -> "MixtureFit":
        """Copy with the (m, s, tau, P1, P2, mu2, sigma2) vector replaced; scales are taken as |.|."""
        m, s, tau, p1, p2, mu2, sigma2 = (float(v) for v in values)
        p1 = min(max(p1, 0.0), 1.0)
        p2 = min(max(p2, 0.0), 1.0 - p1)
        return MixtureFit(
            EmgParams(m, abs(s) or self.g1.s, tau),
            self.bg,
            GaussianParams(self.g2.weight, mu2, abs(sigma2) or self.g2.sigma),
            (p1, p2, 1.0 - p1 - p2),
            self.residual_grid,
            self.residual_density,
            self.covariance,
            self.mu_label,
            self.reduced_chi2,
            self.warnings,
            self.param_names,
            None,
        )

    def parameter_vector(self) -> np.ndarray:
        return np.array([self.g1.m, self.g1.s, self.g1.tau, self.p[0], self.p[1], self.g2.mean, self.g2.sigma])

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "kind": "mixture",
            "g1": self.g1.to_dict(),
            "bg": self.bg.to_dict(),
            "g2": self.g2.to_dict(),
            "p": list(self.p),
            "residual_grid": self.residual_grid.tolist(),
            "residual_density": self.residual_density.tolist(),
            "covariance": self.covariance.tolist(),
            "param_names": list(self.param_names),
            "mu_label": self.mu_label,
            "reduced_chi2": self.reduced_chi2,
            "warnings": list(self.warnings),
        }
        if self.histogram is not None:
            out["histogram"] = self.histogram.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MixtureFit":
        if data.get("kind") != "mixture":
            raise DataError("not a mixture fit document")
        hist = data.get("histogram")
        mu = data.get("mu_label")
        return cls(
            EmgParams.from_dict(data["g1"]),
            GaussianParams.from_dict(data["bg"]),
            GaussianParams.from_dict(data["g2"]),
            tuple(data["p"]),
            np.asarray(data["residual_grid"], dtype=np.float64),
            np.asarray(data["residual_density"], dtype=np.float64),
            np.asarray(data["covariance"], dtype=np.float64),
            None if mu is None else float(mu),
            float(data.get("reduced_chi2", float("nan"))),
            tuple(data.get("warnings", ())),
            tuple(data.get("param_names", MIXTURE_PARAMS)),
            Histogram.from_dict(hist) if hist else None,
        )


def _stage2_window(x: np.ndarray, peak: float, mode1: float, width: float) -> np.ndarray:
    distance = peak - mode1
    if abs(distance) < 0.5 * width:
        return np.abs(x - peak) <= 1.5 * width
    near, far = STAGE2_NEAR * abs(distance), STAGE2_FAR * abs(distance)
    if distance < 0:
        lo, hi = peak - far, peak + near
    else:
        lo, hi = peak - near, peak + far
    return (x >= lo) & (x <= hi)


def fit_mixture(
    samples: Sequence[float],
    g1: Union[SinglePhotonFit, EmgParams],
    bins: Optional[int] = None,
    mu_label: Optional[float] = None,
) -> MixtureFit:
    """Staged fit of P1 * G1 + P2 * G2 + P3+ * G3+ to the histogram of projected times."""
    x_all = np.asarray(samples, dtype=np.float64)
    if x_all.size < MIN_MIXTURE_SAMPLES:
        raise DataError(f"mixture fit needs >= {MIN_MIXTURE_SAMPLES} samples, got {x_all.size}")
    if isinstance(g1, SinglePhotonFit):
        shape, bg, g1_cov = g1.g1, g1.bg, np.asarray(g1.covariance)
    else:
        shape, bg, g1_cov = g1, GaussianParams(0.0, g1.mean, g1.width), np.zeros((3, 3))

    hist = make_histogram(x_all, bins)
    x, w = hist.centers, hist.widths
    counts = hist.counts.astype(np.float64)
    total = float(hist.total)
    var = np.maximum(counts, 1.0)
    notes: List[str] = []

    # stage 1: amplitude of the fixed 1-photon shape
    g1_density = np.asarray(emg_pdf(x, shape))
    unit_model = total * w * g1_density
    region = g1_density >= STAGE1_LEVEL * g1_density.max()
    if region.sum() < 3:
        raise DegenerateFitError("stage 1: the 1-photon peak spans fewer than 3 bins")
    info = float(np.sum(unit_model[region] ** 2 / var[region]))
    if not info > 0:
        raise DegenerateFitError("stage 1: the 1-photon shape has no overlap with the data")
    p1 = float(np.sum(counts[region] * unit_model[region] / var[region])) / info
    var_p1 = 1.0 / info
    if p1 > 1.0:
        notes.append(f"P1 = {p1:.4f} exceeds 1; clamped")
        p1 = 1.0
    elif p1 < 0.0:
        notes.append(f"negative P1 = {p1:.4f}; clamped to 0")
        p1 = 0.0

    # stage 2: Gaussian on the dominant remaining peak
    residual = counts - p1 * unit_model
    mode1 = emg_mode(shape)
    stage2_cov = np.zeros((3, 3))
    if residual.sum() < max(3.0 * math.sqrt(total), 0.005 * total):
        notes.append("no significant counts beyond the 1-photon peak; P2 set to 0")
        p2 = 0.0
        g2 = GaussianParams(0.0, mode1, shape.width)
    else:
        smooth = np.convolve(residual, np.ones(5) / 5.0, mode="same")
        peak = float(x[int(np.argmax(smooth))])
        window = _stage2_window(x, peak, mode1, shape.width)
        if window.sum() < 4:
            window = np.abs(x - peak) <= max(2.0 * w.max(), shape.width)
        if window.sum() < 4:
            raise DegenerateFitError("stage 2: fewer than 4 bins around the 2-photon peak")
        unit = shape.width
        xw = (x[window] - peak) / unit
        ww = w[window] / unit
        resid_mass = max(float(np.clip(residual[window], 0.0, None).sum()), 1.0)

        def gauss_model(xx, a, mu, sig):
            return total * ww * a * norm.pdf(xx, mu, abs(sig) + 1e-12)

        popt, pcov, _ = _curve_fit(
            gauss_model, xw, residual[window], [resid_mass / total / 0.6, 0.0, 1.0], np.sqrt(var[window]), "stage 2"
        )
        p2 = float(popt[0])
        g2 = GaussianParams(0.0, peak + unit * float(popt[1]), unit * abs(float(popt[2])))
        scale = np.diag([1.0, unit, unit])
        stage2_cov = scale @ pcov @ scale
        if p2 < 0.0:
            notes.append(f"negative P2 = {p2:.4f}; clamped to 0")
            p2 = 0.0
        elif p2 > 1.0 - p1:
            notes.append(f"P1 + P2 = {p1 + p2:.4f} exceeds 1; P2 clamped")
            p2 = 1.0 - p1

    # stage 3: the clipped remainder is the 3+ density
    p3 = max(0.0, 1.0 - p1 - p2)
    remainder = np.clip(counts - total * w * (p1 * g1_density + p2 * g2.pdf(x)), 0.0, None)
    step = float(np.mean(w))
    grid = np.concatenate([[x[0] - step], x, [x[-1] + step]])
    table = np.concatenate([[0.0], remainder, [0.0]])
    area = float(integrate.trapezoid(table, grid))
    if area > 0:
        density = table / area
    else:
        notes.append("3+ remainder is empty; its density falls back to the 2-photon shape")
        density = norm.pdf(grid, g2.mean, g2.sigma)
        density = density / integrate.trapezoid(density, grid)

    cov = np.zeros((len(MIXTURE_PARAMS), len(MIXTURE_PARAMS)))
    cov[0:3, 0:3] = g1_cov
    cov[3, 3] = var_p1
    cov[4:7, 4:7] = stage2_cov

    fit = MixtureFit(
        g1=shape,
        bg=bg,
        g2=g2,
        p=(p1, p2, p3),
        residual_grid=grid,
        residual_density=density,
        covariance=cov,
        mu_label=mu_label,
        warnings=tuple(notes),
        histogram=hist,
    )
    model = fit.model_counts(hist)
    chi2 = float(np.sum((counts - model) ** 2 / var))
    fit = replace(fit, reduced_chi2=chi2 / max(counts.size - 3, 1))
    for note in notes:
        logger.warning("mixture fit: %s", note)
    logger.info("mixture fit%s: P1=%.4f P2=%.4f P3+=%.4f", _mu_suffix(mu_label), p1, p2, p3)
    return fit


def _mu_suffix(mu: Optional[float]) -> str:
    return "" if mu is None else f" (mu={mu:g})"


def fit_many(
    sets: Mapping[float, Sequence[float]],
    g1: Union[SinglePhotonFit, EmgParams],
    bins: Optional[int] = None,
    threads: int = 1,
) -> Dict[float, MixtureFit]:
    """Fit several μ sets with the same 1-photon shape; each fit runs in its own thread."""
    keys = list(sets)
    if threads <= 1:
        return {k: fit_mixture(sets[k], g1, bins, k) for k in keys}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {k: pool.submit(fit_mixture, sets[k], g1, bins, k) for k in keys}
        return {k: futures[k].result() for k in keys}


# --------------------------------------------------------------------------
# Photon statistics and classification
# --------------------------------------------------------------------------


def ztp_pmf(n: int, mu: float) -> float:
    """Zero-truncated Poisson probability mu^n / (n! (e^mu - 1))."""
    if int(n) != n or n < 1:
        raise DataError("n must be a positive integer")
    if not mu > 0 or not math.isfinite(mu):
        raise DataError("mu must be positive")
    return math.exp(n * math.log(mu) - gammaln(n + 1) - math.log(math.expm1(mu)))


def ztp_tail(n: int, mu: float) -> float:
    """P(N >= n) under the zero-truncated Poisson law."""
    return max(0.0, 1.0 - sum(ztp_pmf(k, mu) for k in range(1, n)))


@dataclass(frozen=True)
class ZtpRow:
    label: str
    fitted: float
    expected: float

    @property
    def difference(self) -> float:
        return self.fitted - self.expected


def compare_ztp(fit: MixtureFit, mu: Optional[float] = None) -> List[ZtpRow]:
    """Fitted P1, P2, P3+ beside the zero-truncated Poisson values for the set's μ."""
    mu = fit.mu_label if mu is None else mu
    if mu is None:
        raise DataError("compare_ztp needs a μ (fit has no mu_label)")
    return [
        ZtpRow("1", fit.p[0], ztp_pmf(1, mu)),
        ZtpRow("2", fit.p[1], ztp_pmf(2, mu)),
        ZtpRow("3+", fit.p[2], ztp_tail(3, mu)),
    ]


def class_scores(dt: Any, fit: MixtureFit) -> np.ndarray:
    """P_n * G_n(dt) for n = 1, 2, 3+ (last axis)."""
    t = np.asarray(dt, dtype=np.float64)
    return np.stack([fit.p[i] * fit.shape_pdf(cls, t) for i, cls in enumerate(PhotonClass)], axis=-1)


def classify(dt: float, fit: MixtureFit) -> PhotonClass:
    """Maximum a posteriori photon class; ties go to the lower class."""
    return PhotonClass(int(np.argmax(class_scores(dt, fit))) + 1)


def classify_many(dts: Sequence[float], fit: MixtureFit) -> np.ndarray:
    return np.argmax(class_scores(np.asarray(dts, dtype=np.float64), fit), axis=-1) + 1


def class_mean_traces(traces: TraceSet, dts: Sequence[float], fit: MixtureFit) -> Dict[PhotonClass, Trace]:
    """Mean trace of every class that received at least one trace."""
    dts = np.asarray(dts, dtype=np.float64)
    if dts.size != len(traces):
        raise DataError("one projected time per trace required")
    classes = classify_many(dts, fit)
    out = {}
    for cls in PhotonClass:
        idx = np.flatnonzero(classes == int(cls))
        if idx.size:
            out[cls] = mean_trace(traces.subset(idx))
    return out
