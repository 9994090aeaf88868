"""Labelled synthetic SNSPD and sync trace pairs with known photon numbers.

An n-photon pulse is the single-photon template delayed by
(n - 1) * per_photon_shift plus an exponentially modified Gaussian jitter
draw. A Gaussian trigger-jitter draw shifts both channels together.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from snspdpnr.constants import NS, PRE_TRIGGER, PS, SAMPLE_RATE, TRACE_LEN, sweep_mus
from snspdpnr.errors import ConfigError, DataError
from snspdpnr.parallel import map_chunks
from snspdpnr.preprocess import lowpass_first_order
from snspdpnr.traces import Channel, Trace, TraceSet

logger = logging.getLogger(__name__)

# 10-90 % rise of a Gaussian half in units of its sigma.
_GAUSS_RISE = math.sqrt(2 * math.log(10)) - math.sqrt(2 * math.log(10 / 9))
_LOGISTIC_RISE = 2 * math.log(9)

PULSE_SHAPES = ("edge", "gaussian")


def _from_dict(cls, data: Mapping[str, Any], nested: Optional[Mapping[str, Any]] = None):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{cls.__name__} config must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = dict(data)
    for key, sub in (nested or {}).items():
        if key in kwargs and not isinstance(kwargs[key], sub):
            kwargs[key] = sub.from_dict(kwargs[key])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


@dataclass(frozen=True)
class PulseTemplate:
    """Pulse shape. ``edge``: logistic rise times exponential decay starting at onset.
    ``gaussian``: split Gaussian peaking at onset with the given 10-90 % edge times."""

    rise_time: float
    fall_time: float
    amplitude: float
    onset: float = 0.0
    shape: str = "edge"

    def __post_init__(self):
        if not self.rise_time > 0:
            raise ValueError("rise_time must be positive")
        if not self.fall_time > 0:
            raise ValueError("fall_time must be positive")
        if self.amplitude == 0 or not math.isfinite(self.amplitude):
            raise ValueError("amplitude must be finite and non-zero")
        if self.shape not in PULSE_SHAPES:
            raise ValueError(f"shape must be one of {PULSE_SHAPES}")

    def evaluate(self, t: np.ndarray) -> np.ndarray:
        """Pulse voltage at times ``t`` (seconds relative to the trigger)."""
        x = np.asarray(t, dtype=np.float64) - self.onset
        if self.shape == "gaussian":
            sigma = np.where(x < 0, self.rise_time, self.fall_time) / _GAUSS_RISE
            return self.amplitude * np.exp(-0.5 * (x / sigma) ** 2)
        s = self.rise_time / _LOGISTIC_RISE
        return self.amplitude * expit(x / s) * np.exp(-np.maximum(x, 0.0) / self.fall_time)

    def derivative(self, t: np.ndarray) -> np.ndarray:
        """Analytic time derivative of :meth:`evaluate`."""
        x = np.asarray(t, dtype=np.float64) - self.onset
        if self.shape == "gaussian":
            sigma = np.where(x < 0, self.rise_time, self.fall_time) / _GAUSS_RISE
            return -self.amplitude * x / sigma**2 * np.exp(-0.5 * (x / sigma) ** 2)
        s = self.rise_time / _LOGISTIC_RISE
        logistic = expit(x / s)
        decay = np.exp(-np.maximum(x, 0.0) / self.fall_time)
        slope = logistic * (1 - logistic) / s - np.where(x > 0, logistic / self.fall_time, 0.0)
        return self.amplitude * decay * slope

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PulseTemplate":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class JitterEmg:
    """Arrival-time jitter: Gaussian(0, sigma) plus a one-sided exponential of scale |tau|."""

    sigma: float = 17 * PS
    tau: float = 10 * PS

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("jitter sigma must be non-negative")

    def draw(self, rng: np.random.Generator) -> float:
        gauss = rng.standard_normal()
        expo = rng.standard_exponential()
        return self.sigma * gauss + math.copysign(abs(self.tau) * expo, self.tau)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "JitterEmg":
        return _from_dict(cls, data)


def default_template() -> PulseTemplate:
    return PulseTemplate(rise_time=1.5 * NS, fall_time=8 * NS, amplitude=0.25, onset=10 * NS)


def default_sync_template() -> PulseTemplate:
    return PulseTemplate(rise_time=3.4 * NS, fall_time=3.4 * NS, amplitude=0.5, onset=6 * NS, shape="gaussian")


@dataclass(frozen=True)
class SynthConfig:
    template: PulseTemplate = field(default_factory=default_template)
    per_photon_shift: float = -74 * PS
    jitter_emg: JitterEmg = field(default_factory=JitterEmg)
    noise_sigma: float = 1.25e-3
    mu: float = 1.77
    sample_rate: float = SAMPLE_RATE
    trace_len: int = TRACE_LEN
    pre_trigger: int = PRE_TRIGGER
    sync_template: PulseTemplate = field(default_factory=default_sync_template)
    sync_jitter_sigma: float = 60 * PS
    seed: int = 0
    sync_noise_sigma: float = 0.0
    sync_lowpass_hz: Optional[float] = None

    def __post_init__(self):
        if not (math.isfinite(self.mu) and self.mu >= 0):
            raise ValueError("mu must be finite and non-negative")
        if self.noise_sigma < 0 or self.sync_noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.sync_jitter_sigma < 0:
            raise ValueError("sync_jitter_sigma must be non-negative")
        if not self.trace_len > self.pre_trigger >= 0:
            raise ValueError("need trace_len > pre_trigger >= 0")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.sync_lowpass_hz is not None and not 0 < self.sync_lowpass_hz < self.sample_rate / 2:
            raise ValueError("sync_lowpass_hz must lie below the Nyquist frequency")

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def t0(self) -> float:
        return -self.pre_trigger * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.trace_len)

    def with_updates(self, **changes: Any) -> "SynthConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SynthConfig":
        return _from_dict(
            cls,
            data,
            {"template": PulseTemplate, "sync_template": PulseTemplate, "jitter_emg": JitterEmg},
        )


class Label(NamedTuple):
    n: int
    true_shift: float


@dataclass(frozen=True, eq=False)
class LabeledSet:
    snspd: TraceSet
    sync: TraceSet
    photon_numbers: np.ndarray
    true_shifts: np.ndarray
    trigger_shifts: np.ndarray

    def __post_init__(self):
        sizes = {len(self.snspd), len(self.sync), len(self.photon_numbers), len(self.true_shifts), len(self.trigger_shifts)}
        if len(sizes) != 1:
            raise DataError("SNSPD traces, sync traces and labels must have equal length")

    def __len__(self) -> int:
        return len(self.snspd)

    @property
    def labels(self) -> List[Label]:
        return [Label(int(n), float(s)) for n, s in zip(self.photon_numbers, self.true_shifts)]


def sample_photon_number(mu: float, rng: np.random.Generator) -> int:
    """Poisson-distributed photon count with mean ``mu``."""
    if not math.isfinite(mu) or mu < 0:
        raise DataError("mu must be finite and non-negative")
    return int(rng.poisson(mu))


def trace_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for trace ``index``; identical however the work is split."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def _render(n: int, cfg: SynthConfig, rng: np.random.Generator, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """Draw in a fixed order: trigger, jitter, SNSPD noise, sync noise."""
    trigger = cfg.sync_jitter_sigma * rng.standard_normal()
    jitter = cfg.jitter_emg.draw(rng)
    true_shift = (n - 1) * cfg.per_photon_shift + jitter if n >= 1 else 0.0
    if n >= 1:
        snspd = cfg.template.evaluate(t - true_shift - trigger)
    else:
        snspd = np.zeros_like(t)
    if cfg.noise_sigma > 0:
        snspd = snspd + cfg.noise_sigma * rng.standard_normal(t.size)
    sync = cfg.sync_template.evaluate(t - trigger)
    if cfg.sync_lowpass_hz is not None:
        sync = lowpass_first_order(sync, cfg.dt, cfg.sync_lowpass_hz)
    if cfg.sync_noise_sigma > 0:
        sync = sync + cfg.sync_noise_sigma * rng.standard_normal(t.size)
    return snspd, sync, true_shift, trigger


def generate_pair(n: int, cfg: SynthConfig, rng: np.random.Generator) -> Tuple[Trace, Trace, float]:
    """One (SNSPD, sync) pair with ``n`` absorbed photons; returns the true shift without trigger jitter."""
    if n < 0:
        raise DataError("photon number must be non-negative")
    snspd, sync, true_shift, _ = _render(n, cfg, rng, cfg.times())
    return Trace(snspd, cfg.dt, cfg.t0), Trace(sync, cfg.dt, cfg.t0), true_shift


def _set_meta(cfg: SynthConfig, role: str) -> Dict[str, Any]:
    return {
        "sample_rate": cfg.sample_rate,
        "pre_trigger_samples": cfg.pre_trigger,
        "source_id": f"synth:seed={cfg.seed}:{role}",
    }


def generate_dataset(cfg: SynthConfig, count: int, keep_zeros: bool = False, threads: int = 1) -> LabeledSet:
    """``count`` labelled pairs; without ``keep_zeros`` n = 0 draws are redrawn (detections only)."""
    if count < 1:
        raise DataError("count must be at least 1")
    if not keep_zeros and cfg.mu == 0:
        raise DataError("mu = 0 never produces a detection; use keep_zeros")
    t = cfg.times()

    def chunk(start: int, stop: int):
        snspd = np.empty((stop - start, t.size))
        sync = np.empty((stop - start, t.size))
        labels = np.empty((stop - start, 3))
        for row, index in enumerate(range(start, stop)):
            rng = trace_rng(cfg.seed, index)
            n = sample_photon_number(cfg.mu, rng)
            while n == 0 and not keep_zeros:
                n = sample_photon_number(cfg.mu, rng)
            snspd[row], sync[row], shift, trigger = _render(n, cfg, rng, t)
            labels[row] = (n, shift, trigger)
        return snspd, sync, labels

    parts = map_chunks(chunk, count, threads)
    snspd = np.vstack([p[0] for p in parts])
    sync = np.vstack([p[1] for p in parts])
    labels = np.vstack([p[2] for p in parts])
    result = LabeledSet(
        TraceSet(snspd, cfg.dt, cfg.t0, Channel.SNSPD, cfg.mu, _set_meta(cfg, "snspd")),
        TraceSet(sync, cfg.dt, cfg.t0, Channel.SYNC, cfg.mu, _set_meta(cfg, "sync")),
        labels[:, 0].astype(np.int64),
        labels[:, 1],
        labels[:, 2],
    )
    logger.info("generated %d pairs at mu=%g (mean n=%.3f)", count, cfg.mu, result.photon_numbers.mean())
    return result


def generate_sweep(
    cfg: SynthConfig,
    count: int,
    mus: Optional[Sequence[float]] = None,
    keep_zeros: bool = False,
    threads: int = 1,
) -> Dict[float, LabeledSet]:
    """One labelled set per mean photon number, each from its own spawned seed."""
    mus = sweep_mus() if mus is None else np.asarray(mus, dtype=np.float64)
    children = np.random.SeedSequence(int(cfg.seed)).spawn(len(mus))
    sweep = {}
    for mu, child in zip(mus, children):
        seed = int(child.generate_state(1, dtype=np.uint64)[0])
        sweep[float(mu)] = generate_dataset(cfg.with_updates(mu=float(mu), seed=seed), count, keep_zeros, threads)
    return sweep

