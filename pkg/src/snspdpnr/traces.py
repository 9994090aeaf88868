"""Trace data model and elementary trace arithmetic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from types import MappingProxyType
from typing import Any, Iterator, Mapping, Optional, Sequence

import numpy as np

from snspdpnr.errors import DataError, EmptySetError, LengthMismatchError


class Channel(IntEnum):
    """Role of the digitizer channel a trace set was recorded on."""

    SNSPD = 0
    SYNC = 1

    @classmethod
    def parse(cls, value: Any) -> "Channel":
        if isinstance(value, Channel):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise DataError(f"unknown channel {value!r} (expected snspd or sync)") from None
        try:
            return cls(int(value))
        except ValueError:
            raise DataError(f"unknown channel code {value!r}") from None


def _readonly(values: Any, ndim: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise DataError(f"expected a {ndim}-d sample array, got shape {arr.shape}")
    arr = arr.view()
    arr.flags.writeable = False
    return arr


def _check_dt(dt: float) -> float:
    dt = float(dt)
    if not math.isfinite(dt) or dt <= 0:
        raise DataError("dt must be positive and finite")
    return dt


@dataclass(frozen=True, eq=False)
class Trace:
    """One sampled voltage waveform; t0 is the time of the first sample relative to the trigger."""

    samples: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        samples = _readonly(self.samples, 1)
        if samples.size < 2:
            raise DataError("a trace needs at least 2 samples")
        if not np.isfinite(samples).all():
            raise DataError("trace samples must be finite")
        if not math.isfinite(self.t0):
            raise DataError("t0 must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "dt", _check_dt(self.dt))
        object.__setattr__(self, "t0", float(self.t0))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.size)

    def with_samples(self, samples: Any, dt: Optional[float] = None, t0: Optional[float] = None) -> "Trace":
        return Trace(samples, self.dt if dt is None else dt, self.t0 if t0 is None else t0)


@dataclass(frozen=True, eq=False)
class AcquisitionMeta:
    sample_rate: float
    pre_trigger_samples: int
    source_id: str = ""

    def __post_init__(self):
        if not math.isfinite(self.sample_rate) or self.sample_rate <= 0:
            raise DataError("sample_rate must be positive")
        if self.pre_trigger_samples < 0:
            raise DataError("pre_trigger_samples must be non-negative")

    def matches(self, dt: float) -> bool:
        """True when sample_rate agrees with 1/dt to one part in 10^9."""
        return abs(self.sample_rate * dt - 1.0) <= 1e-9

    def to_dict(self) -> dict:
        return {
            "sample_rate": float(self.sample_rate),
            "pre_trigger_samples": int(self.pre_trigger_samples),
            "source_id": self.source_id,
        }

    @classmethod
    def for_grid(cls, dt: float, t0: float, source_id: str = "") -> "AcquisitionMeta":
        return cls(sample_rate=1.0 / dt, pre_trigger_samples=max(0, int(round(-t0 / dt))), source_id=source_id)


@dataclass(frozen=True, eq=False)
class TraceSet:
    """An ensemble of equal-length traces stored row-major in ``data`` (count x samples)."""

    data: np.ndarray
    dt: float
    t0: float = 0.0
    channel: Channel = Channel.SNSPD
    mu_label: Optional[float] = None
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        data = _readonly(self.data, 2)
        if data.shape[0] > 0 and data.shape[1] < 2:
            raise DataError("traces need at least 2 samples")
        if not np.isfinite(data).all():
            raise DataError("trace samples must be finite")
        if self.mu_label is not None:
            mu = float(self.mu_label)
            if not math.isfinite(mu) or mu < 0:
                raise DataError("mu_label must be a non-negative number")
            object.__setattr__(self, "mu_label", mu)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "dt", _check_dt(self.dt))
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "channel", Channel.parse(self.channel))
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    @classmethod
    def from_traces(
        cls,
        traces: Sequence[Trace],
        channel: Channel = Channel.SNSPD,
        mu_label: Optional[float] = None,
        meta: Optional[Mapping[str, Any]] = None,
    ) -> "TraceSet":
        if not traces:
            raise EmptySetError("cannot infer the sampling grid of an empty trace list")
        first = traces[0]
        for i, tr in enumerate(traces):
            if len(tr) != len(first) or tr.dt != first.dt or tr.t0 != first.t0:
                raise LengthMismatchError(f"trace {i} does not share the grid of trace 0")
        data = np.stack([tr.samples for tr in traces])
        return cls(data, first.dt, first.t0, channel, mu_label, meta or {})

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, index: int) -> Trace:
        return Trace(self.data[index], self.dt, self.t0)

    def __iter__(self) -> Iterator[Trace]:
        for i in range(len(self)):
            yield self[i]

    @property
    def traces(self) -> list:
        return list(self)

    @property
    def samples_per_trace(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.samples_per_trace * self.dt

    @property
    def label(self) -> str:
        """Short human-readable name: the μ label when present."""
        if self.mu_label is not None:
            return f"mu={self.mu_label:g}"
        return str(self.meta.get("label", "unlabelled"))

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples_per_trace)

    def acquisition(self) -> AcquisitionMeta:
        """Acquisition metadata, read from ``meta`` when recorded there, else derived from the grid."""
        if "sample_rate" in self.meta:
            return AcquisitionMeta(
                float(self.meta["sample_rate"]),
                int(self.meta.get("pre_trigger_samples", 0)),
                str(self.meta.get("source_id", "")),
            )
        return AcquisitionMeta.for_grid(self.dt, self.t0, str(self.meta.get("source_id", "")))

    def replace(self, data: Any = None, dt: Optional[float] = None, t0: Optional[float] = None, **meta: Any) -> "TraceSet":
        """Copy with new samples and/or grid; keyword arguments update ``meta``."""
        merged = dict(self.meta)
        merged.update(meta)
        return TraceSet(
            self.data if data is None else data,
            self.dt if dt is None else dt,
            self.t0 if t0 is None else t0,
            self.channel,
            self.mu_label,
            merged,
        )

    def subset(self, indices: Any) -> "TraceSet":
        return self.replace(np.asarray(self.data)[np.asarray(indices)])


def mean_trace(traces: TraceSet) -> Trace:
    """Pointwise mean over the set."""
    if len(traces) == 0:
        raise EmptySetError("mean of an empty trace set")
    return Trace(traces.data.mean(axis=0), traces.dt, traces.t0)


def derivative(trace: Trace) -> Trace:
    """Time derivative: central differences inside, one-sided differences at both ends."""
    if len(trace) < 3:
        raise DataError("derivative needs at least 3 samples")
    return trace.with_samples(np.gradient(trace.samples, trace.dt))


def inner(a: np.ndarray, b: np.ndarray, dt: float) -> float:
    """Discrete inner product including the dt factor."""
    return float(np.dot(a, b) * dt)
