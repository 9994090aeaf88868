"""On-disk formats: trace bundles, CSV tables, raw matrix import and basis sidecars.

Trace bundle (all little-endian)::

    magic "PNRB" | version u16 | channel u8 | reserved u8 | trace_count u32
    samples_per_trace u32 | dt f64 | t0 f64 | mu_present u8 | mu f64
    meta_len u32 | meta (UTF-8 JSON) | trace_count*samples_per_trace f32, row-major

Basis sidecar::

    magic "PNRV" | version u16 | kind u8 (0 derivative, 1 hybrid) | reserved u8
    samples u32 | dt f64 | t0 f64 | c_a f64 | c_b f64 | label_len u32 | label (UTF-8)
    derivative: deriv f64[samples]; hybrid: snspd_part f64[samples], sync_part f64[samples]
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from snspdpnr.errors import (
    BundleError,
    DataError,
    MalformedHeaderError,
    ShapeMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from snspdpnr.estimators.derivative import ProjectionBasis, centred
from snspdpnr.estimators.hybrid import HybridBasis
from snspdpnr.traces import Channel, Trace, TraceSet

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

BUNDLE_MAGIC = b"PNRB"
BUNDLE_VERSION = 1
_BUNDLE_HEADER = struct.Struct("<4sHBBIIddBdI")

BASIS_MAGIC = b"PNRV"
BASIS_VERSION = 1
_BASIS_HEADER = struct.Struct("<4sHBBIddddI")
_KIND_DERIVATIVE = 0
_KIND_HYBRID = 1


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialise {type(value).__name__} to JSON")


def dumps_json(obj: Any, indent: Optional[int] = None) -> str:
    """Deterministic JSON: sorted keys, numpy scalars unwrapped."""
    separators = (",", ":") if indent is None else (",", ": ")
    return json.dumps(obj, sort_keys=True, separators=separators, ensure_ascii=False, default=_json_default, indent=indent)


def write_json(obj: Any, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(dumps_json(obj, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


# --------------------------------------------------------------------------
# Trace bundles
# --------------------------------------------------------------------------


def encode_trace_bundle(traces: TraceSet) -> bytes:
    meta = dumps_json(dict(traces.meta)).encode("utf-8")
    mu_present = traces.mu_label is not None
    header = _BUNDLE_HEADER.pack(
        BUNDLE_MAGIC,
        BUNDLE_VERSION,
        int(traces.channel),
        0,
        len(traces),
        traces.samples_per_trace,
        traces.dt,
        traces.t0,
        1 if mu_present else 0,
        traces.mu_label if mu_present else 0.0,
        len(meta),
    )
    payload = np.ascontiguousarray(traces.data, dtype="<f4").tobytes()
    return header + meta + payload


def _check_header_fields(source: str, channel: int, reserved: int, mu_present: int, mu: float) -> None:
    if reserved != 0 or mu_present not in (0, 1) or channel not in (0, 1):
        raise MalformedHeaderError(f"{source}: invalid header fields")
    # an absent mu is written as +0.0; anything else would not re-encode to the same bytes
    if not mu_present and (mu != 0.0 or np.signbit(mu)):
        raise MalformedHeaderError(f"{source}: mu field is {mu!r} but mu_present is 0")


def decode_trace_bundle(buf: bytes, source: str = "<bytes>") -> TraceSet:
    if len(buf) < _BUNDLE_HEADER.size:
        raise MalformedHeaderError(f"{source}: file shorter than the bundle header")
    (magic, version, channel, reserved, count, samples, dt, t0, mu_present, mu, meta_len) = _BUNDLE_HEADER.unpack_from(buf)
    if magic != BUNDLE_MAGIC:
        raise MalformedHeaderError(f"{source}: bad magic {magic!r}")
    if version != BUNDLE_VERSION:
        raise VersionMismatchError(f"{source}: bundle version {version}, expected {BUNDLE_VERSION}")
    _check_header_fields(source, channel, reserved, mu_present, mu)
    offset = _BUNDLE_HEADER.size
    if len(buf) < offset + meta_len:
        raise MalformedHeaderError(f"{source}: metadata blob runs past end of file")
    try:
        meta = json.loads(buf[offset:offset + meta_len].decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{source}: metadata is not UTF-8 JSON ({exc})") from exc
    if not isinstance(meta, dict):
        raise MalformedHeaderError(f"{source}: metadata must be a JSON object")
    offset += meta_len

    expected = count * samples * 4
    available = len(buf) - offset
    if available < expected:
        raise TruncatedPayloadError(
            f"{source}: payload holds {available // 4} values, header declares {count} x {samples}"
        )
    if available > expected:
        raise BundleError(f"{source}: {available - expected} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=count * samples, offset=offset)
    data = data.astype(np.float64).reshape(count, samples)
    try:
        return TraceSet(data, dt, t0, Channel(channel), mu if mu_present else None, meta)
    except DataError as exc:
        raise MalformedHeaderError(f"{source}: {exc}") from exc


def write_trace_bundle(traces: TraceSet, path: PathLike) -> Path:
    path = Path(path)
    path.write_bytes(encode_trace_bundle(traces))
    logger.debug("wrote %d traces to %s", len(traces), path)
    return path


def read_trace_bundle(path: PathLike) -> TraceSet:
    path = Path(path)
    traces = decode_trace_bundle(path.read_bytes(), str(path))
    logger.debug("read %d traces x %d samples from %s", len(traces), traces.samples_per_trace, path)
    return traces


def read_bundle_header(path: PathLike) -> Dict[str, Any]:
    """Header fields of a bundle without loading its payload."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(_BUNDLE_HEADER.size)
    if len(head) < _BUNDLE_HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the bundle header")
    magic, version, channel, reserved, count, samples, dt, t0, mu_present, mu, _ = _BUNDLE_HEADER.unpack(head)
    if magic != BUNDLE_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != BUNDLE_VERSION:
        raise VersionMismatchError(f"{path}: bundle version {version}, expected {BUNDLE_VERSION}")
    _check_header_fields(str(path), channel, reserved, mu_present, mu)
    return {
        "channel": Channel(channel),
        "count": count,
        "samples": samples,
        "dt": dt,
        "t0": t0,
        "mu_label": mu if mu_present else None,
    }


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def write_csv_traces(traces: TraceSet, path: PathLike) -> Path:
    """One trace per row under a ``t=<seconds>`` header row."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"t={t!r}" for t in traces.times().tolist()])
        for row in traces.data:
            writer.writerow([f"{v:.9g}" for v in row.tolist()])
    return path


def _parse_time_header(cells: Sequence[str]) -> Optional[np.ndarray]:
    if not cells or not cells[0].strip().startswith("t="):
        return None
    try:
        return np.array([float(c.strip()[2:]) for c in cells])
    except ValueError as exc:
        raise DataError(f"bad CSV time header: {exc}") from exc


def read_csv_traces(
    path: PathLike,
    channel: Channel = Channel.SNSPD,
    mu_label: Optional[float] = None,
    dt: Optional[float] = None,
    t0: float = 0.0,
    meta: Optional[Mapping[str, Any]] = None,
) -> TraceSet:
    """Read a CSV trace matrix; the grid comes from the ``t=`` header, else from ``dt``/``t0``."""
    path = Path(path)
    with open(path, newline="") as f:
        rows = [row for row in csv.reader(f) if row]
    if not rows:
        raise DataError(f"{path}: empty CSV")
    times = _parse_time_header(rows[0])
    body = rows[1:] if times is not None else rows
    try:
        data = np.array([[float(v) for v in row] for row in body], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric CSV cell ({exc})") from exc
    width = len(times) if times is not None else len(rows[0])
    if body and data.ndim != 2:
        raise ShapeMismatchError(f"{path}: rows have different lengths")
    data = data.reshape(len(body), width)
    if times is not None:
        if times.size < 2:
            raise DataError(f"{path}: need at least 2 time columns")
        steps = np.diff(times)
        if not np.allclose(steps, steps[0], rtol=1e-6, atol=0.0) or steps[0] <= 0:
            raise DataError(f"{path}: time header is not a uniform increasing grid")
        dt, t0 = float(steps[0]), float(times[0])
    elif dt is None:
        raise DataError(f"{path}: CSV has no t= header, dt must be given")
    return TraceSet(data, dt, t0, channel, mu_label, meta or {"source_id": str(path)})


def import_raw(
    path: PathLike,
    fmt: str,
    rows: Optional[int] = None,
    cols: Optional[int] = None,
    dt: Optional[float] = None,
    t0: float = 0.0,
    channel: Channel = Channel.SNSPD,
    mu_label: Optional[float] = None,
) -> TraceSet:
    """Import a plain CSV or raw little-endian f32/f64 matrix (rows = traces)."""
    path = Path(path)
    fmt = fmt.lower()
    meta = {"source_id": str(path), "import_format": fmt}
    if fmt == "csv":
        traces = read_csv_traces(path, channel, mu_label, dt, t0, meta)
        if rows is not None and len(traces) != rows:
            raise ShapeMismatchError(f"{path}: declared {rows} rows, found {len(traces)}")
        if cols is not None and traces.samples_per_trace != cols:
            raise ShapeMismatchError(f"{path}: declared {cols} columns, found {traces.samples_per_trace}")
        return traces
    dtypes = {"f32": "<f4", "f64": "<f8"}
    if fmt not in dtypes:
        raise DataError(f"unknown import format {fmt!r} (expected csv, f32 or f64)")
    if rows is None or cols is None or dt is None:
        raise DataError("raw matrix import needs rows, cols and dt")
    if rows < 0 or cols < 2:
        raise DataError("rows must be >= 0 and cols >= 2")
    dtype = np.dtype(dtypes[fmt])
    size = path.stat().st_size
    if size != rows * cols * dtype.itemsize:
        raise ShapeMismatchError(
            f"{path}: {size} bytes, declared shape {rows} x {cols} {fmt} needs {rows * cols * dtype.itemsize}"
        )
    data = np.fromfile(path, dtype=dtype).astype(np.float64).reshape(rows, cols)
    return TraceSet(data, dt, t0, channel, mu_label, meta)


def write_table(path: PathLike, columns: Mapping[str, Sequence[Any]]) -> Path:
    """Write equal-length columns as CSV; floats keep full precision."""
    path = Path(path)
    names = list(columns)
    values = [list(columns[name]) for name in names]
    lengths = {len(v) for v in values}
    if len(lengths) > 1:
        raise DataError("table columns differ in length")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(names)
        for row in zip(*values):
            writer.writerow([_cell(v) for v in row])
    return path


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def read_table(path: PathLike) -> Dict[str, np.ndarray]:
    """Read a numeric CSV table written by :func:`write_table` into named columns."""
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty table") from None
        rows: List[List[str]] = [row for row in reader if row]
    out = {}
    for j, name in enumerate(header):
        try:
            out[name] = np.array([float(row[j]) if row[j] != "" else np.nan for row in rows], dtype=np.float64)
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: column {name!r} is not numeric ({exc})") from exc
    return out


def write_labels(path: PathLike, photon_numbers: np.ndarray, true_shifts: np.ndarray) -> Path:
    """Synthetic ground truth, one row per trace: ``index,n,true_shift_s``."""
    n = np.asarray(photon_numbers, dtype=np.int64)
    return write_table(path, {"index": np.arange(n.size), "n": n, "true_shift_s": np.asarray(true_shifts, dtype=np.float64)})


def write_shifts(path: PathLike, shifts: np.ndarray) -> Path:
    """Per-trace alignment shifts: ``index,shift_s``."""
    shifts = np.asarray(shifts, dtype=np.float64)
    return write_table(path, {"index": np.arange(shifts.size), "shift_s": shifts})


def write_projections(path: PathLike, times: np.ndarray) -> Path:
    """Projected times: ``index,dt_s,dt_centred_s``.

    ``dt_centred_s`` has the median removed; fits read the raw ``dt_s``.
    """
    times = np.asarray(times, dtype=np.float64)
    return write_table(path, {"index": np.arange(times.size), "dt_s": times, "dt_centred_s": centred(times)})


def read_projections(path: PathLike) -> np.ndarray:
    """Raw projected times from a projection table (a bare ``dt`` column is accepted too)."""
    table = read_table(path)
    for name in ("dt_s", "dt"):
        if name in table:
            return table[name]
    raise DataError(f"{path}: projection table has no dt_s column")


# --------------------------------------------------------------------------
# Basis sidecars
# --------------------------------------------------------------------------


def encode_basis(basis: Union[ProjectionBasis, HybridBasis]) -> bytes:
    if isinstance(basis, HybridBasis):
        kind, dt, t0 = _KIND_HYBRID, basis.dt, 0.0
        c_a, c_b = basis.norm_c_snspd, basis.norm_c_sync
        vectors = [basis.snspd_part, basis.sync_part]
    else:
        kind, dt, t0 = _KIND_DERIVATIVE, basis.deriv.dt, basis.deriv.t0
        c_a, c_b = basis.norm_c, 0.0
        vectors = [basis.deriv.samples]
    label = basis.reference_label.encode("utf-8")
    header = _BASIS_HEADER.pack(BASIS_MAGIC, BASIS_VERSION, kind, 0, vectors[0].size, dt, t0, c_a, c_b, len(label))
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in vectors)
    return header + label + body


def decode_basis(buf: bytes, source: str = "<bytes>") -> Union[ProjectionBasis, HybridBasis]:
    if len(buf) < _BASIS_HEADER.size:
        raise MalformedHeaderError(f"{source}: file shorter than the basis header")
    magic, version, kind, reserved, samples, dt, t0, c_a, c_b, label_len = _BASIS_HEADER.unpack_from(buf)
    if magic != BASIS_MAGIC:
        raise MalformedHeaderError(f"{source}: bad magic {magic!r}")
    if version != BASIS_VERSION:
        raise VersionMismatchError(f"{source}: basis version {version}, expected {BASIS_VERSION}")
    if reserved != 0 or kind not in (_KIND_DERIVATIVE, _KIND_HYBRID):
        raise MalformedHeaderError(f"{source}: invalid header fields")
    offset = _BASIS_HEADER.size
    label = buf[offset:offset + label_len].decode("utf-8", errors="replace")
    offset += label_len
    n_vectors = 2 if kind == _KIND_HYBRID else 1
    expected = n_vectors * samples * 8
    if len(buf) - offset != expected:
        raise TruncatedPayloadError(f"{source}: basis payload is {len(buf) - offset} bytes, expected {expected}")
    vectors = np.frombuffer(buf, dtype="<f8", count=n_vectors * samples, offset=offset).astype(np.float64)
    vectors = vectors.reshape(n_vectors, samples)
    if kind == _KIND_HYBRID:
        return HybridBasis(vectors[0], vectors[1], dt, c_a, c_b, label)
    return ProjectionBasis(Trace(vectors[0], dt, t0), c_a, label)


def write_basis(basis: Union[ProjectionBasis, HybridBasis], path: PathLike) -> Path:
    path = Path(path)
    path.write_bytes(encode_basis(basis))
    return path


def read_basis(path: PathLike) -> Union[ProjectionBasis, HybridBasis]:
    path = Path(path)
    return decode_basis(path.read_bytes(), str(path))
