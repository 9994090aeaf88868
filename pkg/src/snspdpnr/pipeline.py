"""End-to-end pipeline driven by one JSON config.

Stages run in a fixed order (synth | import, align, filter, decimate, basis,
project, fit, confidence); any stage after the source may be left out.
Every stage reads the files the previous stages wrote and records its own
outputs in ``manifest.json`` with a SHA-256 of each file.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from snspdpnr.bundle import (
    import_raw,
    read_basis,
    read_bundle_header,
    read_json,
    read_projections,
    read_trace_bundle,
    write_basis,
    write_json,
    write_labels,
    write_projections,
    write_shifts,
    write_table,
    write_trace_bundle,
)
from snspdpnr.confidence import build_report, compare_systems, ConfidenceReport
from snspdpnr.constants import BOOTSTRAP_DRAWS, F_HI, F_LO, GRID_POINTS, PEAK_WINDOW, REFERENCE_MU, to_ps
from snspdpnr.errors import EXIT_OK, ConfigError, PnrError, StageError, exit_code_for
from snspdpnr.estimators import (
    DerivativeEstimator,
    HybridBasis,
    HybridEstimator,
    PrincipalEstimator,
    ProjectionBasis,
    TimeEstimator,
    build_basis,
    build_hybrid_basis,
)
from snspdpnr.estimators.derivative import centred
from snspdpnr.estimators.hybrid import REFINE_PASSES
from snspdpnr.fitting import (
    BACKGROUND_MIN_DELTA_CHI2,
    MixtureFit,
    compare_ztp,
    fit_mixture,
    fit_single_photon,
    histogram_table,
    make_histogram,
)
from snspdpnr.pca import fit_pca
from snspdpnr.preprocess import align_dataset, bandpass_set, decimate_set
from snspdpnr.synth import SynthConfig, generate_dataset
from snspdpnr.traces import Channel, TraceSet

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"

# Rank of every stage; ranks must strictly increase along the stage list.
STAGE_RANK = {
    "synth": 0,
    "import": 0,
    "align": 1,
    "filter": 2,
    "decimate": 3,
    "basis": 4,
    "project": 5,
    "fit": 6,
    "confidence": 7,
}

STAGE_PARAMS = {
    "synth": {"count", "reference_count", "mu", "reference_mu", "keep_zeros", "config"},
    "import": {
        "measurement", "measurement_sync", "reference", "reference_sync",
        "format", "rows", "cols", "dt", "t0", "mu", "reference_mu",
    },
    "align": {"window", "refine"},
    "filter": {"f_lo", "f_hi"},
    "decimate": {"factor"},
    "basis": {"label", "hybrid"},
    "project": {"estimator", "passes"},
    "fit": {"bins", "background", "background_min_delta_chi2"},
    "confidence": {"n_bootstrap", "grid_points"},
}

ROLES = ("reference", "reference_sync", "measurement", "measurement_sync")
ESTIMATORS = ("derivative", "pc1", "hybrid")


@dataclass(frozen=True)
class StageConfig:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in STAGE_RANK:
            raise ConfigError(f"unknown stage {self.name!r}")
        if not isinstance(self.params, Mapping):
            raise ConfigError(f"stage {self.name!r}: params must be a JSON object")
        unknown = sorted(set(self.params) - STAGE_PARAMS[self.name])
        if unknown:
            raise ConfigError(f"stage {self.name!r}: unknown params {', '.join(unknown)}")

    def get(self, key: str, default: Any = None) -> Any:
        value = self.params.get(key)
        return default if value is None else value

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "params": dict(self.params)}


@dataclass(frozen=True)
class PipelineConfig:
    stages: Tuple[StageConfig, ...]
    seed: int = 0
    threads: int = 1
    output_dir: str = "pnr-out"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        self.validate()

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("pipeline has no stages")
        if self.stages[0].name not in ("synth", "import"):
            raise ConfigError("the first stage must be 'synth' or 'import'")
        ranks = [STAGE_RANK[s.name] for s in self.stages]
        for prev, cur, stage in zip(ranks, ranks[1:], self.stages[1:]):
            if cur <= prev:
                raise ConfigError(f"stage {stage.name!r} is out of order")
        names = self.names
        hybrid = any(s.name == "basis" and s.get("hybrid", False) for s in self.stages)
        if hybrid and any(n in names for n in ("align", "filter", "decimate")):
            raise ConfigError("a hybrid basis works on unaligned, unfiltered traces")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if int(self.threads) < 1:
            raise ConfigError("threads must be at least 1")

    @property
    def names(self) -> List[str]:
        return [s.name for s in self.stages]

    def stage(self, name: str) -> Optional[StageConfig]:
        for s in self.stages:
            if s.name == name:
                return s
        return None

    def with_overrides(self, seed: Optional[int] = None, threads: Optional[int] = None,
                       output_dir: Optional[str] = None) -> "PipelineConfig":
        return PipelineConfig(
            self.stages,
            self.seed if seed is None else seed,
            self.threads if threads is None else threads,
            self.output_dir if output_dir is None else str(output_dir),
        )

    def with_downsampling(self, factor: int, f_lo: float = F_LO, f_hi: float = F_HI) -> "PipelineConfig":
        """Same pipeline with band-pass filtering and decimation inserted after alignment."""
        kept = [s for s in self.stages if s.name not in ("filter", "decimate")]
        later = [i for i, s in enumerate(kept) if STAGE_RANK[s.name] > STAGE_RANK["decimate"]]
        cut = later[0] if later else len(kept)
        extra = [StageConfig("filter", {"f_lo": f_lo, "f_hi": f_hi}), StageConfig("decimate", {"factor": factor})]
        return PipelineConfig(tuple(kept[:cut] + extra + kept[cut:]), self.seed, self.threads, self.output_dir)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "threads": self.threads,
            "output_dir": self.output_dir,
            "stages": [s.to_dict() for s in self.stages],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("pipeline config must be a JSON object")
        unknown = sorted(set(data) - {"seed", "threads", "output_dir", "stages"})
        if unknown:
            raise ConfigError(f"unknown pipeline keys: {', '.join(unknown)}")
        stages = []
        for entry in data.get("stages", ()):
            if not isinstance(entry, Mapping) or "name" not in entry:
                raise ConfigError("every stage needs a 'name'")
            extra = sorted(set(entry) - {"name", "params"})
            if extra:
                raise ConfigError(f"unknown stage keys: {', '.join(extra)}")
            stages.append(StageConfig(str(entry["name"]), dict(entry.get("params") or {})))
        try:
            return cls(tuple(stages), int(data.get("seed", 0)), int(data.get("threads", 1)),
                       str(data.get("output_dir", "pnr-out")))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid pipeline config: {exc}") from exc

    @classmethod
    def load(cls, path: Any) -> "PipelineConfig":
        return cls.from_dict(read_json(path))

    @classmethod
    def default(cls, output_dir: str = "pnr-out", seed: int = 0, threads: int = 1) -> "PipelineConfig":
        stages = (
            StageConfig("synth", {"count": 50000, "reference_count": 20000}),
            StageConfig("align"),
            StageConfig("basis"),
            StageConfig("project"),
            StageConfig("fit"),
            StageConfig("confidence"),
        )
        return cls(stages, seed, threads, output_dir)


@dataclass(frozen=True)
class Artifact:
    path: str
    stage: str
    sha256: str
    size: int

    def to_dict(self) -> Dict[str, Any]:
        return {"path": self.path, "stage": self.stage, "sha256": self.sha256, "bytes": self.size}


@dataclass(frozen=True)
class PipelineResult:
    exit_code: int
    manifest: Dict[str, Any]
    manifest_path: Path
    error: Optional[StageError] = None

    @property
    def ok(self) -> bool:
        return self.exit_code == EXIT_OK


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class PipelineRun:
    """Mutable state of one run: where the current files of every role live."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out_dir = Path(config.output_dir)
        self.threads = int(config.threads)
        self.files: Dict[str, Path] = {}
        self.artifacts: List[Artifact] = []
        self._stage = ""

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def record(self, path: Path) -> Path:
        self.artifacts.append(Artifact(path.name, self._stage, sha256_file(path), path.stat().st_size))
        return path

    def save_set(self, role: str, traces: TraceSet, suffix: str = "") -> Path:
        path = self.record(write_trace_bundle(traces, self.path(f"{role}{suffix}.pnrb")))
        self.files[role] = path
        return path

    def load_set(self, role: str) -> TraceSet:
        if role not in self.files:
            raise ConfigError(f"no {role} traces available at stage {self._stage!r}")
        return read_trace_bundle(self.files[role])

    def require(self, key: str) -> Path:
        if key not in self.files:
            raise ConfigError(f"stage {self._stage!r} needs '{key}' from an earlier stage")
        return self.files[key]

    def run(self) -> PipelineResult:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        children = np.random.SeedSequence(int(self.config.seed)).spawn(len(self.config.stages))
        error: Optional[StageError] = None
        for stage, seq in zip(self.config.stages, children):
            self._stage = stage.name
            logger.info("stage %s", stage.name)
            try:
                STAGE_RUNNERS[stage.name](self, stage, seq)
            except (PnrError, ValueError, OSError) as exc:
                error = StageError(stage.name, exc)
                logger.error("%s", error)
                break
        code = exit_code_for(error)
        manifest = {
            "status": "ok" if error is None else "failed",
            "exit_code": code,
            "failed_stage": None if error is None else error.stage,
            "error": None if error is None else str(error.cause),
            "partial": error is not None,
            "seed": int(self.config.seed),
            "stages": self.config.names,
            "config": self.config.to_dict(),
            "artifacts": [a.to_dict() for a in self.artifacts],
        }
        manifest_path = write_json(manifest, self.path(MANIFEST))
        return PipelineResult(code, manifest, manifest_path, error)


def create_estimator(
    basis: Union[ProjectionBasis, HybridBasis],
    name: str = "derivative",
    calibration: Optional[TraceSet] = None,
    threads: int = 1,
    passes: int = REFINE_PASSES,
) -> TimeEstimator:
    """Estimator by name; a hybrid basis always projects through the hybrid estimator.

    ``pc1`` fits one principal component on ``calibration`` and maps its score
    onto the derivative axis of the same traces.
    """
    if name not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {name!r} (expected one of {', '.join(ESTIMATORS)})")
    if isinstance(basis, HybridBasis):
        if name == "pc1":
            raise ConfigError("the pc1 estimator needs a mean-derivative basis, not a hybrid one")
        return HybridEstimator(basis, passes)
    if name == "hybrid":
        raise ConfigError("the hybrid estimator needs a hybrid basis")
    if name == "pc1":
        if calibration is None:
            raise ConfigError("the pc1 estimator needs calibration traces")
        return PrincipalEstimator.calibrate(fit_pca(calibration, 1, threads), basis, calibration, threads)
    return DerivativeEstimator(basis)


def _stage_seed(seq: np.random.SeedSequence, count: int = 1) -> List[int]:
    return [int(v) for v in seq.generate_state(count, dtype=np.uint64)]


def _run_synth(run: PipelineRun, stage: StageConfig, seq: np.random.SeedSequence) -> None:
    cfg = SynthConfig.from_dict(stage.get("config", {}))
    measurement_seed, reference_seed = _stage_seed(seq, 2)
    keep_zeros = bool(stage.get("keep_zeros", False))
    sets = {
        "reference": generate_dataset(
            cfg.with_updates(mu=float(stage.get("reference_mu", REFERENCE_MU)), seed=reference_seed),
            int(stage.get("reference_count", 20000)), keep_zeros, run.threads,
        ),
        "measurement": generate_dataset(
            cfg.with_updates(mu=float(stage.get("mu", cfg.mu)), seed=measurement_seed),
            int(stage.get("count", 50000)), keep_zeros, run.threads,
        ),
    }
    for role, labeled in sets.items():
        run.save_set(role, labeled.snspd)
        run.save_set(f"{role}_sync", labeled.sync)
        run.record(write_labels(run.path(f"{role}_labels.csv"), labeled.photon_numbers, labeled.true_shifts))


def _run_import(run: PipelineRun, stage: StageConfig, seq: np.random.SeedSequence) -> None:
    fmt = stage.get("format")
    for role in ROLES:
        source = stage.get(role)
        if source is None:
            if role in ("reference", "measurement"):
                raise ConfigError(f"import needs a '{role}' path")
            continue
        channel = Channel.SYNC if role.endswith("_sync") else Channel.SNSPD
        mu = stage.get("reference_mu" if role.startswith("reference") else "mu")
        if fmt is None:
            traces = read_trace_bundle(source)
        else:
            rows = stage.get("rows")
            cols = stage.get("cols")
            if rows is None and cols and fmt != "csv":
                itemsize = 4 if fmt == "f32" else 8
                rows = Path(source).stat().st_size // (int(cols) * itemsize)
            traces = import_raw(source, fmt, rows, cols, stage.get("dt"), float(stage.get("t0", 0.0)), channel)
        if mu is not None:
            traces = TraceSet(traces.data, traces.dt, traces.t0, channel, float(mu), traces.meta)
        run.save_set(role, traces)


def _run_align(run: PipelineRun, stage: StageConfig, seq: np.random.SeedSequence) -> None:
    window = int(stage.get("window", PEAK_WINDOW))
    refine = bool(stage.get("refine", True))
    for role in ("reference", "measurement"):
        if f"{role}_sync" not in run.files:
            raise ConfigError(f"align needs sync traces for the {role} set")
        result = align_dataset(run.load_set(f"{role}_sync"), run.load_set(role), window, run.threads, refine)
        run.save_set(role, result.aligned, "_aligned")
        run.record(write_shifts(run.path(f"{role}_shifts.csv"), result.shifts))


def _run_filter(run: PipelineRun, stage: StageConfig, seq: np.random.SeedSequence) -> None:
    f_lo, f_hi = float(stage.get("f_lo", F_LO)), float(stage.get("f_hi", F_HI))
    for role in ("reference", "measurement"):
        run.save_set(role, bandpass_set(run.load_set(role), f_lo, f_hi), "_filtered")


def _run_decimate(run: PipelineRun, stage: StageConfig, seq: np.random.SeedSequence) -> None:
    factor = stage.get("factor")
    if factor is None:
        raise ConfigError("decimate needs a 'factor'")
    for role in ("reference", "measurement"):
        run.save_set(role, decimate_set(run.load_set(role), int(factor)), "_decimated")


def _run_basis(run: PipelineRun, stage: StageConfig, seq: np.random.SeedSequence) -> None:
    reference = run.load_set("reference")
    if stage.get("hybrid", False):
        basis = build_hybrid_basis(reference, run.load_set("reference_sync"))
    else:
        basis = build_basis(reference, stage.get("label"))
    run.files["basis"] = run.record(write_basis(basis, run.path("basis.pnrv")))


def _run_project(run: PipelineRun, stage: StageConfig, seq: np.random.SeedSequence) -> None:
    if "basis" not in run.files:
        _run_basis(run, StageConfig("basis"), seq)
    basis = read_basis(run.files["basis"])
    name = stage.get("estimator", "derivative")
    passes = int(stage.get("passes", REFINE_PASSES))
    calibration = run.load_set("reference") if name == "pc1" else None
    estimator = create_estimator(basis, name, calibration, run.threads, passes)
    for role in ("reference", "measurement"):
        traces = run.load_set(role)
        sync = run.load_set(f"{role}_sync") if estimator.needs_sync else None
        times = estimator.estimate_set(traces, run.threads, sync)
        if times.size:
            q75, q25 = np.percentile(centred(times), [75, 25])
            logger.info(
                "%s: %d projected times via %s, median %.2f ps, centred IQR %.2f ps",
                role, times.size, estimator.name, to_ps(float(np.median(times))), to_ps(float(q75 - q25)),
            )
        path = run.path("projections.csv" if role == "measurement" else "reference_projections.csv")
        run.files[f"{role}_projections"] = run.record(write_projections(path, times))


def _run_fit(run: PipelineRun, stage: StageConfig, seq: np.random.SeedSequence) -> None:
    bins = stage.get("bins")
    reference_times = read_projections(run.require("reference_projections"))
    measurement_times = read_projections(run.require("measurement_projections"))
    mu = read_bundle_header(run.require("measurement"))["mu_label"]

    single = fit_single_photon(
        make_histogram(reference_times, bins),
        bool(stage.get("background", True)),
        float(stage.get("background_min_delta_chi2", BACKGROUND_MIN_DELTA_CHI2)),
    )
    run.record(write_json(single.to_dict(), run.path("single_photon.json")))
    fit = fit_mixture(measurement_times, single, bins, mu)
    run.files["fit"] = run.record(write_json(fit.to_dict(), run.path("mixture.json")))
    run.record(write_table(run.path("histogram.csv"), histogram_table(fit.histogram, fit.model_counts(fit.histogram))))
    if mu is not None and mu > 0:
        rows = compare_ztp(fit, mu)
        run.record(write_table(run.path("ztp.csv"), {
            "n": [r.label for r in rows],
            "fitted": [r.fitted for r in rows],
            "expected": [r.expected for r in rows],
            "difference": [r.difference for r in rows],
        }))


def _run_confidence(run: PipelineRun, stage: StageConfig, seq: np.random.SeedSequence) -> None:
    fit = MixtureFit.from_dict(read_json(run.require("fit")))
    (seed,) = _stage_seed(seq)
    report = build_report(
        fit,
        n_bootstrap=int(stage.get("n_bootstrap", BOOTSTRAP_DRAWS)),
        seed=seed,
        threads=run.threads,
        points=int(stage.get("grid_points", GRID_POINTS)),
    )
    run.record(write_json(report.to_dict(), run.path("confidence.json")))
    run.record(compare_systems([report]).write_csv(run.path("confidence.csv")))


STAGE_RUNNERS: Dict[str, Callable[[PipelineRun, StageConfig, np.random.SeedSequence], None]] = {
    "synth": _run_synth,
    "import": _run_import,
    "align": _run_align,
    "filter": _run_filter,
    "decimate": _run_decimate,
    "basis": _run_basis,
    "project": _run_project,
    "fit": _run_fit,
    "confidence": _run_confidence,
}


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run every stage in order; a failing stage stops the run and is named in the manifest."""
    result = PipelineRun(config).run()
    logger.info("pipeline %s: %d artifacts, manifest %s",
                result.manifest["status"], len(result.manifest["artifacts"]), result.manifest_path)
    return result


def load_report(path: Any) -> ConfidenceReport:
    return ConfidenceReport.from_dict(read_json(path))
