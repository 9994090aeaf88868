import json

import numpy as np
import pytest

from snspdpnr.bundle import read_json, read_table, read_trace_bundle, write_trace_bundle
from snspdpnr.errors import EXIT_DATA, EXIT_OK, ConfigError
from snspdpnr.estimators import (
    DerivativeEstimator,
    HybridEstimator,
    PrincipalEstimator,
    build_basis,
    build_hybrid_basis,
)
from snspdpnr.pipeline import ESTIMATORS, PipelineConfig, StageConfig, create_estimator, load_report, run_pipeline
from snspdpnr.synth import SynthConfig, generate_dataset

SMALL_STAGES = [
    {"name": "synth", "params": {"count": 6000, "reference_count": 2000}},
    {"name": "align"},
    {"name": "basis"},
    {"name": "project"},
    {"name": "fit"},
    {"name": "confidence", "params": {"n_bootstrap": 20, "grid_points": 512}},
]


def _small_config(output_dir, seed=5, threads=1):
    return PipelineConfig.from_dict(
        {"seed": seed, "threads": threads, "output_dir": str(output_dir), "stages": SMALL_STAGES}
    )


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    return run_pipeline(_small_config(tmp_path_factory.mktemp("run-a")))


def _hashes(result):
    return {a["path"]: a["sha256"] for a in result.manifest["artifacts"]}


def test_small_pipeline_succeeds(small_run):
    assert small_run.ok
    manifest = read_json(small_run.manifest_path)
    assert manifest["status"] == "ok"
    assert manifest["exit_code"] == EXIT_OK
    assert manifest["failed_stage"] is None
    assert manifest["stages"] == ["synth", "align", "basis", "project", "fit", "confidence"]
    names = set(_hashes(small_run))
    for expected in (
        "reference.pnrb", "measurement_sync.pnrb", "measurement_labels.csv",
        "reference_aligned.pnrb", "measurement_shifts.csv", "basis.pnrv",
        "projections.csv", "single_photon.json", "mixture.json", "ztp.csv",
        "confidence.json", "confidence.csv",
    ):
        assert expected in names


def test_small_pipeline_outputs(small_run):
    out = small_run.manifest_path.parent
    assert read_table(out / "projections.csv")["dt_s"].size == 6000
    mixture = read_json(out / "mixture.json")
    assert mixture["mu_label"] == pytest.approx(1.77)
    assert sum(mixture["p"]) == pytest.approx(1.0)
    report = load_report(out / "confidence.json")
    c12 = report.pair("1", "2")
    assert 0.0 < c12.confidence < 1.0
    assert c12.std_error >= 0.0
    aligned = read_trace_bundle(out / "measurement_aligned.pnrb")
    assert aligned.meta["aligned"] is True


def test_pipeline_is_reproducible_across_directories_and_threads(small_run, tmp_path):
    again = run_pipeline(_small_config(tmp_path / "b", threads=3))
    assert again.ok
    assert _hashes(again) == _hashes(small_run)


def test_seed_changes_the_data(small_run, tmp_path):
    config = PipelineConfig.from_dict(
        {"seed": 6, "output_dir": str(tmp_path), "stages": [{"name": "synth", "params": {"count": 10, "reference_count": 10}}]}
    )
    other = run_pipeline(config)
    assert _hashes(other)["reference.pnrb"] != _hashes(small_run)["reference.pnrb"]


def test_failing_source_stage_writes_a_partial_manifest(tmp_path):
    bad = tmp_path / "bad.pnrb"
    bad.write_bytes(b"not a bundle at all, just some bytes" * 4)
    config = PipelineConfig.from_dict({
        "output_dir": str(tmp_path / "out"),
        "stages": [{"name": "import", "params": {"reference": str(bad), "measurement": str(bad)}}, {"name": "basis"}],
    })
    result = run_pipeline(config)
    assert result.exit_code == EXIT_DATA
    manifest = json.loads(result.manifest_path.read_text())
    assert manifest["status"] == "failed"
    assert manifest["failed_stage"] == "import"
    assert manifest["partial"] is True
    assert "magic" in manifest["error"]


def test_failure_keeps_earlier_artifacts(tmp_path):
    labeled = generate_dataset(SynthConfig(mu=0.003, seed=2), 40)
    ref = write_trace_bundle(labeled.snspd, tmp_path / "ref.pnrb")
    config = PipelineConfig.from_dict({
        "output_dir": str(tmp_path / "out"),
        "stages": [
            {"name": "import", "params": {"reference": str(ref), "measurement": str(ref)}},
            {"name": "basis"},
            {"name": "project"},
            {"name": "fit"},
        ],
    })
    result = run_pipeline(config)
    assert result.exit_code == EXIT_DATA
    assert result.manifest["failed_stage"] == "fit"
    assert result.error.stage == "fit"
    assert "projections.csv" in _hashes(result)
    assert (tmp_path / "out" / "basis.pnrv").exists()


def test_import_of_raw_matrices(tmp_path):
    labeled = generate_dataset(SynthConfig(mu=0.003, seed=2), 30)
    raw = tmp_path / "ref.f32"
    labeled.snspd.data.astype("<f4").tofile(raw)
    config = PipelineConfig.from_dict({
        "output_dir": str(tmp_path / "out"),
        "stages": [
            {"name": "import", "params": {
                "reference": str(raw), "measurement": str(raw),
                "format": "f32", "cols": 512, "dt": 2e-10, "t0": -4e-9, "mu": 0.5,
            }},
            {"name": "basis"},
        ],
    })
    result = run_pipeline(config)
    assert result.ok
    measurement = read_trace_bundle(tmp_path / "out" / "measurement.pnrb")
    assert len(measurement) == 30
    assert measurement.mu_label == 0.5


def test_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(())
    with pytest.raises(ConfigError):
        PipelineConfig((StageConfig("align"), StageConfig("basis")))
    with pytest.raises(ConfigError):
        PipelineConfig((StageConfig("synth"), StageConfig("basis"), StageConfig("align")))
    with pytest.raises(ConfigError):
        PipelineConfig((StageConfig("synth"), StageConfig("align"), StageConfig("basis", {"hybrid": True})))
    with pytest.raises(ConfigError):
        StageConfig("smooth")
    with pytest.raises(ConfigError):
        StageConfig("fit", {"binz": 10})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"stages": [{"name": "synth"}], "colour": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"stages": [{"name": "synth"}], "threads": 0})


def test_config_file_round_trip(tmp_path):
    config = _small_config(tmp_path / "x", seed=9)
    path = tmp_path / "pipeline.json"
    path.write_text(json.dumps(config.to_dict()))
    assert PipelineConfig.load(path) == config


def test_with_downsampling_places_filter_and_decimate_after_alignment():
    config = PipelineConfig.default().with_downsampling(26)
    assert config.names == ["synth", "align", "filter", "decimate", "basis", "project", "fit", "confidence"]
    assert config.stage("decimate").get("factor") == 26
    assert config.stage("filter").get("f_lo") == 10e6
    again = config.with_downsampling(13)
    assert again.names == config.names
    assert again.stage("decimate").get("factor") == 13


def test_overrides():
    config = PipelineConfig.default().with_overrides(seed=4, threads=2, output_dir="elsewhere")
    assert (config.seed, config.threads, config.output_dir) == (4, 2, "elsewhere")
    assert PipelineConfig.default().stage("synth").get("count") == 50000


@pytest.mark.slow
def test_hybrid_pipeline_skips_alignment(tmp_path):
    config = PipelineConfig.from_dict({
        "seed": 3,
        "output_dir": str(tmp_path),
        "stages": [
            {"name": "synth", "params": {"count": 6000, "reference_count": 2000}},
            {"name": "basis", "params": {"hybrid": True}},
            {"name": "project"},
            {"name": "fit"},
        ],
    })
    result = run_pipeline(config)
    assert result.ok
    times = read_table(tmp_path / "reference_projections.csv")["dt_s"]
    # trigger jitter (60 ps) is cancelled: what is left is the 1-photon jitter
    assert np.std(times) < 30e-12


def test_create_estimator_by_name(reference_pairs):
    snspd, sync = reference_pairs.snspd, reference_pairs.sync
    basis = build_basis(snspd)
    hybrid = build_hybrid_basis(snspd, sync)
    assert ESTIMATORS == ("derivative", "pc1", "hybrid")

    assert isinstance(create_estimator(basis), DerivativeEstimator)
    pc1 = create_estimator(basis, "pc1", snspd)
    assert isinstance(pc1, PrincipalEstimator)
    assert np.corrcoef(pc1.estimate_set(snspd), create_estimator(basis).estimate_set(snspd))[0, 1] > 0.95

    for name in ("derivative", "hybrid"):
        est = create_estimator(hybrid, name, passes=2)
        assert isinstance(est, HybridEstimator)
        assert est.needs_sync and est.passes == 2

    with pytest.raises(ConfigError):
        create_estimator(basis, "hybrid")
    with pytest.raises(ConfigError):
        create_estimator(hybrid, "pc1", snspd)
    with pytest.raises(ConfigError):
        create_estimator(basis, "pc1")
    with pytest.raises(ConfigError):
        create_estimator(basis, "matched-filter")


def test_pc1_projection_stage(tmp_path):
    config = PipelineConfig.from_dict({
        "seed": 4,
        "output_dir": str(tmp_path),
        "stages": [
            {"name": "synth", "params": {"count": 500, "reference_count": 500}},
            {"name": "align"},
            {"name": "basis"},
            {"name": "project", "params": {"estimator": "pc1"}},
        ],
    })
    assert run_pipeline(config).ok
    table = read_table(tmp_path / "reference_projections.csv")
    assert table["dt_s"].size == 500
    assert np.median(table["dt_centred_s"]) == pytest.approx(0.0, abs=1e-18)
    assert np.isfinite(table["dt_s"]).all()
