"""Desk-scale reproductions of the headline behaviour.

The quick identities run by default; the end-to-end runs are marked ``slow``.
"""

import numpy as np
import pytest
from scipy import stats

from snspdpnr.bundle import read_json, read_table
from snspdpnr.constants import PS
from snspdpnr.estimators import build_basis, build_hybrid_basis, hybrid_project_set, project_set, project_time
from snspdpnr.fitting import ztp_pmf
from snspdpnr.pca import cosine_similarity, fit_pca, pca_scores_set
from snspdpnr.pipeline import PipelineConfig, load_report, run_pipeline
from snspdpnr.preprocess import align_dataset
from snspdpnr.synth import SynthConfig, generate_dataset
from snspdpnr.traces import mean_trace

FAST_FRONT_END = {
    "sample_rate": 128e9,
    "trace_len": 3328,
    "pre_trigger": 520,
    "template": {"rise_time": 1.5e-9, "fall_time": 2e-9, "amplitude": 0.25, "onset": 10e-9, "shape": "edge"},
}


def _run(tmp_path, name, count, reference_count, synth=None, downsample=None, n_bootstrap=50, seed=17):
    config = PipelineConfig.from_dict({
        "seed": seed,
        "output_dir": str(tmp_path / name),
        "stages": [
            {"name": "synth", "params": {
                "count": count, "reference_count": reference_count, "config": synth or {},
            }},
            {"name": "align"},
            {"name": "basis"},
            {"name": "project"},
            {"name": "fit"},
            {"name": "confidence", "params": {"n_bootstrap": n_bootstrap}},
        ],
    })
    if downsample:
        config = config.with_downsampling(downsample)
    result = run_pipeline(config)
    assert result.ok, result.manifest.get("error")
    return tmp_path / name


def test_reference_light_is_almost_all_single_photons():
    assert ztp_pmf(1, 0.003) == pytest.approx(0.99850, abs=1e-5)


def test_mean_trace_is_orthogonal_to_its_derivative():
    reference = generate_dataset(SynthConfig(mu=0.003, noise_sigma=0.0, seed=1), 200).snspd
    basis = build_basis(reference)
    duration = reference.samples_per_trace * reference.dt
    mean = mean_trace(reference)
    assert abs(project_time(basis, mean)) < 1e-9 * duration
    assert abs(project_time(basis, mean.with_samples(1.3 * mean.samples))) < 1e-9 * duration


@pytest.mark.slow
def test_first_component_matches_the_mean_derivative():
    labeled = generate_dataset(SynthConfig(mu=1.77, noise_sigma=2.5e-3, seed=5), 10000)
    aligned = align_dataset(labeled.sync, labeled.snspd).aligned
    basis = build_basis(aligned)
    model = fit_pca(aligned, 3)
    assert abs(cosine_similarity(model.components[0], basis.deriv.samples)) >= 0.99
    rho = stats.spearmanr(pca_scores_set(model, aligned, 1)[:, 0], project_set(basis, aligned))[0]
    assert abs(rho) >= 0.999


@pytest.mark.slow
def test_end_to_end_weights_and_confidence(tmp_path):
    out = _run(tmp_path, "default", 50000, 20000, n_bootstrap=100)
    p = read_json(out / "mixture.json")["p"]
    assert p[0] == pytest.approx(0.3634, abs=0.03)
    assert p[1] == pytest.approx(0.3216, abs=0.03)
    assert p[2] == pytest.approx(0.3150, abs=0.03)

    fwhm = read_json(out / "single_photon.json")["fwhm"]
    assert fwhm == pytest.approx(45 * PS, abs=5 * PS)
    c12 = load_report(out / "confidence.json").pair("1", "2")
    assert c12.confidence == pytest.approx(0.85, abs=0.03)
    assert c12.std_error <= 0.02


@pytest.mark.slow
def test_downsampled_front_end_matches_full_rate(tmp_path):
    full = load_report(_run(tmp_path, "full", 12000, 4000, FAST_FRONT_END) / "confidence.json")
    decimated = load_report(_run(tmp_path, "decimated", 12000, 4000, FAST_FRONT_END, downsample=26) / "confidence.json")
    assert read_json(tmp_path / "decimated" / "manifest.json")["stages"][2:4] == ["filter", "decimate"]
    assert abs(full.pair("1", "2").confidence - decimated.pair("1", "2").confidence) < 0.02


@pytest.mark.slow
def test_hybrid_projection_matches_align_then_project():
    cfg = SynthConfig(mu=0.003, sync_jitter_sigma=100 * PS, seed=9)
    reference = generate_dataset(cfg, 4000)
    pairs = generate_dataset(cfg.with_updates(mu=1.77, seed=10), 10000)

    ref_aligned = align_dataset(reference.sync, reference.snspd).aligned
    aligned_times = project_set(build_basis(ref_aligned), align_dataset(pairs.sync, pairs.snspd).aligned)

    hybrid = build_hybrid_basis(reference.snspd, reference.sync)
    hybrid_times = hybrid_project_set(hybrid, pairs.snspd, pairs.sync)

    diff = hybrid_times - aligned_times
    assert np.sqrt(np.mean((diff - diff.mean()) ** 2)) < 1 * PS


@pytest.mark.slow
def test_confidence_falls_with_jitter(tmp_path):
    narrow = {"jitter_emg": {"sigma": 30 * PS / 2.3548, "tau": 0.0}}
    wide = {"jitter_emg": {"sigma": 60 * PS / 2.3548, "tau": 0.0}}
    c_narrow = load_report(_run(tmp_path, "narrow", 20000, 5000, narrow) / "confidence.json").pair("1", "2")
    c_wide = load_report(_run(tmp_path, "wide", 20000, 5000, wide) / "confidence.json").pair("1", "2")
    assert c_narrow.confidence - c_wide.confidence >= 0.05
    assert read_table(tmp_path / "wide" / "projections.csv")["dt_s"].size == 20000
