import numpy as np
import pytest

from snspdpnr.constants import PS
from snspdpnr.errors import ConfigError, DataError, DegenerateBasisError, EmptySetError, LengthMismatchError
from snspdpnr.estimators import (
    DerivativeEstimator,
    HybridBasis,
    HybridEstimator,
    PrincipalEstimator,
    ProjectionBasis,
    build_basis,
    build_hybrid_basis,
    hybrid_project,
    hybrid_project_set,
    project_set,
    project_time,
)
from snspdpnr.estimators.derivative import centred
from snspdpnr.pca import fit_pca
from snspdpnr.preprocess import align_dataset
from snspdpnr.synth import generate_dataset
from snspdpnr.traces import Trace, TraceSet


def _slope_and_scatter(estimated, truth):
    slope, offset = np.polyfit(truth, estimated, 1)
    residual = estimated - (slope * truth + offset)
    return slope, residual.std()


def test_basis_normalisation(reference_pairs):
    basis = build_basis(reference_pairs.snspd)
    d = basis.deriv.samples
    assert basis.norm_c == pytest.approx(np.dot(d, d) * basis.deriv.dt)
    assert basis.reference_label == "mu=0.003"
    assert len(basis) == 512


def test_basis_rejects_inconsistent_constant(reference_pairs):
    basis = build_basis(reference_pairs.snspd)
    with pytest.raises(DataError):
        ProjectionBasis(basis.deriv, basis.norm_c * 1.01)
    with pytest.raises(DataError):
        ProjectionBasis(basis.deriv, basis.norm_c * (1 + 1e-11))
    assert ProjectionBasis(basis.deriv, basis.norm_c).norm_c == basis.norm_c


def test_flat_reference_is_degenerate():
    with pytest.raises(DegenerateBasisError):
        build_basis(TraceSet(np.full((3, 16), 0.2), 1e-10))
    with pytest.raises(EmptySetError):
        build_basis(TraceSet(np.zeros((0, 16)), 1e-10))


def test_projection_tracks_jitter(reference_pairs):
    basis = build_basis(reference_pairs.snspd)
    times = project_set(basis, reference_pairs.snspd)
    truth = reference_pairs.true_shifts + reference_pairs.trigger_shifts
    slope, scatter = _slope_and_scatter(times, truth)
    assert slope == pytest.approx(1.0, abs=0.05)
    assert scatter < 6 * PS


def test_single_and_batch_projection_agree(reference_pairs):
    basis = build_basis(reference_pairs.snspd)
    batch = project_set(basis, reference_pairs.snspd, threads=3)
    assert project_time(basis, reference_pairs.snspd[5]) == pytest.approx(batch[5], rel=1e-10, abs=1e-18)
    est = DerivativeEstimator(basis)
    np.testing.assert_array_equal(est.estimate_set(reference_pairs.snspd), project_set(basis, reference_pairs.snspd))


def test_projection_length_checks(reference_pairs):
    basis = build_basis(reference_pairs.snspd)
    with pytest.raises(LengthMismatchError):
        project_time(basis, Trace(np.zeros(100), basis.deriv.dt))
    with pytest.raises(LengthMismatchError):
        project_set(basis, TraceSet(np.zeros((2, 100)), basis.deriv.dt))
    assert project_set(basis, TraceSet(np.zeros((0, 512)), basis.deriv.dt)).size == 0


def test_centred_removes_median():
    np.testing.assert_allclose(centred(np.array([1.0, 2.0, 10.0])), [-1.0, 0.0, 8.0])
    assert centred(np.zeros(0)).size == 0


def test_hybrid_cancels_trigger_jitter(reference_pairs):
    basis = build_hybrid_basis(reference_pairs.snspd, reference_pairs.sync)
    times = hybrid_project_set(basis, reference_pairs.snspd, reference_pairs.sync)
    slope, scatter = _slope_and_scatter(times, reference_pairs.true_shifts)
    assert slope == pytest.approx(1.0, abs=0.1)
    assert scatter < 6 * PS
    # without the sync half the trigger jitter dominates
    assert np.std(times) < 0.6 * np.std(project_set(build_basis(reference_pairs.snspd), reference_pairs.snspd))


def test_hybrid_matches_align_then_project(reference_pairs):
    hybrid = build_hybrid_basis(reference_pairs.snspd, reference_pairs.sync)
    direct = hybrid_project_set(hybrid, reference_pairs.snspd, reference_pairs.sync)
    aligned = align_dataset(reference_pairs.sync, reference_pairs.snspd).aligned
    two_step = project_set(build_basis(aligned), aligned)
    diff = (direct - direct.mean()) - (two_step - two_step.mean())
    assert np.sqrt(np.mean(diff**2)) < 1 * PS


def test_hybrid_single_pair_and_vector(reference_pairs):
    snspd, sync = reference_pairs.snspd, reference_pairs.sync
    basis = build_hybrid_basis(snspd, sync)
    est = HybridEstimator(basis)
    assert est.needs_sync
    batch = est.estimate_set(snspd, threads=3, sync=sync)
    np.testing.assert_allclose(batch, hybrid_project_set(basis, snspd, sync), rtol=1e-9, atol=1e-18)
    assert est.estimate(snspd[3], sync[3]) == pytest.approx(batch[3], rel=1e-9, abs=1e-18)

    # no refinement: the bare dot product with the concatenated vector
    bare = HybridEstimator(basis, passes=0).estimate(snspd[3], sync[3])
    joined = np.concatenate([snspd.data[3], sync.data[3]])
    assert -np.dot(basis.vector(), joined) * basis.dt == pytest.approx(bare, rel=1e-9, abs=1e-18)

    with pytest.raises(ConfigError):
        est.estimate(snspd[0])
    with pytest.raises(ConfigError):
        est.estimate_set(snspd)
    with pytest.raises(ConfigError):
        HybridEstimator(basis, passes=-1)
    with pytest.raises(ConfigError):
        build_hybrid_basis(snspd, sync, passes=1.5)


def test_hybrid_refinement_removes_trigger_curvature(quiet_cfg):
    pairs = generate_dataset(quiet_cfg.with_updates(mu=0.003, sync_jitter_sigma=100 * PS), 400)
    singles = np.flatnonzero(pairs.photon_numbers == 1)
    snspd, sync = pairs.snspd.subset(singles), pairs.sync.subset(singles)
    basis = build_hybrid_basis(snspd, sync)
    # every single-photon pair is the same pulse pair moved by its trigger shift
    refined = hybrid_project_set(basis, snspd, sync)
    bare = hybrid_project_set(basis, snspd, sync, passes=0)
    assert np.std(refined) < 1 * PS
    assert np.std(refined) < np.std(bare)


def test_hybrid_basis_consistency_tolerance(reference_pairs):
    basis = build_hybrid_basis(reference_pairs.snspd, reference_pairs.sync)
    HybridBasis(basis.snspd_part, basis.sync_part, basis.dt, basis.norm_c_snspd, basis.norm_c_sync)
    with pytest.raises(DataError):
        HybridBasis(basis.snspd_part, basis.sync_part, basis.dt, basis.norm_c_snspd * (1 + 1e-11), basis.norm_c_sync)
    with pytest.raises(DataError):
        HybridBasis(basis.snspd_part, basis.sync_part, basis.dt, basis.norm_c_snspd, basis.norm_c_sync * (1 - 1e-11))


def test_hybrid_input_checks(reference_pairs):
    sync = reference_pairs.sync
    with pytest.raises(DataError):
        build_hybrid_basis(reference_pairs.snspd, sync.replace(dt=sync.dt * 2))
    basis = build_hybrid_basis(reference_pairs.snspd, sync)
    with pytest.raises(LengthMismatchError):
        hybrid_project_set(basis, reference_pairs.snspd, sync.subset([0, 1]))
    with pytest.raises(LengthMismatchError):
        hybrid_project(basis, Trace(np.zeros(10), sync.dt), sync[0])


def test_principal_estimator_calibrates_onto_derivative_axis(reference_pairs):
    traces = reference_pairs.snspd
    basis = build_basis(traces)
    est = PrincipalEstimator.calibrate(fit_pca(traces, k=2), basis, traces)
    times = est.estimate_set(traces)
    reference = project_set(basis, traces)
    assert np.corrcoef(times, reference)[0, 1] > 0.95
    assert est.estimate(traces[0]) == pytest.approx(times[0], rel=1e-9, abs=1e-18)
    assert est.agreement(basis, traces) > 0.9


def test_principal_estimator_checks(reference_pairs):
    model = fit_pca(reference_pairs.snspd, k=1)
    with pytest.raises(DataError):
        PrincipalEstimator(model, scale=0.0)
    basis = build_basis(reference_pairs.snspd)
    with pytest.raises(DataError):
        PrincipalEstimator.calibrate(model, basis, reference_pairs.snspd.subset([0]))
    assert PrincipalEstimator(model).agreement(basis, reference_pairs.snspd.subset([0, 1])) is None


def test_projection_is_linear(reference_pairs):
    basis = build_basis(reference_pairs.snspd)
    x, y = reference_pairs.snspd[0], reference_pairs.snspd[1]
    mixed = x.with_samples(2.0 * x.samples - 0.5 * y.samples)
    expected = 2.0 * project_time(basis, x) - 0.5 * project_time(basis, y)
    assert project_time(basis, mixed) == pytest.approx(expected, rel=1e-9, abs=1e-20)
