import json

import numpy as np
import pytest

from snspdpnr.bundle import (
    read_basis,
    read_csv_traces,
    read_json,
    read_table,
    read_trace_bundle,
    write_trace_bundle,
)
from snspdpnr.cli import main
from snspdpnr.errors import EXIT_DATA, EXIT_OK, EXIT_USAGE
from snspdpnr.estimators import HybridBasis
from snspdpnr.fitting import EmgParams, emg_sample
from snspdpnr.traces import TraceSet

from conftest import _mixture_samples


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out / "ref"), "--mu", "0.003", "--count", "300", "--seed", "4"]) == EXIT_OK
    return out


def test_synth_writes_bundles_labels_and_config(synth_dir, capsys):
    ref = synth_dir / "ref"
    snspd = read_trace_bundle(ref / "snspd.pnrb")
    sync = read_trace_bundle(ref / "sync.pnrb")
    assert len(snspd) == len(sync) == 300
    assert snspd.mu_label == pytest.approx(0.003)
    labels = read_table(ref / "labels.csv")
    assert list(labels) == ["index", "n", "true_shift_s"]
    assert labels["index"].tolist() == list(range(300))
    assert read_json(ref / "synth_config.json")["seed"] == 4


def test_synth_sweep(tmp_path):
    code = main(["synth", "--out", str(tmp_path), "--sweep", "--sweep-points", "2", "--count", "5"])
    assert code == EXIT_OK
    assert sorted(p.name for p in tmp_path.iterdir() if p.is_dir()) == ["mu_0.003", "mu_2.55"]


def test_align_basis_project_chain(synth_dir, tmp_path):
    ref = synth_dir / "ref"
    aligned = tmp_path / "aligned.pnrb"
    assert main([
        "align", "--sync", str(ref / "sync.pnrb"), "--target", str(ref / "snspd.pnrb"),
        "--out", str(aligned), "--shifts", str(tmp_path / "shifts.csv"),
    ]) == EXIT_OK
    assert read_table(tmp_path / "shifts.csv")["shift_s"].size == 300

    assert main(["basis", str(aligned), "--out", str(tmp_path / "basis.pnrv")]) == EXIT_OK
    assert main(["project", str(aligned), "--basis", str(tmp_path / "basis.pnrv"), "--out", str(tmp_path / "dt.csv")]) == EXIT_OK
    dt = read_table(tmp_path / "dt.csv")["dt_s"]
    assert dt.size == 300
    assert np.std(dt) < 30e-12

    assert main(["project", str(aligned), "--basis-from", str(aligned), "--estimator", "pc1",
                 "--out", str(tmp_path / "pc1.csv")]) == EXIT_OK
    pc1 = read_table(tmp_path / "pc1.csv")["dt_s"]
    assert np.corrcoef(pc1, dt)[0, 1] > 0.9


def test_hybrid_projection(synth_dir, tmp_path):
    ref = synth_dir / "ref"
    basis = tmp_path / "hybrid.pnrv"
    assert main(["basis", str(ref / "snspd.pnrb"), "--hybrid-sync", str(ref / "sync.pnrb"), "--out", str(basis)]) == EXIT_OK
    assert isinstance(read_basis(basis), HybridBasis)
    out = tmp_path / "dt.csv"
    assert main(["project", str(ref / "snspd.pnrb"), "--basis", str(basis), "--out", str(out)]) == EXIT_DATA
    assert main(["project", str(ref / "snspd.pnrb"), "--basis", str(basis), "--sync", str(ref / "sync.pnrb"),
                 "--out", str(out)]) == EXIT_OK
    assert np.std(read_table(out)["dt_s"]) < 30e-12


def test_filter_and_decimate(synth_dir, tmp_path):
    ref = synth_dir / "ref" / "snspd.pnrb"
    assert main(["filter", str(ref), "--out", str(tmp_path / "f.pnrb")]) == EXIT_OK
    assert read_trace_bundle(tmp_path / "f.pnrb").meta["bandpass"] == [10e6, 2e9]
    assert main(["decimate", str(tmp_path / "f.pnrb"), "--factor", "4", "--out", str(tmp_path / "d.pnrb")]) == EXIT_OK
    assert read_trace_bundle(tmp_path / "d.pnrb").samples_per_trace == 128
    assert main(["decimate", str(tmp_path / "f.pnrb"), "--out", str(tmp_path / "x.pnrb")]) == EXIT_DATA


def test_decimate_factor_from_config(synth_dir, tmp_path):
    config = tmp_path / "pipeline.json"
    config.write_text(json.dumps({"stages": [{"name": "synth"}, {"name": "decimate", "params": {"factor": 8}}]}))
    out = tmp_path / "d.pnrb"
    assert main(["decimate", str(synth_dir / "ref" / "snspd.pnrb"), "--out", str(out), "--config", str(config)]) == EXIT_OK
    assert read_trace_bundle(out).samples_per_trace == 64


def test_pca_command(synth_dir, tmp_path):
    ref = synth_dir / "ref" / "snspd.pnrb"
    basis = tmp_path / "basis.pnrv"
    main(["basis", str(ref), "--out", str(basis)])
    assert main(["pca", str(ref), "--out", str(tmp_path / "pca"), "-k", "3", "--basis", str(basis)]) == EXIT_OK
    scree = read_table(tmp_path / "pca" / "scree.csv")
    assert scree["index"].tolist() == [1.0, 2.0, 3.0]
    assert (tmp_path / "pca" / "similarity.csv").exists()


def test_import_command(tmp_path):
    data = np.arange(64, dtype="<f4").reshape(4, 16)
    raw = tmp_path / "m.f32"
    data.tofile(raw)
    out = tmp_path / "m.pnrb"
    assert main(["import", str(raw), "--format", "f32", "--rows", "4", "--cols", "16", "--dt", "2e-10",
                 "--channel", "sync", "--out", str(out)]) == EXIT_OK
    traces = read_trace_bundle(out)
    np.testing.assert_array_equal(traces.data, data)
    assert main(["import", str(raw), "--format", "f32", "--rows", "5", "--cols", "16", "--dt", "2e-10",
                 "--out", str(out)]) == EXIT_DATA


def test_fit_confidence_report_chain(tmp_path, capsys):
    rng = np.random.default_rng(1)
    g1 = EmgParams(0.0, 17e-12, 10e-12)
    ref_csv = tmp_path / "ref.csv"
    meas_csv = tmp_path / "meas.csv"
    ref_csv.write_text("dt\n" + "\n".join(repr(float(v)) for v in emg_sample(g1, 20000, rng)) + "\n")
    dt, _ = _mixture_samples(rng, 1.77, 20000, g1, -74e-12)
    meas_csv.write_text("dt\n" + "\n".join(repr(float(v)) for v in dt) + "\n")

    g1_json = tmp_path / "g1.json"
    assert main(["fit", str(ref_csv), "--single-photon", "--no-background", "--out", str(g1_json)]) == EXIT_OK
    assert read_json(g1_json)["kind"] == "single_photon"

    fit_json = tmp_path / "fit.json"
    assert main(["fit", str(meas_csv), "--g1-from", str(g1_json), "--mu", "1.77", "--out", str(fit_json),
                 "--histogram", str(tmp_path / "hist.csv"), "--ztp", str(tmp_path / "ztp.csv")]) == EXIT_OK
    assert "ZTP" in capsys.readouterr().out
    ztp_lines = (tmp_path / "ztp.csv").read_text().splitlines()
    assert ztp_lines[0] == "n,fitted,expected,difference"
    assert [line.split(",")[0] for line in ztp_lines[1:]] == ["1", "2", "3+"]
    assert read_table(tmp_path / "hist.csv")["count"].sum() == 20000

    conf_json = tmp_path / "conf.json"
    assert main(["confidence", str(fit_json), "--out", str(conf_json), "--table", str(tmp_path / "conf.csv"),
                 "--n-bootstrap", "10", "--grid-points", "512", "--seed", "2"]) == EXIT_OK
    report = read_json(conf_json)
    assert [p["from_n"] for p in report["pairs"]] == ["1", "2"]
    assert report["n_bootstrap"] == 10

    md = tmp_path / "report.md"
    assert main(["report", str(fit_json), str(conf_json), "--out", str(md)]) == EXIT_OK
    text = md.read_text()
    assert "| C1->2 |" in text
    assert "| 3+ |" in text


def test_fit_needs_a_single_photon_shape(tmp_path):
    csv = tmp_path / "dt.csv"
    csv.write_text("dt\n1.0\n2.0\n")
    assert main(["fit", str(csv), "--out", str(tmp_path / "x.json")]) == EXIT_DATA


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["synth"]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK


def test_missing_input_file(tmp_path):
    assert main(["basis", str(tmp_path / "nope.pnrb"), "--out", str(tmp_path / "b.pnrv")]) == EXIT_DATA


def test_truncated_bundle_exit_code(tmp_path):
    path = write_trace_bundle(TraceSet(np.ones((3, 8)), 1e-10), tmp_path / "t.pnrb")
    path.write_bytes(path.read_bytes()[:-4])
    assert main(["basis", str(path), "--out", str(tmp_path / "b.pnrv")]) == EXIT_DATA


def test_pipeline_command(tmp_path):
    config = tmp_path / "pipeline.json"
    config.write_text(json.dumps({
        "stages": [
            {"name": "synth", "params": {"count": 20, "reference_count": 20}},
            {"name": "align"},
            {"name": "basis"},
            {"name": "project"},
        ],
    }))
    out = tmp_path / "out"
    assert main(["pipeline", "--config", str(config), "--output-dir", str(out), "--seed", "3"]) == EXIT_OK
    manifest = read_json(out / "manifest.json")
    assert manifest["seed"] == 3
    assert manifest["status"] == "ok"
    assert read_table(out / "projections.csv")["dt_s"].size == 20


def _header(path):
    return path.read_text().splitlines()[0]


def test_result_table_headers(synth_dir, tmp_path):
    ref = synth_dir / "ref"
    assert _header(ref / "labels.csv") == "index,n,true_shift_s"

    assert main([
        "align", "--sync", str(ref / "sync.pnrb"), "--target", str(ref / "snspd.pnrb"),
        "--out", str(tmp_path / "aligned.pnrb"), "--shifts", str(tmp_path / "shifts.csv"),
    ]) == EXIT_OK
    assert _header(tmp_path / "shifts.csv") == "index,shift_s"

    assert main(["pca", str(ref / "snspd.pnrb"), "--out", str(tmp_path / "pca"), "--components", "4"]) == EXIT_OK
    components = read_table(tmp_path / "pca" / "components.csv")
    assert _header(tmp_path / "pca" / "components.csv") == "index," + ",".join(f"sample_{j}" for j in range(512))
    assert components["index"].tolist() == [1.0, 2.0, 3.0, 4.0]
    rows = np.column_stack([components[f"sample_{j}"] for j in range(512)])
    np.testing.assert_allclose(rows @ rows.T, np.eye(4), atol=1e-8)

    assert _header(tmp_path / "pca" / "scree.csv") == "index,ratio,cumulative"
    assert _header(tmp_path / "pca" / "scores.csv") == "index,pc1,pc2,pc3,pc4"
    scores = read_table(tmp_path / "pca" / "scores.csv")
    assert scores["index"].tolist() == list(range(300))


def test_projection_table_and_report(synth_dir, tmp_path, capsys):
    snspd = synth_dir / "ref" / "snspd.pnrb"
    out = tmp_path / "dt.csv"
    assert main(["project", str(snspd), "--basis-from", str(snspd), "--out", str(out)]) == EXIT_OK
    assert "ps" in capsys.readouterr().out
    assert _header(out) == "index,dt_s,dt_centred_s"
    table = read_table(out)
    assert np.median(table["dt_centred_s"]) == pytest.approx(0.0, abs=1e-18)
    np.testing.assert_allclose(table["dt_s"] - table["dt_centred_s"], np.median(table["dt_s"]), rtol=0, atol=1e-18)

    md = tmp_path / "report.md"
    assert main(["report", str(out), "--out", str(md)]) == EXIT_OK
    text = md.read_text()
    assert "## Projected times `dt.csv`" in text
    assert "300 traces, raw median" in text
    assert "| centred | 5% | 25% | 75% | 95% |" in text
    ps_row = next(line for line in text.splitlines() if line.startswith("| ps |"))
    quantiles = [float(v) for v in ps_row.strip("|").split("|")[1:]]
    assert quantiles == sorted(quantiles)
    assert quantiles[0] < 0 < quantiles[-1]


def test_csv_trace_format(synth_dir, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "csv"), "--count", "5", "--seed", "2", "--format", "csv"]) == EXIT_OK
    assert main(["synth", "--out", str(tmp_path / "bin"), "--count", "5", "--seed", "2"]) == EXIT_OK
    as_csv = read_csv_traces(tmp_path / "csv" / "snspd.csv")
    as_bundle = read_trace_bundle(tmp_path / "bin" / "snspd.pnrb")
    assert as_csv.data.shape == as_bundle.data.shape == (5, 512)
    assert as_csv.dt == pytest.approx(as_bundle.dt, rel=1e-12)
    np.testing.assert_allclose(as_csv.data, as_bundle.data, rtol=1e-6, atol=1e-6 * np.abs(as_bundle.data).max())
    assert (tmp_path / "csv" / "sync.csv").exists()
    assert not (tmp_path / "csv" / "snspd.pnrb").exists()

    out = tmp_path / "d.csv"
    assert main(["decimate", str(synth_dir / "ref" / "snspd.pnrb"), "--factor", "4", "--format", "csv",
                 "--out", str(out)]) == EXIT_OK
    assert read_csv_traces(out).samples_per_trace == 128


def test_estimator_selection(synth_dir, tmp_path):
    ref = synth_dir / "ref"
    snspd, sync = str(ref / "snspd.pnrb"), str(ref / "sync.pnrb")
    hybrid = tmp_path / "hybrid.pnrv"
    assert main(["basis", snspd, "--hybrid-sync", sync, "--out", str(hybrid)]) == EXIT_OK

    assert main(["project", snspd, "--basis-from", snspd, "--estimator", "hybrid",
                 "--out", str(tmp_path / "x.csv")]) == EXIT_DATA
    assert main(["project", snspd, "--basis", str(hybrid), "--sync", sync, "--estimator", "pc1",
                 "--out", str(tmp_path / "x.csv")]) == EXIT_DATA
    assert main(["project", snspd, "--basis", str(hybrid), "--sync", sync, "--passes", "-1",
                 "--out", str(tmp_path / "x.csv")]) == EXIT_DATA
    assert main(["project", snspd, "--basis-from", snspd, "--estimator", "bogus",
                 "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE

    assert main(["project", snspd, "--basis", str(hybrid), "--sync", sync, "--estimator", "hybrid",
                 "--out", str(tmp_path / "refined.csv")]) == EXIT_OK
    assert main(["project", snspd, "--basis", str(hybrid), "--sync", sync, "--passes", "0",
                 "--out", str(tmp_path / "bare.csv")]) == EXIT_OK
    refined = read_table(tmp_path / "refined.csv")["dt_s"]
    bare = read_table(tmp_path / "bare.csv")["dt_s"]
    assert np.corrcoef(refined, bare)[0, 1] > 0.9
    assert np.std(refined) <= np.std(bare) * 1.05


def test_fit_background_gate_option(tmp_path, g1_params):
    rng = np.random.default_rng(5)
    csv = tmp_path / "ref.csv"
    csv.write_text("dt_s\n" + "\n".join(repr(float(v)) for v in emg_sample(g1_params, 20000, rng)) + "\n")
    out = tmp_path / "g1.json"
    assert main(["fit", str(csv), "--single-photon", "--background-min-dchi2", "1e12", "--out", str(out)]) == EXIT_OK
    assert read_json(out)["background_used"] is False
    assert main(["fit", str(csv), "--single-photon", "--background-min-dchi2", "-1", "--out", str(out)]) == EXIT_DATA
