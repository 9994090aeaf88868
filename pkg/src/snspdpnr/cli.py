"""Command-line entry point: ``snspd-pnr <command> ...``.

Every command reads and writes the documented file formats (trace bundles,
basis sidecars, CSV tables, JSON fits and reports), so stages can be chained
by hand or by ``snspd-pnr pipeline``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from snspdpnr.bundle import (
    import_raw,
    read_basis,
    read_json,
    read_projections,
    read_trace_bundle,
    write_basis,
    write_csv_traces,
    write_json,
    write_labels,
    write_projections,
    write_shifts,
    write_table,
    write_trace_bundle,
)
from snspdpnr.confidence import ConfidenceReport, build_report, compare_systems
from snspdpnr.constants import (
    BOOTSTRAP_DRAWS,
    F_HI,
    F_LO,
    GRID_POINTS,
    PCA_COMPONENTS,
    PEAK_WINDOW,
    SWEEP_POINTS,
    sweep_mus,
    to_ps,
)
from snspdpnr.errors import EXIT_OK, EXIT_USAGE, ConfigError, DataError, PnrError, exit_code_for
from snspdpnr.estimators import (
    HybridBasis,
    build_basis,
    build_hybrid_basis,
)
from snspdpnr.estimators.derivative import centred
from snspdpnr.estimators.hybrid import REFINE_PASSES
from snspdpnr.fitting import (
    BACKGROUND_MIN_DELTA_CHI2,
    EmgParams,
    MixtureFit,
    SinglePhotonFit,
    class_mean_traces,
    compare_ztp,
    fit_mixture,
    fit_single_photon,
    histogram_table,
    make_histogram,
)
from snspdpnr.pca import compare_components, fit_pca, pca_scores_set, scree
from snspdpnr.pipeline import ESTIMATORS, PipelineConfig, create_estimator, run_pipeline
from snspdpnr.preprocess import align_dataset, bandpass_set, decimate_set
from snspdpnr.synth import SynthConfig, generate_dataset, generate_sweep
from snspdpnr.traces import Channel, TraceSet

logger = logging.getLogger("snspdpnr")

RULE = "=" * 60
TRACE_FORMATS = ("pnrb", "csv")


# --------------------------------------------------------------------------
# Config file support
# --------------------------------------------------------------------------


def _config_params(args: argparse.Namespace, stage: str) -> Dict[str, Any]:
    """Parameters of ``stage`` from the ``--config`` document (a pipeline config or a flat object)."""
    if not getattr(args, "config", None):
        return {}
    doc = read_json(args.config)
    if not isinstance(doc, Mapping):
        raise ConfigError("--config must hold a JSON object")
    if "stages" in doc:
        for entry in doc.get("stages", ()):
            if isinstance(entry, Mapping) and entry.get("name") == stage:
                return dict(entry.get("params") or {})
        return {}
    return dict(doc.get(stage, {}))


def _pick(args: argparse.Namespace, params: Mapping[str, Any], flag: str, key: str, default: Any) -> Any:
    """Explicit flag, else config value, else default."""
    value = getattr(args, flag, None)
    if value is not None:
        return value
    value = params.get(key)
    return default if value is None else value


def _global(args: argparse.Namespace, name: str, default: Any) -> Any:
    value = getattr(args, name, None)
    if value is not None:
        return value
    if getattr(args, "config", None):
        doc = read_json(args.config)
        if isinstance(doc, Mapping) and doc.get(name) is not None:
            return doc[name]
    return default


def _banner(title: str) -> None:
    print(RULE)
    print(title)
    print(RULE)


def _write_traces(traces: TraceSet, path: Any, fmt: str = "pnrb") -> Path:
    """Trace bundle, or a ``t=``-headed CSV matrix with ``--format csv``."""
    if fmt == "csv":
        return write_csv_traces(traces, path)
    return write_trace_bundle(traces, path)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    params = _config_params(args, "synth")
    base = params.get("config", {})
    if args.synth_config:
        base = read_json(args.synth_config)
    cfg = SynthConfig.from_dict(base)
    seed = int(_global(args, "seed", cfg.seed))
    cfg = cfg.with_updates(seed=seed, mu=float(_pick(args, params, "mu", "mu", cfg.mu)))
    count = int(_pick(args, params, "count", "count", 10000))
    keep_zeros = bool(args.keep_zeros or params.get("keep_zeros", False))
    threads = int(_global(args, "threads", 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.sweep:
        sets = generate_sweep(cfg, count, sweep_mus(args.sweep_points), keep_zeros, threads)
    else:
        sets = {cfg.mu: generate_dataset(cfg, count, keep_zeros, threads)}
    _banner(f"SYNTH  seed={seed}  traces per set={count}")
    for mu, labeled in sets.items():
        target = out / f"mu_{mu:.4g}" if args.sweep else out
        target.mkdir(parents=True, exist_ok=True)
        _write_traces(labeled.snspd, target / f"snspd.{args.format}", args.format)
        _write_traces(labeled.sync, target / f"sync.{args.format}", args.format)
        write_labels(target / "labels.csv", labeled.photon_numbers, labeled.true_shifts)
        counts = np.bincount(labeled.photon_numbers, minlength=4)
        print(f"mu={mu:<8.4g} n=1: {counts[1]:>7}  n=2: {counts[2]:>7}  n>=3: {counts[3:].sum():>7}  -> {target}")
    write_json(cfg.to_dict(), out / "synth_config.json")
    return EXIT_OK


def cmd_import(args: argparse.Namespace) -> int:
    traces = import_raw(args.input, args.format, args.rows, args.cols, args.dt, args.t0,
                        Channel.parse(args.channel), args.mu)
    write_trace_bundle(traces, args.out)
    print(f"imported {len(traces)} traces x {traces.samples_per_trace} samples (dt={traces.dt:.6g} s) -> {args.out}")
    return EXIT_OK


def cmd_align(args: argparse.Namespace) -> int:
    params = _config_params(args, "align")
    window = int(_pick(args, params, "window", "window", PEAK_WINDOW))
    refine = not args.no_refine and bool(params.get("refine", True))
    result = align_dataset(
        read_trace_bundle(args.sync), read_trace_bundle(args.target), window,
        int(_global(args, "threads", 1)), refine,
    )
    _write_traces(result.aligned, args.out, args.format)
    if args.shifts:
        write_shifts(args.shifts, result.shifts)
    print(f"aligned {len(result.shifts)} traces: shift std {to_ps(float(np.std(result.shifts))):.2f} ps, "
          f"{result.passes} refinement passes -> {args.out}")
    return EXIT_OK


def cmd_filter(args: argparse.Namespace) -> int:
    params = _config_params(args, "filter")
    f_lo = float(_pick(args, params, "f_lo", "f_lo", F_LO))
    f_hi = float(_pick(args, params, "f_hi", "f_hi", F_HI))
    traces = bandpass_set(read_trace_bundle(args.input), f_lo, f_hi)
    _write_traces(traces, args.out, args.format)
    print(f"band-pass {f_lo:.3g}-{f_hi:.3g} Hz on {len(traces)} traces -> {args.out}")
    return EXIT_OK


def cmd_decimate(args: argparse.Namespace) -> int:
    params = _config_params(args, "decimate")
    factor = _pick(args, params, "factor", "factor", None)
    if factor is None:
        raise ConfigError("decimate needs --factor")
    traces = decimate_set(read_trace_bundle(args.input), int(factor))
    _write_traces(traces, args.out, args.format)
    print(f"decimated by {factor}: {traces.samples_per_trace} samples at dt={traces.dt:.6g} s -> {args.out}")
    return EXIT_OK


def cmd_pca(args: argparse.Namespace) -> int:
    sets = [read_trace_bundle(p) for p in args.inputs]
    threads = int(_global(args, "threads", 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = {}
    for path, traces in zip(args.inputs, sets):
        k = min(traces.samples_per_trace, len(traces)) if args.full else args.k
        models[f"{Path(path).stem}:{traces.label}"] = fit_pca(traces, k, threads)

    first_label, first = next(iter(models.items()))
    k = first.n_components
    # one component per row, one column per sample
    components = {"index": np.arange(1, k + 1)}
    components.update({f"sample_{j}": first.components[:, j] for j in range(first.components.shape[1])})
    write_table(out / "components.csv", components)
    ratios, cumulative = scree(first)
    write_table(out / "scree.csv", {"index": np.arange(1, ratios.size + 1), "ratio": ratios, "cumulative": cumulative})
    scores = pca_scores_set(first, sets[0], k)
    write_table(out / "scores.csv", {
        "index": np.arange(len(sets[0])),
        **{f"pc{i + 1}": scores[:, i] for i in range(k)},
    })
    _banner(f"PCA  {first_label}")
    for i, (r, c) in enumerate(zip(ratios[:5], cumulative[:5]), 1):
        print(f"PC{i:<3} {100 * r:7.3f}%   cumulative {100 * c:7.3f}%")

    references = {}
    if args.basis:
        basis = read_basis(args.basis)
        if isinstance(basis, HybridBasis):
            raise DataError("PCA comparison needs a mean-derivative basis, not a hybrid one")
        references["mean derivative"] = basis.deriv.samples
    if len(models) > 1 or references:
        comparison = compare_components(models, references)
        write_table(out / "similarity.csv", {
            "label": list(comparison.labels),
            **{lab: comparison.similarity[:, j] for j, lab in enumerate(comparison.labels)},
        })
        print("\n|cos| between first components:")
        for i, lab in enumerate(comparison.labels):
            print(f"  {lab:<30}" + " ".join(f"{v:7.4f}" for v in comparison.similarity[i]))
    return EXIT_OK


def cmd_basis(args: argparse.Namespace) -> int:
    reference = read_trace_bundle(args.reference)
    if args.hybrid_sync:
        basis = build_hybrid_basis(reference, read_trace_bundle(args.hybrid_sync))
        print(f"hybrid basis: C_snspd={basis.norm_c_snspd:.6g}, C_sync={basis.norm_c_sync:.6g}")
    else:
        basis = build_basis(reference, args.label)
        print(f"basis from {basis.reference_label} ({len(reference)} traces): C={basis.norm_c:.6g} V^2/s")
    write_basis(basis, args.out)
    return EXIT_OK


def cmd_project(args: argparse.Namespace) -> int:
    traces = read_trace_bundle(args.input)
    threads = int(_global(args, "threads", 1))
    if args.basis:
        basis = read_basis(args.basis)
    elif args.basis_from:
        reference = read_trace_bundle(args.basis_from)
        basis = build_hybrid_basis(reference, read_trace_bundle(args.hybrid)) if args.hybrid else build_basis(reference)
    else:
        raise ConfigError("project needs --basis or --basis-from")
    estimator = create_estimator(basis, args.estimator, traces, threads, args.passes)
    sync = None
    if estimator.needs_sync:
        if not args.sync:
            raise ConfigError("a hybrid basis needs --sync traces")
        sync = read_trace_bundle(args.sync)
    times = estimator.estimate_set(traces, threads, sync)
    write_projections(args.out, times)
    if times.size == 0:
        print(f"no traces to project -> {args.out}")
        return EXIT_OK
    spread = centred(times)
    print(f"projected {times.size} traces ({estimator.name}): median {to_ps(float(np.median(times))):.2f} ps, "
          f"centred 5-95% {to_ps(float(np.percentile(spread, 5))):+.2f} .. "
          f"{to_ps(float(np.percentile(spread, 95))):+.2f} ps -> {args.out}")
    return EXIT_OK


def _load_g1(path: str):
    doc = read_json(path)
    kind = doc.get("kind")
    if kind == "single_photon":
        return SinglePhotonFit.from_dict(doc)
    if kind == "mixture":
        return EmgParams.from_dict(doc["g1"])
    raise DataError(f"{path}: expected a single-photon or mixture fit")


def cmd_fit(args: argparse.Namespace) -> int:
    params = _config_params(args, "fit")
    bins = _pick(args, params, "bins", "bins", None)
    times = read_projections(args.input)
    out = Path(args.out)
    if args.single_photon:
        min_dchi2 = float(_pick(
            args, params, "background_min_dchi2", "background_min_delta_chi2", BACKGROUND_MIN_DELTA_CHI2,
        ))
        fit = fit_single_photon(make_histogram(times, bins), not args.no_background, min_dchi2)
        write_json(fit.to_dict(), out)
        if args.histogram:
            write_table(args.histogram, histogram_table(fit.histogram, fit.model_counts(fit.histogram)))
        _banner("SINGLE-PHOTON FIT")
        print(f"m = {to_ps(fit.g1.m):.2f} ps   s = {to_ps(fit.g1.s):.2f} ps   tau = {to_ps(fit.g1.tau):.2f} ps")
        print(f"FWHM = {to_ps(fit.fwhm):.2f} ps   chi2/dof = {fit.reduced_chi2:.3f}   "
              f"background weight = {fit.bg.weight:.4f}")
        return EXIT_OK

    if not args.g1_from:
        raise ConfigError("fit needs --single-photon or --g1-from")
    fit = fit_mixture(times, _load_g1(args.g1_from), bins, args.mu)
    write_json(fit.to_dict(), out)
    if args.histogram:
        write_table(args.histogram, histogram_table(fit.histogram, fit.model_counts(fit.histogram)))
    _banner(f"MIXTURE FIT{'' if args.mu is None else f'  mu={args.mu:g}'}")
    print(f"{'n':<4} {'fitted':>9} {'ZTP':>9} {'diff':>9}")
    if args.mu:
        rows = compare_ztp(fit, args.mu)
        for r in rows:
            print(f"{r.label:<4} {r.fitted:>9.4f} {r.expected:>9.4f} {r.difference:>+9.4f}")
        if args.ztp:
            write_table(args.ztp, {
                "n": [r.label for r in rows],
                "fitted": [r.fitted for r in rows],
                "expected": [r.expected for r in rows],
                "difference": [r.difference for r in rows],
            })
    else:
        for label, p in zip(("1", "2", "3+"), fit.p):
            print(f"{label:<4} {p:>9.4f} {'-':>9} {'-':>9}")
    for note in fit.warnings:
        print(f"warning: {note}")
    if args.class_means:
        if not args.traces:
            raise ConfigError("--class-means needs --traces")
        means = class_mean_traces(read_trace_bundle(args.traces), times, fit)
        columns = {"t": next(iter(means.values())).times()}
        columns.update({f"class_{cls.label}": tr.samples for cls, tr in means.items()})
        write_table(args.class_means, columns)
    return EXIT_OK


def cmd_confidence(args: argparse.Namespace) -> int:
    params = _config_params(args, "confidence")
    n_bootstrap = int(_pick(args, params, "n_bootstrap", "n_bootstrap", BOOTSTRAP_DRAWS))
    points = int(_pick(args, params, "grid_points", "grid_points", GRID_POINTS))
    seed = int(_global(args, "seed", 0))
    threads = int(_global(args, "threads", 1))
    reports: List[ConfidenceReport] = []
    for i, path in enumerate(args.inputs):
        doc = read_json(path)
        if doc.get("kind") == "confidence":
            reports.append(ConfidenceReport.from_dict(doc))
            continue
        fit = MixtureFit.from_dict(doc)
        label = Path(path).stem if fit.mu_label is None else f"mu={fit.mu_label:g}"
        reports.append(build_report(fit, n_bootstrap=n_bootstrap, seed=seed + i, threads=threads,
                                    points=points, label=label))
    if args.out:
        if len(reports) == 1:
            write_json(reports[0].to_dict(), args.out)
        else:
            write_json({"kind": "confidence_set", "reports": [r.to_dict() for r in reports]}, args.out)
    table = compare_systems(reports)
    if args.table:
        table.write_csv(args.table)
    _banner("CONFIDENCE")
    print(table.format())
    return EXIT_OK


def _projection_section(path: str) -> List[str]:
    times = read_projections(path)
    lines = [f"## Projected times `{Path(path).name}`", ""]
    if times.size == 0:
        return lines + ["no traces", ""]
    spread = centred(times)
    q = np.percentile(spread, [5, 25, 75, 95])
    lines.append(f"{times.size} traces, raw median {to_ps(float(np.median(times))):.2f} ps")
    lines.append("")
    lines.append("| centred | 5% | 25% | 75% | 95% |")
    lines.append("|---|---|---|---|---|")
    lines.append("| ps | " + " | ".join(f"{to_ps(float(v)):+.2f}" for v in q) + " |")
    lines.append("")
    return lines


def cmd_report(args: argparse.Namespace) -> int:
    lines = ["# Photon-number resolution report", ""]
    reports: List[ConfidenceReport] = []
    for path in args.inputs:
        if Path(path).suffix.lower() == ".csv":
            lines.extend(_projection_section(path))
            continue
        doc = read_json(path)
        kind = doc.get("kind")
        if kind == "mixture":
            fit = MixtureFit.from_dict(doc)
            lines.append(f"## Mixture fit `{Path(path).name}`")
            lines.append("")
            lines.append("| n | fitted | ZTP | difference |")
            lines.append("|---|--------|-----|------------|")
            if fit.mu_label:
                for r in compare_ztp(fit):
                    lines.append(f"| {r.label} | {r.fitted:.4f} | {r.expected:.4f} | {r.difference:+.4f} |")
            else:
                for label, p in zip(("1", "2", "3+"), fit.p):
                    lines.append(f"| {label} | {p:.4f} | - | - |")
            lines.append("")
            lines.append(f"EMG: m={to_ps(fit.g1.m):.2f} ps, s={to_ps(fit.g1.s):.2f} ps, tau={to_ps(fit.g1.tau):.2f} ps; "
                         f"chi2/dof={fit.reduced_chi2:.3f}")
            lines.extend(f"- warning: {w}" for w in fit.warnings)
            lines.append("")
        elif kind == "single_photon":
            fit = SinglePhotonFit.from_dict(doc)
            lines.append(f"## Single-photon fit `{Path(path).name}`")
            lines.append("")
            lines.append(f"FWHM {to_ps(fit.fwhm):.2f} ps, chi2/dof {fit.reduced_chi2:.3f}, {fit.n_counts} counts")
            lines.append("")
        elif kind == "confidence":
            reports.append(ConfidenceReport.from_dict(doc))
        elif kind == "confidence_set":
            reports.extend(ConfidenceReport.from_dict(r) for r in doc["reports"])
        else:
            raise DataError(f"{path}: not a fit, confidence or projection document")
    if reports:
        table = compare_systems(reports)
        lines.append("## Confidence")
        lines.append("")
        lines.append("| pair | " + " | ".join(table.systems) + " |")
        lines.append("|---" * (len(table.systems) + 1) + "|")
        for r, (name, _) in enumerate(table.rows):
            lines.append(f"| {name} | " + " | ".join(table.cell(r, c) for c in range(len(table.systems))) + " |")
        lines.append("")
        if args.csv:
            table.write_csv(args.csv)
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig.default()
    config = config.with_overrides(args.seed, args.threads, args.output_dir)
    if args.downsample:
        config = config.with_downsampling(args.downsample)
    result = run_pipeline(config)
    _banner(f"PIPELINE {result.manifest['status'].upper()}")
    for artifact in result.manifest["artifacts"]:
        print(f"  {artifact['stage']:<11} {artifact['path']:<32} {artifact['sha256'][:16]}")
    if result.error is not None:
        print(f"failed at stage '{result.error.stage}': {result.error.cause}", file=sys.stderr)
    print(f"manifest: {result.manifest_path}")
    return result.exit_code


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Root random seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="Worker threads (default 1)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config; explicit flags win")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS,
                        help="INFO logging, -vv for DEBUG")

    parser = argparse.ArgumentParser(
        prog="snspd-pnr",
        description="Photon-number resolution from SNSPD traces by mean-derivative time projection",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[common],
        epilog="""
Examples:
  # Synthetic reference and measurement sets
  snspd-pnr synth --mu 0.003 --count 20000 --out data/ref
  snspd-pnr synth --mu 1.77 --count 50000 --out data/meas --seed 1

  # Align, project, fit, score
  snspd-pnr align --sync data/ref/sync.pnrb --target data/ref/snspd.pnrb --out ref.pnrb
  snspd-pnr align --sync data/meas/sync.pnrb --target data/meas/snspd.pnrb --out meas.pnrb
  snspd-pnr basis ref.pnrb --out basis.pnrv
  snspd-pnr project ref.pnrb --basis basis.pnrv --out ref.csv
  snspd-pnr project meas.pnrb --basis basis.pnrv --out meas.csv
  snspd-pnr fit ref.csv --single-photon --out g1.json
  snspd-pnr fit meas.csv --g1-from g1.json --mu 1.77 --out fit.json
  snspd-pnr confidence fit.json --out confidence.json --table confidence.csv

  # Everything at once
  snspd-pnr pipeline --config pipeline.json
        """,
    )
    parser.set_defaults(seed=None, threads=None, config=None, verbose=0)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="Generate labelled synthetic trace pairs")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--mu", type=float, help="Mean absorbed photon number")
    p.add_argument("--count", type=int, help="Traces per set (default 10000)")
    p.add_argument("--keep-zeros", action="store_true", help="Keep n = 0 (no-detection) traces")
    p.add_argument("--sweep", action="store_true", help="Generate a log-spaced mu sweep")
    p.add_argument("--sweep-points", type=int, default=SWEEP_POINTS)
    p.add_argument("--synth-config", help="SynthConfig JSON")
    p.add_argument("--format", choices=TRACE_FORMATS, default="pnrb", help="Trace file format (default pnrb)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", parents=[common], help="Convert a CSV or raw f32/f64 matrix to a bundle")
    p.add_argument("input")
    p.add_argument("--format", choices=["csv", "f32", "f64"], required=True)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--dt", type=float, help="Sample interval in seconds")
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--channel", choices=["snspd", "sync"], default="snspd")
    p.add_argument("--mu", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("align", parents=[common], help="Remove trigger jitter using the sync channel")
    p.add_argument("--sync", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, help="Parabola window width in samples (default 7)")
    p.add_argument("--no-refine", action="store_true", help="Single-pass peak estimate")
    p.add_argument("--shifts", help="Write index,shift_s CSV")
    p.add_argument("--format", choices=TRACE_FORMATS, default="pnrb", help="Output trace format (default pnrb)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("filter", parents=[common], help="First-order band-pass")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--f-lo", type=float, help=f"High-pass cutoff in Hz (default {F_LO:g})")
    p.add_argument("--f-hi", type=float, help=f"Low-pass cutoff in Hz (default {F_HI:g})")
    p.add_argument("--format", choices=TRACE_FORMATS, default="pnrb", help="Output trace format (default pnrb)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("decimate", parents=[common], help="Keep every k-th sample")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--factor", type=int)
    p.add_argument("--format", choices=TRACE_FORMATS, default="pnrb", help="Output trace format (default pnrb)")
    p.set_defaults(func=cmd_decimate)

    p = sub.add_parser("pca", parents=[common], help="Principal components, scree and scores")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("-k", "--components", dest="k", type=int, default=PCA_COMPONENTS,
                   help=f"Components to keep (default {PCA_COMPONENTS})")
    p.add_argument("--full", action="store_true", help="Keep every component")
    p.add_argument("--basis", help="Compare PC1 against this mean-derivative basis")
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("basis", parents=[common], help="Build the projection basis from reference traces")
    p.add_argument("reference")
    p.add_argument("--out", required=True)
    p.add_argument("--label")
    p.add_argument("--hybrid-sync", help="Sync reference bundle; builds a hybrid basis")
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("project", parents=[common], help="Projected time of every trace")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--basis", help="Basis sidecar")
    p.add_argument("--basis-from", help="Build the basis from this reference bundle")
    p.add_argument("--hybrid", help="Sync reference bundle for a hybrid basis built with --basis-from")
    p.add_argument("--sync", help="Sync traces of the input (hybrid projection)")
    p.add_argument("--estimator", choices=ESTIMATORS, default="derivative",
                   help="Projection route; a hybrid basis always uses the hybrid estimator")
    p.add_argument("--passes", type=int, default=REFINE_PASSES,
                   help=f"Sync refinement passes of the hybrid estimator; 0 is the bare dot product (default {REFINE_PASSES})")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("fit", parents=[common], help="Fit the projected-time histogram")
    p.add_argument("input", help="Projection CSV with a 'dt_s' column")
    p.add_argument("--out", required=True)
    p.add_argument("--single-photon", action="store_true", help="Fit the EMG single-photon shape")
    p.add_argument("--no-background", action="store_true")
    p.add_argument("--background-min-dchi2", type=float,
                   help=f"Chi^2 drop the background Gaussian must buy (default {BACKGROUND_MIN_DELTA_CHI2:g})")
    p.add_argument("--g1-from", help="Single-photon fit JSON to reuse")
    p.add_argument("--bins", type=int)
    p.add_argument("--mu", type=float, help="Mean photon number of the set")
    p.add_argument("--histogram", help="Write left,right,count,model CSV")
    p.add_argument("--ztp", help="Write fitted vs zero-truncated Poisson CSV")
    p.add_argument("--traces", help="Bundle the projections came from (for --class-means)")
    p.add_argument("--class-means", help="Write mean trace per photon class CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("confidence", parents=[common], help="Confidence metric with bootstrap errors")
    p.add_argument("inputs", nargs="+", help="Mixture fit (or confidence report) JSON files")
    p.add_argument("--out")
    p.add_argument("--table", help="Comparison CSV")
    p.add_argument("--n-bootstrap", type=int)
    p.add_argument("--grid-points", type=int)
    p.set_defaults(func=cmd_confidence)

    p = sub.add_parser("report", parents=[common], help="Markdown summary of fits and confidences")
    p.add_argument("inputs", nargs="+", help="Fit and confidence JSON files, projection CSV files")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", parents=[common], help="Run a configured chain of stages")
    p.add_argument("--output-dir")
    p.add_argument("--downsample", type=int, help="Insert filter + decimate by this factor")
    p.set_defaults(func=cmd_pipeline)
    return parser


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except (PnrError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
