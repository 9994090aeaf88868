#!/usr/bin/env python3
"""Experiment suite for the photon-number resolution pipeline.

Every experiment is one ``snspd-pnr pipeline`` run on synthetic data. The
suite checks the fitted class weights against the zero-truncated Poisson
expectation, sweeps the mean photon number and the detector jitter, and
compares the derivative, hybrid and PC1 estimators and the downsampled
128 GS/s front end.

Results are saved to CSV and JSON files for visualize_results.py.
"""
import argparse
import csv
import json
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

REPO = Path(__file__).resolve().parents[1]

PHASE_NAMES = {
    1: "Validation",
    2: "Mean Photon Number Sweep",
    3: "Jitter Sweep",
    4: "Downsampled Front End",
    5: "Hybrid Projection",
    6: "Estimator Comparison",
}


@dataclass
class ExperimentConfig:
    """Configuration for a single pipeline run."""
    phase: int
    experiment_id: str
    description: str
    mu: float
    count: int
    reference_count: int
    seed: int
    synth: Dict[str, Any] = field(default_factory=dict)
    stages: List[Dict[str, Any]] = field(default_factory=list)
    downsample: Optional[int] = None

    def pipeline_document(self, output_dir: Path) -> Dict[str, Any]:
        source = {
            "name": "synth",
            "params": {
                "count": self.count,
                "reference_count": self.reference_count,
                "mu": self.mu,
                "config": self.synth,
            },
        }
        return {
            "seed": self.seed,
            "threads": 1,
            "output_dir": str(output_dir),
            "stages": [source] + self.stages,
        }


@dataclass
class ExperimentResult:
    """Numbers pulled from one run's manifest, fits and confidence report."""
    config: ExperimentConfig
    status: str
    p1: float
    p2: float
    p3: float
    ztp_max_diff: float
    reduced_chi2: float
    reference_fwhm_ps: float
    c12: float
    c12_err: float
    c23: float
    c23_err: float
    elapsed_time: float
    warnings: int = 0


def _stages(fit_bins: Optional[int] = None, estimator: str = "derivative",
            hybrid: bool = False, n_bootstrap: int = 200) -> List[Dict[str, Any]]:
    stages: List[Dict[str, Any]] = []
    if not hybrid:
        stages.append({"name": "align"})
    stages.append({"name": "basis", "params": {"hybrid": hybrid}})
    stages.append({"name": "project", "params": {"estimator": estimator}})
    stages.append({"name": "fit", "params": {"bins": fit_bins}})
    stages.append({"name": "confidence", "params": {"n_bootstrap": n_bootstrap}})
    return stages


def create_experiment_suite(traces_multiplier: float = 1.0) -> List[ExperimentConfig]:
    """Create the complete experiment suite.

    Args:
        traces_multiplier: Scale factor for trace counts (0.1 for quick tests)

    Returns:
        List of experiment configurations organized by phase
    """
    experiments = []
    exp_counter = 0
    n_bootstrap = 50 if traces_multiplier < 1 else 200

    def scaled(n: int) -> int:
        return max(5000, int(n * traces_multiplier))

    def ref_count(n: int) -> int:
        return max(2000, int(n * traces_multiplier))

    # =========================================================================
    # PHASE 1: VALIDATION
    # Fitted weights at mu = 1.77 against 0.3634 / 0.3216 / 0.3150
    # =========================================================================
    for seed in (1, 2, 3):
        exp_counter += 1
        experiments.append(ExperimentConfig(
            phase=1,
            experiment_id=f"P1_{exp_counter:03d}",
            description=f"[Validation] mu=1.77 seed={seed}",
            mu=1.77,
            count=scaled(50000),
            reference_count=ref_count(20000),
            seed=seed,
            stages=_stages(n_bootstrap=n_bootstrap),
        ))

    # =========================================================================
    # PHASE 2: MEAN PHOTON NUMBER SWEEP
    # Weights should follow the ZTP curve across the operating range
    # =========================================================================
    for mu in (0.1, 0.3, 0.6, 1.0, 1.77, 2.55):
        exp_counter += 1
        experiments.append(ExperimentConfig(
            phase=2,
            experiment_id=f"P2_{exp_counter:03d}",
            description=f"[Sweep] mu={mu}",
            mu=mu,
            count=scaled(50000),
            reference_count=ref_count(20000),
            seed=2000 + exp_counter,
            stages=_stages(n_bootstrap=n_bootstrap),
        ))

    # =========================================================================
    # PHASE 3: JITTER SWEEP
    # C(1->2) must fall as the single-photon jitter grows
    # =========================================================================
    for sigma_ps in (5, 10, 17, 25, 35, 50):
        exp_counter += 1
        experiments.append(ExperimentConfig(
            phase=3,
            experiment_id=f"P3_{exp_counter:03d}",
            description=f"[Jitter] sigma={sigma_ps} ps",
            mu=1.77,
            count=scaled(50000),
            reference_count=ref_count(20000),
            seed=3000 + exp_counter,
            synth={"jitter_emg": {"sigma": sigma_ps * 1e-12, "tau": 10e-12}},
            stages=_stages(n_bootstrap=n_bootstrap),
        ))

    # =========================================================================
    # PHASE 4: DOWNSAMPLED FRONT END
    # 128 GS/s traces, band-passed and decimated by 26 to ~4.9 GS/s,
    # against the same pulses sampled natively at 128 GS/s
    # =========================================================================
    fast = {
        "sample_rate": 128e9,
        "trace_len": 3328,
        "pre_trigger": 520,
        "template": {"rise_time": 1.5e-9, "fall_time": 2e-9, "amplitude": 0.25, "onset": 10e-9, "shape": "edge"},
    }
    for downsample in (None, 26):
        exp_counter += 1
        label = "native 128 GS/s" if downsample is None else f"decimated /{downsample}"
        experiments.append(ExperimentConfig(
            phase=4,
            experiment_id=f"P4_{exp_counter:03d}",
            description=f"[Downsample] {label}",
            mu=1.77,
            count=scaled(10000),
            reference_count=ref_count(5000),
            seed=4000,
            synth=fast,
            stages=_stages(n_bootstrap=n_bootstrap),
            downsample=downsample,
        ))

    # =========================================================================
    # PHASE 5: HYBRID PROJECTION
    # One joint projection of both channels instead of align-then-project
    # =========================================================================
    for hybrid in (False, True):
        exp_counter += 1
        experiments.append(ExperimentConfig(
            phase=5,
            experiment_id=f"P5_{exp_counter:03d}",
            description=f"[Hybrid] {'hybrid basis' if hybrid else 'align + derivative'}",
            mu=1.77,
            count=scaled(50000),
            reference_count=ref_count(20000),
            seed=5000,
            stages=_stages(hybrid=hybrid, n_bootstrap=n_bootstrap),
        ))

    # =========================================================================
    # PHASE 6: ESTIMATOR COMPARISON
    # Mean-derivative projection against the first principal component
    # =========================================================================
    for estimator in ("derivative", "pc1"):
        exp_counter += 1
        experiments.append(ExperimentConfig(
            phase=6,
            experiment_id=f"P6_{exp_counter:03d}",
            description=f"[Estimator] {estimator}",
            mu=1.77,
            count=scaled(50000),
            reference_count=ref_count(20000),
            seed=6000,
            stages=_stages(estimator=estimator, n_bootstrap=n_bootstrap),
        ))

    return experiments


def build_command(config_path: Path, run_dir: Path, config: ExperimentConfig) -> List[str]:
    """Build the ``snspd-pnr pipeline`` command for one experiment."""
    cmd = [
        sys.executable, "-m", "snspdpnr", "pipeline",
        "--config", str(config_path),
        "--output-dir", str(run_dir),
    ]
    if config.downsample:
        cmd.extend(["--downsample", str(config.downsample)])
    return cmd


def parse_run(run_dir: Path) -> Dict[str, Any]:
    """Pull the reported numbers out of a finished run directory."""
    manifest = json.loads((run_dir / "manifest.json").read_text())
    mixture = json.loads((run_dir / "mixture.json").read_text())
    single = json.loads((run_dir / "single_photon.json").read_text())
    report = json.loads((run_dir / "confidence.json").read_text())

    ztp_max_diff = float("nan")
    ztp_path = run_dir / "ztp.csv"
    if ztp_path.exists():
        with open(ztp_path, newline="") as f:
            ztp_max_diff = max(abs(float(row["difference"])) for row in csv.DictReader(f))

    pairs = {(p["from_n"], p["to_n"]): p for p in report["pairs"]}
    c12 = pairs.get(("1", "2"), {"confidence": float("nan"), "std_error": float("nan")})
    c23 = pairs.get(("2", "3+"), {"confidence": float("nan"), "std_error": float("nan")})
    return {
        "status": manifest["status"],
        "p1": mixture["p"][0],
        "p2": mixture["p"][1],
        "p3": mixture["p"][2],
        "ztp_max_diff": ztp_max_diff,
        "reduced_chi2": mixture["reduced_chi2"],
        "reference_fwhm_ps": single["fwhm"] * 1e12,
        "c12": c12["confidence"],
        "c12_err": c12["std_error"],
        "c23": c23["confidence"],
        "c23_err": c23["std_error"],
        "warnings": len(mixture["warnings"]) + len(report.get("warnings", [])),
    }


def run_experiment(config: ExperimentConfig, output_dir: Path) -> ExperimentResult:
    """Run a single experiment and return results."""
    run_dir = output_dir / "runs" / config.experiment_id
    config_path = output_dir / "configs" / f"{config.experiment_id}.json"
    config_path.parent.mkdir(parents=True, exist_ok=True)
    config_path.write_text(json.dumps(config.pipeline_document(run_dir), indent=2))

    start_time = time.time()
    result = subprocess.run(
        build_command(config_path, run_dir, config),
        capture_output=True,
        text=True,
        env={"PYTHONPATH": str(REPO / "src")},
        cwd=str(REPO),
    )
    elapsed = time.time() - start_time

    if result.returncode != 0:
        print(f"ERROR: {config.experiment_id} failed with exit code {result.returncode}!")
        print(f"STDERR: {result.stderr}")
        raise RuntimeError(f"Experiment {config.experiment_id} failed")

    return ExperimentResult(config=config, elapsed_time=elapsed, **parse_run(run_dir))


CSV_FIELDS = [
    'phase', 'experiment_id', 'description', 'mu', 'count', 'seed', 'synth', 'downsample',
    'estimator', 'hybrid', 'status', 'p1', 'p2', 'p3', 'ztp_max_diff', 'reduced_chi2',
    'reference_fwhm_ps', 'c12', 'c12_err', 'c23', 'c23_err', 'warnings', 'elapsed_time',
]


def _stage_param(config: ExperimentConfig, stage: str, key: str, default: Any) -> Any:
    for entry in config.stages:
        if entry["name"] == stage:
            return entry.get("params", {}).get(key, default)
    return default


def save_results(results: List[ExperimentResult], output_dir: Path, timestamp: str):
    """Save results to CSV and JSON."""
    output_dir.mkdir(parents=True, exist_ok=True)

    csv_path = output_dir / f"pnr_results_{timestamp}.csv"
    json_path = output_dir / f"pnr_results_{timestamp}.json"

    with open(csv_path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(CSV_FIELDS)
        for r in results:
            writer.writerow([
                r.config.phase,
                r.config.experiment_id,
                r.config.description,
                r.config.mu,
                r.config.count,
                r.config.seed,
                json.dumps(r.config.synth),
                r.config.downsample or "",
                _stage_param(r.config, "project", "estimator", "derivative"),
                _stage_param(r.config, "basis", "hybrid", False),
                r.status,
                f"{r.p1:.5f}",
                f"{r.p2:.5f}",
                f"{r.p3:.5f}",
                f"{r.ztp_max_diff:.5f}",
                f"{r.reduced_chi2:.3f}",
                f"{r.reference_fwhm_ps:.2f}",
                f"{r.c12:.5f}",
                f"{r.c12_err:.5f}",
                f"{r.c23:.5f}",
                f"{r.c23_err:.5f}",
                r.warnings,
                f"{r.elapsed_time:.1f}",
            ])

    print(f"Results saved to: {csv_path}")

    json_data = {
        "metadata": {
            "timestamp": timestamp,
            "total_experiments": len(results),
            "total_traces": sum(r.config.count + r.config.reference_count for r in results),
        },
        "results": [
            {
                "config": asdict(r.config),
                "results": {k: v for k, v in asdict(r).items() if k != "config"},
            }
            for r in results
        ],
    }

    with open(json_path, 'w') as f:
        json.dump(json_data, f, indent=2)

    print(f"Results saved to: {json_path}")


def print_summary(results: List[ExperimentResult]):
    """Print summary statistics."""
    print("\n" + "=" * 80)
    print("EXPERIMENT SUMMARY")
    print("=" * 80)

    phases: Dict[int, List[ExperimentResult]] = {}
    for r in results:
        phases.setdefault(r.config.phase, []).append(r)

    for phase in sorted(phases):
        print(f"\n--- Phase {phase}: {PHASE_NAMES.get(phase, 'Unknown')} ---")
        print(f"{'Experiment':<34} {'P1':>7} {'P2':>7} {'P3+':>7} {'|dZTP|':>7} {'C1->2':>14} {'C2->3+':>14}")
        print("-" * 80)

        for r in phases[phase]:
            desc = r.config.description.split("] ", 1)[-1]
            if len(desc) > 32:
                desc = desc[:29] + "..."
            c12 = f"{r.c12:.3f}±{r.c12_err:.3f}"
            c23 = f"{r.c23:.3f}±{r.c23_err:.3f}"
            print(f"{desc:<34} {r.p1:>7.4f} {r.p2:>7.4f} {r.p3:>7.4f} {r.ztp_max_diff:>7.4f} {c12:>14} {c23:>14}")

    jitter = sorted(phases.get(3, []), key=lambda r: r.config.synth["jitter_emg"]["sigma"])
    if len(jitter) > 1:
        monotone = all(a.c12 >= b.c12 for a, b in zip(jitter, jitter[1:]))
        print(f"\nC(1->2) falls monotonically with jitter: {'yes' if monotone else 'NO'}")

    total_time = sum(r.elapsed_time for r in results)
    print(f"\n{'=' * 80}")
    print(f"TOTAL: {len(results)} experiments, {total_time/60:.1f} minutes")
    print("=" * 80)


def main():
    parser = argparse.ArgumentParser(
        description="Run the photon-number resolution experiment suite",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Run full experiment suite
  python experiments/run_experiments.py

  # Quick test (10% of traces, fewer bootstrap draws)
  python experiments/run_experiments.py --quick

  # Run only Phase 3 (jitter sweep)
  python experiments/run_experiments.py --phase 3

  # See what would run without executing
  python experiments/run_experiments.py --dry-run
        """
    )

    parser.add_argument(
        "--output-dir",
        default="experiments/results",
        help="Output directory for results"
    )
    parser.add_argument(
        "--phase",
        type=int,
        choices=sorted(PHASE_NAMES),
        help="Run only specific phase (1-6)"
    )
    parser.add_argument(
        "--quick",
        action="store_true",
        help="Quick mode: 10%% of traces per experiment"
    )
    parser.add_argument(
        "--dry-run",
        action="store_true",
        help="Show what would run without executing"
    )
    parser.add_argument(
        "--yes", "-y",
        action="store_true",
        help="Skip confirmation prompt"
    )

    args = parser.parse_args()

    multiplier = 0.1 if args.quick else 1.0
    experiments = create_experiment_suite(traces_multiplier=multiplier)

    if args.phase:
        experiments = [e for e in experiments if e.phase == args.phase]

    print("=" * 80)
    print("PHOTON-NUMBER RESOLUTION EXPERIMENT SUITE")
    print("=" * 80)

    current_phase = None
    for exp in experiments:
        if exp.phase != current_phase:
            current_phase = exp.phase
            print(f"\n=== Phase {current_phase}: {PHASE_NAMES.get(current_phase, 'Unknown')} ===")
        print(f"  {exp.experiment_id}: {exp.description} ({exp.count} + {exp.reference_count} traces)")

    total_traces = sum(e.count + e.reference_count for e in experiments)
    print(f"\n{'=' * 80}")
    print(f"Total: {len(experiments)} experiments, {total_traces} synthetic traces")
    print("=" * 80)

    if args.dry_run:
        print("\nDry run complete - no experiments executed")
        return

    if not args.yes:
        response = input("\nProceed with experiments? (yes/no): ")
        if response.lower() != 'yes':
            print("Aborted")
            return
    else:
        print("\nAuto-confirmed with --yes flag, proceeding...")

    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    output_dir = Path(args.output_dir)
    results = []

    start_time = time.time()
    for i, exp in enumerate(experiments, 1):
        print(f"\n[{i}/{len(experiments)}] {exp.experiment_id}: {exp.description}")

        try:
            result = run_experiment(exp, output_dir / timestamp)
            results.append(result)

            print(f"  → weights: {result.p1:.4f} / {result.p2:.4f} / {result.p3:.4f}"
                  f" (max |fitted - ZTP| {result.ztp_max_diff:.4f})")
            print(f"  → C(1->2) = {result.c12:.4f} ± {result.c12_err:.4f}")
            print(f"  → Time: {result.elapsed_time:.1f}s")

            save_results(results, output_dir, timestamp)

        except Exception as e:
            print(f"  ERROR: {e}")
            print("  Continuing with next experiment...")

    elapsed_total = time.time() - start_time
    print(f"\n{'=' * 80}")
    print("EXPERIMENTS COMPLETE")
    print(f"Time: {elapsed_total/60:.1f} minutes")
    print(f"{'=' * 80}")

    print_summary(results)


if __name__ == "__main__":
    main()
