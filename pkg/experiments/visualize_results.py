#!/usr/bin/env python3
"""Generate visualizations from experiment results."""
import csv
import json
from pathlib import Path
from typing import Dict, List

import matplotlib.pyplot as plt
import numpy as np

plt.style.use('seaborn-v0_8-whitegrid')
COLORS = {
    'one': '#2E86AB',      # Blue
    'two': '#A23B72',      # Magenta
    'three': '#F18F01',    # Orange
    'neutral': '#6C757D',  # Gray
}


def load_results(results_file: Path) -> List[Dict]:
    """Load results from CSV file."""
    with open(results_file, 'r') as f:
        return list(csv.DictReader(f))


def get_phase_results(results: List[Dict], phase: int) -> List[Dict]:
    """Filter results by phase number."""
    return [r for r in results if int(r['phase']) == phase]


def ztp_weights(mu: np.ndarray) -> np.ndarray:
    """Zero-truncated Poisson P(1), P(2), P(>=3) for each mu."""
    mu = np.asarray(mu, dtype=float)
    norm = -np.expm1(-mu)
    p1 = mu * np.exp(-mu) / norm
    p2 = 0.5 * mu**2 * np.exp(-mu) / norm
    return np.stack([p1, p2, 1.0 - p1 - p2])


def plot_weights_vs_mu(results: List[Dict], output_dir: Path):
    """Fitted class weights against the zero-truncated Poisson curves."""
    phase2 = sorted(get_phase_results(results, 2), key=lambda r: float(r['mu']))
    if not phase2:
        return
    mus = np.array([float(r['mu']) for r in phase2])
    fitted = np.array([[float(r[k]) for r in phase2] for k in ('p1', 'p2', 'p3')])

    curve_mu = np.geomspace(min(mus.min(), 0.05), mus.max() * 1.1, 200)
    expected = ztp_weights(curve_mu)

    fig, ax = plt.subplots(figsize=(10, 6))
    for i, (key, label) in enumerate((('one', 'n = 1'), ('two', 'n = 2'), ('three', 'n ≥ 3'))):
        ax.plot(curve_mu, expected[i], color=COLORS[key], linewidth=2, alpha=0.6)
        ax.plot(mus, fitted[i], 'o', markersize=9, color=COLORS[key], label=f'{label} fitted')

    ax.set_xscale('log')
    ax.set_xlabel('Mean photon number μ', fontsize=14, fontweight='bold')
    ax.set_ylabel('Class weight', fontsize=14, fontweight='bold')
    ax.set_title('Fitted Weights vs Zero-Truncated Poisson\n(lines: expected)', fontsize=16, fontweight='bold')
    ax.legend(fontsize=11)
    ax.set_ylim(0, 1.05)
    ax.tick_params(axis='both', labelsize=12)

    plt.tight_layout()
    plt.savefig(output_dir / 'weights_vs_mu.png', dpi=150, bbox_inches='tight')
    plt.close()
    print("  ✓ Weights vs mu")


def plot_confidence_vs_jitter(results: List[Dict], output_dir: Path):
    """C(1->2) and C(2->3+) as the single-photon jitter grows."""
    phase3 = get_phase_results(results, 3)
    if not phase3:
        return
    rows = sorted(phase3, key=lambda r: json.loads(r['synth'])['jitter_emg']['sigma'])
    sigma_ps = [json.loads(r['synth'])['jitter_emg']['sigma'] * 1e12 for r in rows]

    fig, ax = plt.subplots(figsize=(10, 6))
    ax.errorbar(sigma_ps, [float(r['c12']) for r in rows], yerr=[float(r['c12_err']) for r in rows],
                marker='o', markersize=9, linewidth=2.5, capsize=4, color=COLORS['one'], label='C(1→2)')
    ax.errorbar(sigma_ps, [float(r['c23']) for r in rows], yerr=[float(r['c23_err']) for r in rows],
                marker='s', markersize=9, linewidth=2.5, capsize=4, color=COLORS['two'], label='C(2→3+)')

    ax.set_xlabel('Single-photon jitter σ (ps)', fontsize=14, fontweight='bold')
    ax.set_ylabel('Confidence', fontsize=14, fontweight='bold')
    ax.set_title('Resolution Confidence vs Detector Jitter', fontsize=16, fontweight='bold')
    ax.legend(fontsize=11)
    ax.set_ylim(0, 1.0)
    ax.tick_params(axis='both', labelsize=12)

    plt.tight_layout()
    plt.savefig(output_dir / 'confidence_vs_jitter.png', dpi=150, bbox_inches='tight')
    plt.close()
    print("  ✓ Confidence vs jitter")


def plot_confidence_vs_mu(results: List[Dict], output_dir: Path):
    """Confidence across the mean photon number sweep."""
    phase2 = sorted(get_phase_results(results, 2), key=lambda r: float(r['mu']))
    if not phase2:
        return
    mus = [float(r['mu']) for r in phase2]

    fig, ax = plt.subplots(figsize=(10, 6))
    ax.errorbar(mus, [float(r['c12']) for r in phase2], yerr=[float(r['c12_err']) for r in phase2],
                marker='o', markersize=9, linewidth=2.5, capsize=4, color=COLORS['one'], label='C(1→2)')
    ax.errorbar(mus, [float(r['c23']) for r in phase2], yerr=[float(r['c23_err']) for r in phase2],
                marker='s', markersize=9, linewidth=2.5, capsize=4, color=COLORS['two'], label='C(2→3+)')

    ax.set_xscale('log')
    ax.set_xlabel('Mean photon number μ', fontsize=14, fontweight='bold')
    ax.set_ylabel('Confidence', fontsize=14, fontweight='bold')
    ax.set_title('Resolution Confidence vs μ', fontsize=16, fontweight='bold')
    ax.legend(fontsize=11)
    ax.set_ylim(0, 1.0)
    ax.tick_params(axis='both', labelsize=12)

    plt.tight_layout()
    plt.savefig(output_dir / 'confidence_vs_mu.png', dpi=150, bbox_inches='tight')
    plt.close()
    print("  ✓ Confidence vs mu")


def plot_method_comparison(results: List[Dict], output_dir: Path):
    """Grouped bars of C(1->2) for the front-end and estimator variants."""
    rows = [r for phase in (4, 5, 6) for r in get_phase_results(results, phase)]
    if not rows:
        return
    labels = [r['description'].split('] ', 1)[-1] for r in rows]
    c12 = np.array([float(r['c12']) for r in rows])
    c12_err = np.array([float(r['c12_err']) for r in rows])
    c23 = np.array([float(r['c23']) for r in rows])
    c23_err = np.array([float(r['c23_err']) for r in rows])

    x = np.arange(len(rows))
    width = 0.38

    fig, ax = plt.subplots(figsize=(12, 6))
    bars = ax.bar(x - width / 2, c12, width, yerr=c12_err, capsize=4, color=COLORS['one'], label='C(1→2)')
    ax.bar(x + width / 2, c23, width, yerr=c23_err, capsize=4, color=COLORS['two'], label='C(2→3+)')

    for bar, value in zip(bars, c12):
        ax.text(bar.get_x() + bar.get_width() / 2, value + 0.02, f'{value:.3f}',
                ha='center', va='bottom', fontsize=10, fontweight='bold')

    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=11, rotation=20, ha='right')
    ax.set_ylabel('Confidence', fontsize=14, fontweight='bold')
    ax.set_title('Front End and Estimator Variants', fontsize=16, fontweight='bold')
    ax.legend(fontsize=11)
    ax.set_ylim(0, 1.0)

    plt.tight_layout()
    plt.savefig(output_dir / 'method_comparison.png', dpi=150, bbox_inches='tight')
    plt.close()
    print("  ✓ Method comparison")


def main():
    results_dir = Path("experiments/results")
    results_files = list(results_dir.glob("pnr_results_*.csv"))

    if not results_files:
        print("Error: No results files found in experiments/results/")
        print("Run experiments first with: python experiments/run_experiments.py")
        return

    results_file = max(results_files, key=lambda p: p.stat().st_mtime)
    print(f"Loading results from: {results_file.name}")

    results = load_results(results_file)
    print(f"Loaded {len(results)} experiments\n")

    output_dir = Path("experiments/figures")
    output_dir.mkdir(exist_ok=True)

    print("Generating visualizations...")

    plot_weights_vs_mu(results, output_dir)
    plot_confidence_vs_mu(results, output_dir)
    plot_confidence_vs_jitter(results, output_dir)
    plot_method_comparison(results, output_dir)

    print(f"\n✅ All visualizations saved to: {output_dir}/")
    print("\nGenerated files:")
    for f in sorted(output_dir.glob("*.png")):
        print(f"  • {f.name}")


if __name__ == "__main__":
    main()
