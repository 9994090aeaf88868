"""Profile one small pipeline run to find the hot spots."""
import cProfile
import pstats
import sys
import tempfile
from io import StringIO
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from snspdpnr.pipeline import PipelineConfig, run_pipeline


def run_small_pipeline(output_dir: str):
    """Synthesize, align, project, fit and score a reduced data set."""
    config = PipelineConfig.from_dict({
        "seed": 42,
        "output_dir": output_dir,
        "stages": [
            {"name": "synth", "params": {"count": 20000, "reference_count": 5000}},
            {"name": "align"},
            {"name": "basis"},
            {"name": "project"},
            {"name": "fit"},
            {"name": "confidence", "params": {"n_bootstrap": 50}},
        ],
    })
    result = run_pipeline(config)
    if not result.ok:
        raise SystemExit(f"pipeline failed at {result.manifest['failed_stage']}")


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        profiler = cProfile.Profile()
        profiler.enable()

        run_small_pipeline(tmp)

        profiler.disable()

    s = StringIO()
    ps = pstats.Stats(profiler, stream=s).sort_stats('cumulative')
    ps.print_stats(30)  # Top 30 functions
    print(s.getvalue())
