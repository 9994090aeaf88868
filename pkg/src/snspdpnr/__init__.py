"""SNSPD photon-number resolution by mean-derivative time projection."""

from .traces import Channel, Trace, TraceSet, AcquisitionMeta, mean_trace, derivative  # noqa: F401
from .bundle import read_trace_bundle, write_trace_bundle, import_raw  # noqa: F401
from .synth import SynthConfig, PulseTemplate, JitterEmg, generate_dataset, generate_pair  # noqa: F401
from .preprocess import align_dataset, fourier_shift, parabola_peak, bandpass_first_order, decimate  # noqa: F401
from .pca import fit_pca, pca_scores, scree  # noqa: F401
from .estimators import build_basis, project_time, project_set, build_hybrid_basis, hybrid_project  # noqa: F401
from .fitting import (  # noqa: F401
    EmgParams,
    MixtureFit,
    PhotonClass,
    classify,
    emg_pdf,
    fit_mixture,
    fit_single_photon,
    make_histogram,
    ztp_pmf,
)
from .confidence import bhattacharyya, build_report, compare_systems, confidence_error, confidence_pair  # noqa: F401
from .pipeline import PipelineConfig, run_pipeline  # noqa: F401

__version__ = "0.1.0"
