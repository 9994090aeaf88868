import numpy as np
import pytest

from snspdpnr.constants import PS
from snspdpnr.fitting import EmgParams
from snspdpnr.synth import JitterEmg, SynthConfig, generate_dataset
from snspdpnr.traces import Channel, TraceSet


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


@pytest.fixture
def default_cfg():
    return SynthConfig(seed=7)


@pytest.fixture
def quiet_cfg():
    """No noise, no jitter of any kind: every n=1 trace is the template itself."""
    return SynthConfig(
        noise_sigma=0.0,
        jitter_emg=JitterEmg(sigma=0.0, tau=0.0),
        sync_jitter_sigma=0.0,
        seed=3,
    )


@pytest.fixture(scope="module")
def reference_pairs():
    """Low-μ labelled set with trigger jitter: 600 pairs, almost all single photons."""
    return generate_dataset(SynthConfig(mu=0.003, seed=11), 600)


@pytest.fixture
def g1_params():
    return EmgParams(m=0.0, s=17 * PS, tau=10 * PS)


@pytest.fixture
def tiny_set():
    data = np.arange(8, dtype=np.float64).reshape(2, 4) / 8.0
    return TraceSet(data, 2e-10, -4e-9, Channel.SNSPD, 0.5, {"source_id": "tiny"})


def _mixture_samples(rng, mu, count, g1, shift):
    """Projected times drawn from the generating mixture: ZTP photon number, EMG jitter."""
    n = rng.poisson(mu, size=4 * count)
    n = n[n > 0][:count]
    jitter = g1.m + g1.s * rng.standard_normal(n.size) + g1.tau * rng.standard_exponential(n.size)
    return (n - 1) * shift + jitter, n


@pytest.fixture
def mixture_sampler():
    return _mixture_samples
