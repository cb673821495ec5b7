import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from densecrf.crf import Compatibility, PairwiseModel
from densecrf.filtering import BILATERAL, SPATIAL, KernelSpec

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def random_image(rng, h, w):
    return rng.uniform(0, 255, (h, w, 3))


def two_kernel_model(weights=(0.7, 0.4), spatial=(2.0, 2.5), bilateral=(3.0, 3.5, 40.0, 50.0, 60.0),
                     compat=None):
    return PairwiseModel([KernelSpec(SPATIAL, spatial), KernelSpec(BILATERAL, bilateral)],
                         list(weights), compat or Compatibility())


def scalar_message(q, model, feats_list):
    """Reference pairwise message with explicit loops over pixels and labels."""
    h, w, L = q.shape
    n = h * w
    qf = q.reshape(n, L)
    mu = model.compat_matrix(L)
    out = np.zeros((n, L))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            k = 0.0
            for wm, spec, feats in zip(model.weights, model.kernels, feats_list):
                d = (feats.values[i] - feats.values[j]) / np.asarray(spec.sigma)
                k += wm * np.exp(-0.5 * float(d @ d))
            for l in range(L):
                for l2 in range(L):
                    out[i, l] += mu[l, l2] * k * qf[j, l2]
    return out.reshape(h, w, L)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
