import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from densecrf.core import global_score
from densecrf.crf import (
    FULL,
    Compatibility,
    ModelError,
    PairwiseModel,
    expected_pairwise_score,
    pairwise_message,
    pairwise_value,
    potts,
)
from densecrf.filtering import SPATIAL, FeatureField, KernelSpec, build_features

from conftest import scalar_message, two_kernel_model


def test_potts_values():
    assert potts(3, 3) == 1.0
    assert potts(1, 2) == 0.0
    for a in range(4):
        for b in range(4):
            assert potts(a, b) == potts(b, a)


def test_compatibility_must_be_symmetric():
    with pytest.raises(ModelError):
        Compatibility(FULL, np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ModelError):
        Compatibility(FULL, None)


def test_model_weight_count_checked():
    with pytest.raises(ModelError):
        PairwiseModel([KernelSpec(SPATIAL, (1.0, 1.0))], [1.0, 2.0])


def test_pairwise_value_examples():
    model = two_kernel_model(weights=(0.7, 0.4))
    fi = [np.array([1.0, 2.0]), np.array([1.0, 2.0, 10.0, 20.0, 30.0])]
    fj = [np.array([5.0, 2.0]), np.array([5.0, 2.0, 90.0, 20.0, 30.0])]
    assert pairwise_value(0, 1, fi, fj, model) == 0.0
    assert pairwise_value(2, 2, fi, fi, model) == pytest.approx(1.1, abs=1e-15)
    one = PairwiseModel([KernelSpec(SPATIAL, (1.0, 1.0))], [2.0])
    assert pairwise_value(1, 1, np.array([1.0, 0.0]), np.array([0.0, 0.0]), one) == pytest.approx(
        2 * np.exp(-0.5), abs=1e-15)


@given(st.integers(0, 2), st.integers(0, 2), st.integers(0, 2**32 - 1))
def test_pairwise_value_symmetric(l, l2, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3))
    model = two_kernel_model(compat=Compatibility(FULL, a + a.T))
    fi = [rng.normal(size=2), rng.normal(size=5) * 30]
    fj = [rng.normal(size=2), rng.normal(size=5) * 30]
    assert pairwise_value(l, l2, fi, fj, model) == pytest.approx(pairwise_value(l2, l, fj, fi, model), rel=1e-14)


def test_message_zero_weights_and_single_pixel(rng):
    img = rng.uniform(0, 255, (3, 3, 3))
    q = rng.dirichlet(np.ones(2), size=(3, 3))
    model = two_kernel_model(weights=(0.0, 0.0))
    assert np.all(pairwise_message(q, model, model.plans(img)) == 0)
    single = two_kernel_model()
    q1 = np.array([[[0.3, 0.7]]])
    np.testing.assert_allclose(pairwise_message(q1, single, single.plans(img[:1, :1])), 0.0, atol=1e-15)


def test_message_two_pixel_hand_value():
    model = PairwiseModel([KernelSpec(SPATIAL, (1.0, 1.0))], [1.0])
    img = np.zeros((1, 2, 3))
    q = np.array([[[0.8, 0.2], [0.3, 0.7]]])
    p = pairwise_message(q, model, model.plans(img))
    e = np.exp(-0.5)
    np.testing.assert_allclose(p[0, 0], e * np.array([0.3, 0.7]), atol=1e-15)
    np.testing.assert_allclose(p[0, 1], e * np.array([0.8, 0.2]), atol=1e-15)


@pytest.mark.parametrize("compat", ["potts", "full"])
def test_message_matches_scalar_loop_16x16(compat, rng):
    L = 4
    img = rng.uniform(0, 255, (16, 16, 3))
    if compat == "full":
        a = rng.normal(size=(L, L))
        comp = Compatibility(FULL, a + a.T)
    else:
        comp = Compatibility()
    model = two_kernel_model(weights=(0.6, -0.9), compat=comp)
    q = rng.dirichlet(np.ones(L), size=(16, 16))
    got = pairwise_message(q, model, model.plans(img))
    np.testing.assert_allclose(got, scalar_message(q, model, model.features(img)), rtol=0, atol=1e-10)


def test_full_identity_equals_potts(rng):
    img = rng.uniform(0, 255, (6, 6, 3))
    q = rng.dirichlet(np.ones(3), size=(6, 6))
    potts_model = two_kernel_model()
    full_model = two_kernel_model(compat=Compatibility(FULL, np.eye(3)))
    a = pairwise_message(q, potts_model, potts_model.plans(img))
    b = pairwise_message(q, full_model, full_model.plans(img))
    np.testing.assert_array_equal(a, b)


def test_message_rejects_mismatched_plans(rng):
    model = two_kernel_model()
    plans = model.plans(rng.uniform(0, 255, (4, 4, 3)))
    with pytest.raises(ModelError):
        pairwise_message(np.full((5, 4, 2), 0.5), model, plans)
    with pytest.raises(ModelError):
        pairwise_message(np.full((4, 4, 2), 0.5), model, plans[:1])


def test_expected_score_zero_weights(rng):
    img = rng.uniform(0, 255, (3, 3, 3))
    model = two_kernel_model(weights=(0.0, 0.0))
    q = rng.dirichlet(np.ones(3), size=(3, 3))
    assert expected_pairwise_score(q, model, model.features(img)) == 0.0


def test_expected_score_one_hot_equals_global_pairwise(rng):
    img = rng.uniform(0, 255, (2, 3, 3))
    model = two_kernel_model()
    y = rng.integers(0, 3, 6)
    q = np.eye(3)[y].reshape(2, 3, 3)
    feats = model.features(img)
    pair_only = global_score(y, np.zeros((2, 3, 3)), model, feats)
    assert expected_pairwise_score(q, model, feats) == pytest.approx(pair_only, rel=1e-12)


def _double_loop_expectation(q, model, feats):
    h, w, L = q.shape
    n = h * w
    qf = q.reshape(n, L)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            fi = [f.values[i] for f in feats]
            fj = [f.values[j] for f in feats]
            for l in range(L):
                for l2 in range(L):
                    total += qf[i, l] * qf[j, l2] * pairwise_value(l, l2, fi, fj, model)
    return total


def test_expected_score_identity_with_message(rng):
    img = rng.uniform(0, 255, (3, 4, 3))
    a = rng.normal(size=(3, 3))
    model = two_kernel_model(compat=Compatibility(FULL, a + a.T))
    q = rng.dirichlet(np.ones(3), size=(3, 4))
    feats = model.features(img)
    loop = _double_loop_expectation(q, model, feats)
    assert expected_pairwise_score(q, model, feats) == pytest.approx(loop, abs=1e-10)
    half = 0.5 * float((q * pairwise_message(q, model, model.plans(img))).sum())
    assert half == pytest.approx(loop, abs=1e-10)


def test_expected_score_size_limit():
    model = two_kernel_model()
    img = np.zeros((65, 64, 3))
    feats = [FeatureField(65, 64, np.zeros((65 * 64, 2))), FeatureField(65, 64, np.zeros((65 * 64, 5)))]
    with pytest.raises(ModelError):
        expected_pairwise_score(np.full((65, 64, 2), 0.5), model, feats)
    assert img.shape[0] * img.shape[1] > 4096


def test_model_features_and_copy(rng):
    model = two_kernel_model()
    img = rng.uniform(0, 255, (2, 2, 3))
    feats = model.features(img)
    np.testing.assert_array_equal(feats[0].values, build_features(img, SPATIAL).values)
    other = model.copy()
    other.weights[0] = 99.0
    assert model.weights[0] != 99.0
