import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ccfp.autodiff import Tensor
from ccfp.backbone import BackboneConfig, build_dual_model, dual_forward
from ccfp.errors import ConfigError, DimensionError
from ccfp.objectives import LossWeights, discrepancy, gram_matrix, semantic_loss, total_loss

from oracles import gram_loop

feature_maps = hnp.arrays(
    np.float64,
    st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
    elements=st.floats(-5, 5, allow_nan=False),
)


def test_gram_hand_example():
    f = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 2, 1, 2)
    np.testing.assert_allclose(gram_matrix(Tensor(f)).data[0], [[0.25, 0.0], [0.0, 0.25]], atol=1e-15)


def test_gram_matches_loop():
    f = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    np.testing.assert_allclose(gram_matrix(Tensor(f)).data, gram_loop(f), rtol=0, atol=1e-10)


def test_gram_zero_and_scaling():
    assert np.all(gram_matrix(Tensor(np.zeros((2, 3, 2, 2)))).data == 0)
    f = np.random.default_rng(1).normal(size=(1, 3, 3, 3))
    np.testing.assert_allclose(gram_matrix(Tensor(2.5 * f)).data, 6.25 * gram_matrix(Tensor(f)).data, rtol=1e-12)


def test_gram_rejects_wrong_rank():
    with pytest.raises(DimensionError):
        gram_matrix(Tensor(np.zeros((2, 3))))


@settings(max_examples=80, deadline=None)
@given(feature_maps)
def test_gram_symmetric_psd(f):
    G = gram_matrix(Tensor(f)).data
    np.testing.assert_allclose(G, G.transpose(0, 2, 1), atol=1e-12)
    for g in G:
        assert np.linalg.eigvalsh(g).min() >= -1e-10


@settings(max_examples=50, deadline=None)
@given(feature_maps, st.randoms(use_true_random=False))
def test_gram_spatial_permutation_invariance(f, rnd):
    B, C, H, W = f.shape
    perm = list(range(H * W))
    rnd.shuffle(perm)
    g = f.reshape(B, C, H * W)[:, :, perm].reshape(B, C, H, W)
    np.testing.assert_allclose(gram_matrix(Tensor(g)).data, gram_matrix(Tensor(f)).data, atol=1e-10)


def test_discrepancy_hand_example():
    # taps whose Gram matrices are diag(0.25) and zero
    a = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 2, 1, 2))
    b = Tensor(np.zeros((1, 2, 1, 2)))
    assert discrepancy([a], [b]).item() == pytest.approx(math.sqrt(2 * 0.0625), abs=1e-12)
    assert discrepancy([a], [b]).item() == pytest.approx(0.353553, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(feature_maps, st.integers(0, 2 ** 31 - 1))
def test_discrepancy_metric_properties(f, seed):
    g = f + np.random.default_rng(seed).normal(size=f.shape)
    a, b = [Tensor(f), Tensor(f * 0.5)], [Tensor(g), Tensor(g * 2.0)]
    assert discrepancy(a, a).item() == 0.0
    assert discrepancy(a, b).item() >= 0.0
    assert discrepancy(a, b).item() == pytest.approx(discrepancy(b, a).item(), rel=1e-12, abs=1e-15)


def test_discrepancy_is_batch_mean_of_layer_sums():
    rng = np.random.default_rng(2)
    a = [Tensor(rng.normal(size=(3, 2, 2, 2))), Tensor(rng.normal(size=(3, 4, 1, 3)))]
    b = [Tensor(rng.normal(size=(3, 2, 2, 2))), Tensor(rng.normal(size=(3, 4, 1, 3)))]
    per_sample = np.zeros(3)
    for x, y in zip(a, b):
        d = gram_loop(x.data) - gram_loop(y.data)
        per_sample += np.sqrt((d ** 2).sum(axis=(1, 2)))
    assert discrepancy(a, b).item() == pytest.approx(per_sample.mean(), abs=1e-12)


def test_discrepancy_errors():
    a = Tensor(np.zeros((1, 2, 2, 2)))
    with pytest.raises(DimensionError):
        discrepancy([a], [a, a])
    with pytest.raises(DimensionError):
        discrepancy([a], [Tensor(np.zeros((1, 3, 2, 2)))])
    with pytest.raises(DimensionError):
        discrepancy([], [])


def test_semantic_loss_values():
    a = Tensor(np.random.default_rng(3).normal(size=(4, 3)))
    assert semantic_loss(a, a).item() == 0.0
    assert semantic_loss(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item() == 2.0
    with pytest.raises(DimensionError):
        semantic_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_semantic_feature_variant_zero_at_symmetric_init():
    m = build_dual_model(BackboneConfig(widths=(3, 3, 4, 4)), 2, 0)
    acts = dual_forward(m, Tensor(np.random.default_rng(4).normal(size=(3, 1, 8, 8))), "train",
                        np.random.default_rng(0), update_stats=False)
    assert semantic_loss(acts.feats_o, acts.feats_p).item() == 0.0


def test_total_loss_arithmetic():
    assert total_loss(1.0, 1.0, 2.0, 3.0, LossWeights(0.5, 2.0)) == pytest.approx(7.0)
    assert total_loss(0.3, 0.4, 5.0, 9.0, LossWeights(0.0, 0.0)) == pytest.approx(0.7)
    assert total_loss(0.3, 0.4, 0.0, 0.0, LossWeights()) == pytest.approx(0.7)
    out = total_loss(Tensor(1.0), Tensor(1.0), Tensor(2.0), Tensor(3.0), LossWeights(0.5, 2.0))
    assert out.item() == pytest.approx(7.0)


@pytest.mark.parametrize("bad", [-0.1, math.inf, math.nan])
def test_loss_weights_validation(bad):
    with pytest.raises(ConfigError):
        LossWeights(lambda_dis=bad)
    with pytest.raises(ConfigError):
        LossWeights(lambda_sem=bad)
