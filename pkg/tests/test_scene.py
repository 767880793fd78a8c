import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sugarsplat.scene import (
    SPLIT_SCALE_DIVISOR,
    Gaussian3D,
    GaussianCloud,
    covariance,
    covariance_backward,
    covariance_from,
    densify_split,
    matrix_to_quaternion,
    normalize_quaternions,
    opacity_weighted_volume,
    prune,
    quaternion_to_matrix,
    sigmoid,
)

from conftest import central_diff, random_cloud, rel_err

finite = st.floats(-3, 3, allow_nan=False)


def _g(q, log_s):
    return Gaussian3D(np.zeros(3), np.asarray(q, float), np.asarray(log_s, float), 0.0, np.zeros(3))


def test_covariance_identity():
    np.testing.assert_allclose(covariance(_g([1, 0, 0, 0], [0, 0, 0])), np.eye(3), atol=1e-15)


def test_covariance_axis_aligned():
    np.testing.assert_allclose(covariance(_g([1, 0, 0, 0], [math.log(2), 0, 0])), np.diag([4.0, 1, 1]), atol=1e-12)


def test_covariance_quarter_turn_about_z():
    q = [math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)]
    np.testing.assert_allclose(covariance(_g(q, [math.log(2), 0, 0])), np.diag([1.0, 4, 1]), atol=1e-12)


def test_unnormalized_quaternion_is_renormalized():
    a = covariance(_g([2, 0, 0, 2], [0.1, -0.2, 0.3]))
    b = covariance(_g(np.array([1, 0, 0, 1]) / math.sqrt(2), [0.1, -0.2, 0.3]))
    np.testing.assert_allclose(a, b, atol=1e-14)


@given(arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3),
       arrays(np.float64, 3, elements=finite))
def test_covariance_spd_with_expected_spectrum(q, log_s):
    cov = covariance(_g(q, log_s))
    assert np.max(np.abs(cov - cov.T)) <= 1e-12 * max(1.0, np.abs(cov).max())
    eig = np.linalg.eigvalsh(cov)
    expected = np.sort(np.exp(2 * log_s))
    np.testing.assert_allclose(eig, expected, rtol=1e-9, atol=1e-9 * expected.max())
    assert eig.min() > 0


@given(arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_quaternion_normalization_tolerance(q):
    assert abs(np.linalg.norm(normalize_quaternions(q)) - 1.0) < 1e-9


@given(arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_matrix_quaternion_round_trip(q):
    R = quaternion_to_matrix(q)
    np.testing.assert_allclose(quaternion_to_matrix(matrix_to_quaternion(R)), R, atol=1e-12)


def test_covariance_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(4, 4))
    s = rng.normal(scale=0.5, size=(4, 3))
    G = rng.normal(size=(4, 3, 3))

    def f():
        return float(np.sum(G * covariance_from(q, s)))

    gq, gs = covariance_backward(q, s, G)
    assert rel_err(gq, central_diff(f, q, 1e-6)) < 1e-6
    assert rel_err(gs, central_diff(f, s, 1e-6)) < 1e-6


@given(st.floats(-30, 30), arrays(np.float64, 3, elements=st.floats(-30, 30)))
def test_parameterization_keeps_opacity_and_scale_valid(logit, log_s):
    g = Gaussian3D(np.zeros(3), np.array([1.0, 0, 0, 0]), log_s, logit, np.zeros(3))
    assert 0.0 < g.opacity < 1.0
    assert np.all(g.scale > 0)


def test_logistic_accurate_in_the_tails():
    assert sigmoid(-50.0) == pytest.approx(math.exp(-50.0), rel=1e-12)


def test_gradient_buffers_are_congruent():
    c = random_cloud(np.random.default_rng(0), 7)
    for name, value in c.params().items():
        assert c.grads[name].shape == value.shape


# ---------------------------------------------------------------- prune

def _cloud_with_opacities(ops):
    n = len(ops)
    ops = np.asarray(ops, float)
    return GaussianCloud(np.arange(3 * n, dtype=float).reshape(n, 3), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.zeros((n, 3)), np.log(ops / (1 - ops)), np.zeros((n, 3)))


def test_prune_example_from_threshold_half():
    c = _cloud_with_opacities([0.9, 0.3, 0.7])
    remap = prune(c, 0.5)
    np.testing.assert_allclose(c.opacities, [0.9, 0.7])
    assert remap.source.tolist() == [0, 2]


def test_prune_zero_threshold_is_noop():
    c = _cloud_with_opacities([0.9, 0.3, 0.7])
    assert prune(c, 0.0).is_identity
    assert len(c) == 3


def test_prune_to_empty_is_flagged():
    c = _cloud_with_opacities([0.9, 0.3, 0.7])
    remap = prune(c, 1.0)
    assert len(c) == 0 and remap.empty


@given(st.lists(st.floats(0.01, 0.99), min_size=0, max_size=20), st.floats(0.0, 1.0))
def test_prune_idempotent_and_order_preserving(ops, thr):
    c = _cloud_with_opacities(ops)
    first = prune(c, thr)
    assert np.all(np.diff(first.source) > 0)
    snapshot = c.centers.copy()
    assert prune(c, thr).is_identity
    np.testing.assert_array_equal(c.centers, snapshot)


# ---------------------------------------------------------------- densify

def test_densify_empty_cloud_is_noop():
    c = GaussianCloud.empty()
    assert densify_split(c, 0.0).new_count == 0


def test_densify_below_threshold_is_identity():
    c = random_cloud(np.random.default_rng(1), 5)
    c.record_position_grads(np.full((5, 3), 1e-6))
    before = c.centers.copy()
    assert densify_split(c, 1.0).is_identity
    np.testing.assert_array_equal(c.centers, before)


def test_densify_infinite_threshold_is_noop():
    c = random_cloud(np.random.default_rng(2), 5)
    c.record_position_grads(np.full((5, 3), 1e9))
    assert densify_split(c, math.inf).is_identity


def test_densify_one_above_threshold_grows_by_one():
    c = random_cloud(np.random.default_rng(4), 4)
    g = np.zeros((4, 3))
    g[2] = [1.0, 0, 0]
    c.record_position_grads(g)
    parent_scale = c.log_scales[2].copy()
    remap = densify_split(c, 0.5, rng=0)
    assert len(c) == 5
    assert remap.source.tolist() == [0, 1, 3, 2, 2]
    assert remap.split_children.tolist() == [False, False, False, True, True]
    np.testing.assert_allclose(c.log_scales[3:], np.tile(parent_scale - math.log(SPLIT_SCALE_DIVISOR), (2, 1)))
    assert np.all(c.grad_accum == 0)


def test_densify_children_sampled_from_parent_distribution():
    c = random_cloud(np.random.default_rng(5), 1)
    mu, cov = c.centers[0].copy(), c.covariances()[0]
    c2 = GaussianCloud(np.repeat(c.centers, 4000, 0), np.repeat(c.rotations, 4000, 0),
                       np.repeat(c.log_scales, 4000, 0), np.repeat(c.opacity_logits, 4000),
                       np.repeat(c.colors, 4000, 0))
    c2.record_position_grads(np.ones((4000, 3)))
    densify_split(c2, 0.0, rng=7)
    np.testing.assert_allclose(c2.centers.mean(0), mu, atol=4 * np.sqrt(cov.diagonal().max() / 8000))
    np.testing.assert_allclose(np.cov(c2.centers.T), cov, atol=0.1 * cov.diagonal().max())


def _split_everything(cloud, seed):
    cloud.record_position_grads(np.ones((len(cloud), 3)))
    return densify_split(cloud, 0.0, rng=seed)


@given(st.integers(1, 12), st.integers(0, 2**31))
def test_densify_volume_ratio_is_the_exact_split_factor(n, seed):
    c = random_cloud(np.random.default_rng(seed), n)
    before = opacity_weighted_volume(c)
    _split_everything(c, seed)
    assert opacity_weighted_volume(c) / before == pytest.approx(2 / SPLIT_SCALE_DIVISOR**3, rel=1e-12)


@pytest.mark.xfail(strict=True, reason="two children at scale/1.6 keep 2/1.6^3 = 0.49 of the volume, "
                                       "just outside the stated factor-2 band")
def test_densify_volume_within_factor_two():
    c = random_cloud(np.random.default_rng(11), 6)
    before = opacity_weighted_volume(c)
    _split_everything(c, 11)
    ratio = opacity_weighted_volume(c) / before
    assert 0.5 <= ratio <= 2.0
