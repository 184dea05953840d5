import json

import numpy as np
import pytest

import linsaddle as ls
from linsaddle.network import (
    best_rank_r_map,
    partial_prefix,
    partial_suffix,
    zeros_like,
)

from conftest import random_weights
from oracles import fd_gradient, naive_loss


def test_shape_properties():
    s = ls.NetworkShape((6, 5, 3, 4))
    assert s.H == 3 and s.d_x == 6 and s.d_y == 4 and s.r_max == 3
    assert s.layer_shape(1) == (5, 6)
    assert s.layer_shape(3) == (4, 3)
    assert s.n_params == 5 * 6 + 3 * 5 + 4 * 3


def test_shape_rejects_garbage():
    with pytest.raises(ls.InvalidShape):
        ls.NetworkShape((4, 3))  # depth < 2
    with pytest.raises(ls.InvalidShape):
        ls.NetworkShape((4, 0, 3))


def test_weights_validation(small_problem):
    _, _, shape = small_problem
    with pytest.raises(ls.InvalidShape):
        ls.Weights([np.zeros((2, 2))] * shape.H, shape)
    mats = [np.zeros(shape.layer_shape(h)) for h in range(1, shape.H + 1)]
    mats[0][0, 0] = np.inf
    with pytest.raises(ls.InvalidShape):
        ls.Weights(mats, shape)


def test_prefix_suffix_conventions(small_problem):
    _, _, shape = small_problem
    rng = np.random.default_rng(0)
    w = random_weights(shape, rng)
    assert np.array_equal(partial_prefix(w, 0), np.eye(shape.d_x))
    assert np.array_equal(partial_suffix(w, shape.H + 1), np.eye(shape.d_y))
    full = w.layer(3) @ w.layer(2) @ w.layer(1)
    assert np.allclose(ls.global_map(w), full)
    assert np.allclose(partial_prefix(w, 2), w.layer(2) @ w.layer(1))
    assert np.allclose(partial_suffix(w, 2), w.layer(3) @ w.layer(2))


def test_loss_matches_naive(small_problem):
    data, bundle, shape = small_problem
    rng = np.random.default_rng(1)
    w = random_weights(shape, rng, scale=0.5)
    assert ls.loss(w, bundle, data) == pytest.approx(
        naive_loss(list(w.layers), data.X, data.Y), rel=1e-12
    )


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(small_problem, seed):
    data, bundle, shape = small_problem
    rng = np.random.default_rng(seed)
    w = random_weights(shape, rng, scale=0.4)
    g = ls.gradient(w, bundle)
    fd = fd_gradient(list(w.layers), data.X, data.Y)
    for h in range(shape.H):
        scale = max(1.0, np.abs(fd[h]).max())
        assert np.allclose(g.layers[h], fd[h], atol=1e-5 * scale)


def test_gradient_zero_at_best_map(small_problem):
    # a one-hidden-layer factorization of the full-rank optimum is critical
    data, bundle, _ = small_problem
    shape = ls.NetworkShape((6, 4, 4))
    M = best_rank_r_map(bundle, 4)
    w = ls.Weights([M, np.eye(4)], shape)
    assert ls.gradient(w, bundle).frob_norm() < 1e-10


def test_best_rank_r_map_bounds(small_problem):
    _, bundle, _ = small_problem
    assert np.array_equal(best_rank_r_map(bundle, 0), np.zeros((4, 6)))
    with pytest.raises(ls.InvalidRank):
        best_rank_r_map(bundle, 5)


def test_weights_json_roundtrip(small_problem):
    _, _, shape = small_problem
    w = random_weights(shape, np.random.default_rng(2))
    back = ls.weights_from_json(ls.weights_to_json(w))
    assert back.shape.dims == shape.dims
    for h in range(1, shape.H + 1):
        assert np.array_equal(back.layer(h), w.layer(h))
    obj = json.loads(ls.weights_to_json(w))
    assert set(obj) == {"dims", "layers"}


def test_zeros_like_and_norms(small_problem):
    _, _, shape = small_problem
    z = zeros_like(shape)
    assert z.frob_norm() == 0.0
    w = random_weights(shape, np.random.default_rng(3))
    assert w.frob_norm() == pytest.approx(np.sqrt(w.sq_norm()))


def test_weights_are_immutable(small_problem):
    _, _, shape = small_problem
    w = random_weights(shape, np.random.default_rng(4))
    with pytest.raises(ValueError):
        w.layers[0][0, 0] = 5.0
