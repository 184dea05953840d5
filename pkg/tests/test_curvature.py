import numpy as np
import pytest

import linsaddle as ls
from linsaddle.curvature import (
    MAX_DENSE_PARAMS,
    MAX_TAYLOR_DEPTH,
    _choose_beta,
)
from linsaddle.critical_points import transform_weights

from conftest import random_certified_spec, random_direction, random_weights
from oracles import line_loss, polarization_hessian, polyfit_c2, second_difference_c2


# ---------------------------------------------------------------------------
# Exact line expansion
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(4))
def test_taylor_matches_line_loss(small_problem, seed):
    data, b, shape = small_problem
    rng = np.random.default_rng(seed)
    w = random_weights(shape, rng, scale=0.6)
    v = random_direction(shape, rng)
    tc = ls.taylor_coeffs(w, v, data)
    assert len(tc.coeffs) == 2 * shape.H + 1
    for t in [-1.3, -0.2, 0.0, 0.05, 0.7, 2.0]:
        ref = line_loss(list(w.layers), list(v.layers), data.X, data.Y, t)
        assert tc.value(t) == pytest.approx(ref, rel=1e-10, abs=1e-10)


def test_taylor_coefficients_match_interpolation(small_problem):
    data, b, shape = small_problem
    rng = np.random.default_rng(5)
    w = random_weights(shape, rng, scale=0.5)
    v = random_direction(shape, rng)
    tc = ls.taylor_coeffs(w, v, data)
    ref = polyfit_c2(list(w.layers), list(v.layers), data.X, data.Y, 2 * shape.H)
    scale = np.abs(ref).max()
    assert np.allclose(tc.coeffs, ref, atol=1e-8 * scale)


def test_taylor_low_order_terms(small_problem):
    # c0 is the loss, c1 is the directional derivative <grad, V>
    data, b, shape = small_problem
    rng = np.random.default_rng(6)
    w = random_weights(shape, rng, scale=0.5)
    v = random_direction(shape, rng)
    tc = ls.taylor_coeffs(w, v, data)
    assert tc.coeffs[0] == pytest.approx(ls.loss(w, b, data), rel=1e-12)
    g = ls.gradient(w, b)
    inner = sum(float(np.sum(G * V)) for G, V in zip(g.layers, v.layers))
    assert tc.coeffs[1] == pytest.approx(inner, rel=1e-9)


def test_taylor_depth_guard():
    dims = (2,) * (MAX_TAYLOR_DEPTH + 2)
    shape = ls.NetworkShape(dims)
    data = ls.generate_gaussian_data(2, 2, 10, seed=0)
    rng = np.random.default_rng(0)
    w = random_weights(shape, rng)
    with pytest.raises(ls.TooDeep):
        ls.taylor_coeffs(w, random_direction(shape, rng), data)


def test_taylor_shape_mismatch(small_problem):
    data, _, shape = small_problem
    rng = np.random.default_rng(1)
    w = random_weights(shape, rng)
    other = ls.NetworkShape((6, 3, 3, 4))
    with pytest.raises(ls.InvalidShape):
        ls.taylor_coeffs(w, random_direction(other, rng), data)


# ---------------------------------------------------------------------------
# Quadratic form and Hessian
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(4))
def test_c2_against_oracles(deep_problem, seed):
    data, b, shape = deep_problem
    rng = np.random.default_rng(10 + seed)
    w = random_weights(shape, rng, scale=0.5)
    v = random_direction(shape, rng)
    c2 = ls.c2_value(w, v, data)
    assert c2 == pytest.approx(ls.taylor_coeffs(w, v, data).c2, rel=1e-10)
    sd = second_difference_c2(list(w.layers), list(v.layers), data.X, data.Y)
    assert c2 == pytest.approx(sd, rel=1e-4, abs=1e-4)


def test_hessian_matches_polarization(shallow_problem):
    data, b, shape = shallow_problem
    rng = np.random.default_rng(20)
    w = random_weights(shape, rng, scale=0.5)
    H = ls.hessian_dense(w, data)
    assert np.allclose(H, H.T, atol=1e-10)
    shapes = [shape.layer_shape(h) for h in range(1, shape.H + 1)]

    def c2_fn(mats):
        return ls.c2_value(w, ls.Direction(mats, shape), data)

    ref = polarization_hessian(c2_fn, shapes)
    assert np.allclose(H, ref, atol=1e-8 * (1 + np.abs(ref).max()))


def test_hessian_quadratic_form(deep_problem):
    data, b, shape = deep_problem
    rng = np.random.default_rng(21)
    w = random_weights(shape, rng, scale=0.5)
    H = ls.hessian_dense(w, data)
    for _ in range(5):
        v = random_direction(shape, rng)
        flat = np.concatenate([M.ravel() for M in v.layers])
        quad = float(flat @ H @ flat)
        assert quad == pytest.approx(2.0 * ls.c2_value(w, v, data), rel=1e-10)


def test_hessian_min_eig_probe_agrees(deep_problem):
    data, b, shape = deep_problem
    rng = np.random.default_rng(22)
    spec = random_certified_spec(shape, b.d_y, rng, support=(1, 3))
    w = ls.build_critical_point(spec, b, shape)
    dense = ls.hessian_min_eig(w, data, mode="dense")
    probe = ls.hessian_min_eig(w, data, mode="probe", tol=1e-9)
    assert probe == pytest.approx(dense, rel=1e-5, abs=1e-6)
    with pytest.raises(ValueError):
        ls.hessian_min_eig(w, data, mode="exactly")


def test_hessian_size_guard():
    dims = (40, 40, 40)
    assert ls.NetworkShape(dims).n_params > MAX_DENSE_PARAMS
    data = ls.generate_gaussian_data(40, 40, 50, seed=3)
    w = random_weights(ls.NetworkShape(dims), np.random.default_rng(0))
    with pytest.raises(ls.TooLarge):
        ls.hessian_dense(w, data)


# ---------------------------------------------------------------------------
# Witness directions
# ---------------------------------------------------------------------------


def test_eigenswap_witness_exact_polynomial(small_problem):
    data, b, shape = small_problem
    rng = np.random.default_rng(30)
    spec = random_certified_spec(shape, b.d_y, rng, support=(1, 3))
    w = ls.build_critical_point(spec, b, shape)
    wit = ls.witness_eigenswap(w, b, (1, 3))
    # swap index 2 in, index 3 out
    assert wit.diagnostics["swap_in"] == 2 and wit.diagnostics["swap_out"] == 3
    assert wit.c2_predicted == pytest.approx(b.lambdas[2] - b.lambdas[1], rel=1e-12)
    tc = ls.taylor_coeffs(w, wit.direction, data)
    # the line is exactly L + (lambda_j - lambda_i) t^2 + lambda_i t^4
    assert tc.coeffs[2] == pytest.approx(wit.c2_predicted, rel=1e-8)
    assert tc.coeffs[4] == pytest.approx(b.lambdas[1], rel=1e-8)
    others = np.delete(tc.coeffs, [0, 2, 4])
    assert np.abs(others).max() < 1e-8 * (1 + np.abs(tc.coeffs).max())


def test_eigenswap_not_applicable_on_leading_support(small_problem):
    _, b, shape = small_problem
    rng = np.random.default_rng(31)
    spec = random_certified_spec(shape, b.d_y, rng, support=(1, 2))
    w = ls.build_critical_point(spec, b, shape)
    with pytest.raises(ls.NotApplicable):
        ls.witness_eigenswap(w, b, (1, 2))


def test_untightened_witnesses_match_measured_c2(deep_problem):
    data, b, shape = deep_problem
    rng = np.random.default_rng(32)
    seen = set()
    for seed in range(15):
        spec = random_certified_spec(
            shape, b.d_y, rng, support=(1, int(rng.integers(2, 3)))
        )
        w = ls.build_critical_point(spec, b, shape)
        for p in ls.all_pivots(w, b, len(spec.support)):
            if p.tightened:
                continue
            try:
                wit = ls.witness_untightened(w, b, data, spec.support, (p.i, p.j))
            except ls.NotApplicable:
                continue
            seen.add(wit.case)
            meas = ls.c2_value(w, wit.direction, data)
            assert meas == pytest.approx(wit.c2_predicted, rel=1e-6, abs=1e-10)
            assert meas < 0
    assert len(seen) >= 2  # several distinct cases get exercised


def test_choose_beta_minimizes():
    beta, val = _choose_beta(2.0, 3.0)
    assert beta == pytest.approx(-0.75) and val == pytest.approx(-1.125)
    beta, val = _choose_beta(0.0, 3.0)
    assert beta == -3.0 and val == -9.0


# ---------------------------------------------------------------------------
# Tightened points: structure and the sum-of-squares certificate
# ---------------------------------------------------------------------------


def test_tightened_structure_indices(deep_problem):
    _, b, shape = deep_problem
    w = ls.build_example_family(2, "tightened", b, shape)
    st = ls.tightened_structure(w, b)
    assert st.p == shape.H and st.q == 1
    assert st.residual < 1e-10


def test_tightened_structure_rejects_untightened(deep_problem):
    _, b, shape = deep_problem
    w = ls.build_example_family(2, "non_tightened", b, shape)
    with pytest.raises(ls.NotTightened):
        ls.tightened_structure(w, b)


@pytest.mark.parametrize("seed", range(5))
def test_ft_st_identity_and_nonnegativity(deep_problem, seed):
    data, b, shape = deep_problem
    w = ls.build_example_family(1 + seed % 2, "tightened", b, shape)
    rng = np.random.default_rng(40 + seed)
    scale = (1.0 + w.sq_norm()) * float(np.sum(data.X * data.X))
    for _ in range(20):
        v = random_direction(shape, rng)
        dec = ls.ft_st_decomposition(w, v, b, data)
        meas = ls.c2_value(w, v, data)
        assert dec.c2 == pytest.approx(meas, rel=1e-8, abs=1e-8 * scale)
        assert dec.c2 >= -1e-12 * scale
        assert dec.a1 >= -1e-12 * scale


def test_ft_st_requires_canonical_position(deep_problem):
    data, b, shape = deep_problem
    w = ls.build_example_family(2, "tightened", b, shape)
    rng = np.random.default_rng(41)
    d_list = [
        np.eye(shape.dims[h]) + 0.3 * rng.standard_normal((shape.dims[h],) * 2)
        for h in range(1, shape.H)
    ]
    wt = transform_weights(w, d_list)
    v = random_direction(shape, rng)
    with pytest.raises(ls.NeedsCanonicalization):
        ls.ft_st_decomposition(wt, v, b, data)


def test_ft_st_rejects_full_rank(deep_problem):
    data, b, shape = deep_problem
    rng = np.random.default_rng(42)
    r = shape.r_max
    from linsaddle.critical_points import CriticalPointSpec, z_block_shape

    z = tuple(np.zeros(z_block_shape(shape, r, h)) for h in range(1, shape.H + 1))
    w = ls.build_critical_point(
        CriticalPointSpec(support=tuple(range(1, r + 1)), z_blocks=z), b, shape
    )
    with pytest.raises(ls.NotApplicable):
        ls.ft_st_decomposition(w, random_direction(shape, rng), b, data)
