from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gckan.spline_kan import (
    CacheError,
    KanLayer,
    KanNetwork,
    SplineGrid,
    bspline_basis,
    bspline_basis_with_derivative,
    init_network,
    layer_backward,
    layer_forward,
    network_backward,
    network_forward,
)


def random_layer(rng, in_dim=3, out_dim=2, grid_size=5, order=3, scale=0.5, base_fn="silu"):
    grid = SplineGrid.uniform(grid_size, order, -1.0, 1.0)
    wb = rng.normal(0, scale, size=(out_dim, in_dim))
    ws = rng.normal(0, scale, size=(out_dim, in_dim, grid.num_basis))
    return KanLayer(wb, ws, grid, base_fn)


# ---------------------------------------------------------------------------
# grid


def test_grid_knot_count_and_basis_count():
    grid = SplineGrid.uniform(grid_size=5, order=3, lo=-3, hi=3)
    assert grid.knots.size == 5 + 2 * 3 + 1
    assert grid.num_basis == 8
    assert grid.grid_size == 5
    assert grid.knots[3] == -3.0 and grid.knots[8] == 3.0


@pytest.mark.parametrize(
    "knots, order, lo, hi",
    [
        ([0, 1, 1, 2, 3, 4], 1, 1, 3),  # repeated knot
        ([0, 2, 1, 3, 4, 5], 1, 1, 4),  # decreasing
        ([0, 1, 2, 3, 4, 5], 1, 3, 3),  # lo == hi
        ([0, 1, 2, 3], 2, 1, 2),  # too few knots
    ],
)
def test_invalid_grid_rejected_at_construction(knots, order, lo, hi):
    with pytest.raises(ValueError):
        SplineGrid(np.array(knots, dtype=float), order, lo, hi)


# ---------------------------------------------------------------------------
# basis


def test_order_zero_is_an_indicator():
    grid = SplineGrid(np.arange(0.0, 6.0), 0, 0.0, 5.0)
    vals = bspline_basis(0.5, grid)
    assert vals.tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]


def test_partition_of_unity_order_three(rng):
    grid = SplineGrid.uniform(5, 3, -3.0, 3.0)
    xs = rng.uniform(-3.0, 3.0, size=1000)
    sums = bspline_basis(xs, grid).sum(axis=-1)
    assert np.max(np.abs(sums - 1.0)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(
    x=st.floats(-3.0, 3.0, allow_nan=False),
    grid_size=st.integers(1, 12),
    order=st.integers(1, 5),
)
def test_partition_of_unity_property(x, grid_size, order):
    grid = SplineGrid.uniform(grid_size, order, -3.0, 3.0)
    assert abs(bspline_basis(x, grid).sum() - 1.0) < 1e-10


def test_matches_exact_rational_recursion():
    # knots and x are exact rationals, so the oracle carries no rounding at all
    grid = SplineGrid.uniform(grid_size=5, order=3, lo=-1.0, hi=1.0)
    h = Fraction(2, 5)
    knots = [Fraction(-1) + h * m for m in range(-3, 9)]
    assert [float(k) for k in knots] == pytest.approx(grid.knots.tolist(), abs=1e-15)
    exact = oracles.basis_vector(Fraction(3, 10), knots, 3)
    got = bspline_basis(0.3, grid)
    np.testing.assert_allclose(got, [float(v) for v in exact], rtol=0, atol=1e-15)
    assert sum(exact) == 1


@pytest.mark.parametrize("order", [0, 1, 2, 3, 4])
@pytest.mark.parametrize("uniform", [True, False])
def test_matches_float_recursion_everywhere(rng, order, uniform):
    grid = SplineGrid.uniform(6, order, -2.0, 2.0)
    if not uniform:
        knots = grid.knots.copy()
        knots[order + 2] += 0.17
        knots[order + 4] -= 0.09
        grid = SplineGrid(knots, order, -2.0, 2.0)
    xs = np.concatenate([rng.uniform(-5.0, 5.0, 400), grid.knots])
    expected = np.array([oracles.basis_vector(x, grid.knots.tolist(), order) for x in xs])
    np.testing.assert_allclose(bspline_basis(xs, grid), expected, rtol=0, atol=1e-14)


def test_local_support(rng):
    grid = SplineGrid.uniform(7, 3, -3.0, 3.0)
    t = grid.knots
    xs = rng.uniform(-6.0, 6.0, size=2000)
    vals = bspline_basis(xs, grid)
    for i in range(grid.num_basis):
        outside = (xs < t[i]) | (xs >= t[i + 4])
        assert np.all(vals[outside, i] == 0.0)


def test_out_of_range_uses_extended_knots_without_clamping():
    grid = SplineGrid.uniform(5, 3, -1.0, 1.0)
    inside_ext = bspline_basis(-1.2, grid)
    assert 0.0 < inside_ext.sum() < 1.0
    assert np.all(bspline_basis(50.0, grid) == 0.0)


def test_basis_accepts_arbitrary_shapes(rng):
    grid = SplineGrid.uniform()
    x = rng.normal(size=(4, 3, 2))
    assert bspline_basis(x, grid).shape == (4, 3, 2, grid.num_basis)


def test_basis_rejects_non_finite_input():
    with pytest.raises(ValueError):
        bspline_basis(np.array([0.0, np.nan]), SplineGrid.uniform())


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_basis_derivative_matches_central_differences(rng, order):
    grid = SplineGrid.uniform(5, order, -1.0, 1.0)
    xs = rng.uniform(-1.5, 1.5, size=300)
    # stay clear of knots where lower-order splines have kinks
    gap = np.min(np.abs(xs[:, None] - grid.knots[None, :]), axis=1)
    xs = xs[gap > 1e-4]
    h = 1e-6
    fd = (bspline_basis(xs + h, grid) - bspline_basis(xs - h, grid)) / (2 * h)
    _, deriv = bspline_basis_with_derivative(xs, grid)
    np.testing.assert_allclose(deriv, fd, atol=1e-7)


# ---------------------------------------------------------------------------
# layer forward


def test_zero_weights_give_zero_output(rng):
    layer = random_layer(rng)
    layer.base_weights[:] = 0
    layer.spline_weights[:] = 0
    out, _ = layer_forward(layer, rng.normal(size=(7, 3)))
    assert np.all(out == 0.0)


def test_identity_base_without_splines_is_linear(rng):
    layer = random_layer(rng, in_dim=4, out_dim=3, base_fn="identity")
    layer.spline_weights[:] = 0
    x = rng.normal(size=(11, 4))
    out, _ = layer_forward(layer, x)
    np.testing.assert_allclose(out, x @ layer.base_weights.T, rtol=0, atol=1e-14)


def test_forward_matches_scalar_loop_oracle(rng):
    layer = random_layer(rng, in_dim=3, out_dim=2, grid_size=5, order=3)
    x = rng.uniform(-1.3, 1.3, size=(6, 3))
    expected = oracles.layer_output(
        x.tolist(), layer.base_weights.tolist(), layer.spline_weights.tolist(), layer.grid.knots.tolist(), 3
    )
    out, _ = layer_forward(layer, x)
    np.testing.assert_allclose(out, expected, rtol=1e-13, atol=1e-13)


def test_forward_dimension_mismatch_names_layer(rng):
    net = init_network([4, 3, 1], seed=0)
    with pytest.raises(ValueError, match="layer 0"):
        network_forward(net, rng.normal(size=(2, 5)))
    with pytest.raises(ValueError, match="layer 1"):
        layer_forward(net.layers[1], rng.normal(size=(2, 4)), layer_index=1)


def test_forward_is_bit_deterministic(rng):
    net = init_network([5, 4, 1], seed=3)
    x = rng.normal(size=(20, 5))
    a, _ = network_forward(net, x)
    b, _ = network_forward(net, x.copy())
    assert np.array_equal(a, b)


def test_linear_degenerate_network_is_composition_of_matrices(rng):
    net = init_network([4, 6, 3, 1], seed=1, base_fn="identity")
    for layer in net.layers:
        layer.spline_weights[:] = 0
    x = rng.normal(size=(9, 4))
    expected = x
    for layer in net.layers:
        expected = expected @ layer.base_weights.T
    np.testing.assert_allclose(net.predict(x), expected, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# layer backward


def test_zero_upstream_gradient_gives_zero_gradients(rng):
    layer = random_layer(rng)
    x = rng.normal(size=(5, 3))
    out, cache = layer_forward(layer, x)
    gwb, gws, gx = layer_backward(layer, cache, np.zeros_like(out))
    assert not gwb.any() and not gws.any() and not gx.any()


def test_single_edge_spline_gradient_is_basis_value():
    # degree-0 splines are constant on each cell: output is linear in the coefficients
    grid = SplineGrid(np.arange(-3.0, 4.0), 0, -3.0, 3.0)
    layer = KanLayer(np.zeros((1, 1)), np.zeros((1, 1, grid.num_basis)), grid)
    x = np.array([[0.25]])
    out, cache = layer_forward(layer, x)
    g = np.array([[2.5]])
    _, gws, _ = layer_backward(layer, cache, g)
    basis = bspline_basis(0.25, grid)
    assert np.array_equal(gws[0, 0], 2.5 * basis)


def _fd_check(analytic, numeric, rel=1e-4, floor=1e-8):
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (err <= floor) | (err <= rel * scale)
    return ok


def test_layer_gradients_match_central_differences(rng):
    layer = random_layer(rng, in_dim=3, out_dim=2)
    x = rng.uniform(-1.2, 1.2, size=(4, 3))
    g = rng.normal(size=(4, 2))
    out, cache = layer_forward(layer, x)
    gwb, gws, gx = layer_backward(layer, cache, g)

    def objective():
        o, _ = layer_forward(layer, x)
        return float(np.sum(o * g))

    h = 1e-5
    for arr, analytic in ((layer.base_weights, gwb), (layer.spline_weights, gws), (x, gx)):
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + h
            up = objective()
            arr[idx] = keep - h
            down = objective()
            arr[idx] = keep
            numeric[idx] = (up - down) / (2 * h)
        assert _fd_check(analytic, numeric).all()


def test_stale_cache_is_rejected(rng):
    net = init_network([3, 2, 1], seed=0)
    out, caches = network_forward(net, rng.normal(size=(4, 3)))
    net.mark_updated()
    with pytest.raises(CacheError):
        network_backward(net, caches, np.ones_like(out))
    other = init_network([3, 2, 1], seed=0)
    out, caches = network_forward(net, rng.normal(size=(4, 3)))
    with pytest.raises(CacheError):
        layer_backward(other.layers[0], caches[0], np.ones((4, 2)))


def test_backward_rejects_mismatched_grad_shape(rng):
    layer = random_layer(rng)
    _, cache = layer_forward(layer, rng.normal(size=(5, 3)))
    with pytest.raises(ValueError):
        layer_backward(layer, cache, np.ones((4, 2)))


# ---------------------------------------------------------------------------
# init


def test_init_is_deterministic_per_seed():
    a = init_network([4, 8, 1], seed=11)
    b = init_network([4, 8, 1], seed=11)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa, pb)


def test_init_changes_with_seed():
    a = init_network([4, 8, 1], seed=11)
    b = init_network([4, 8, 1], seed=12)
    assert any(not np.array_equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))


def test_init_shapes():
    net = init_network([4, 8, 1], grid_size=5, order=3, seed=0)
    assert net.layers[0].base_weights.shape == (8, 4)
    assert net.layers[1].base_weights.shape == (1, 8)
    assert net.layers[0].spline_weights.shape == (8, 4, 8)
    assert net.layers[1].spline_weights.shape == (1, 8, 8)
    assert net.dims == [4, 8, 1]


def test_init_scales(rng):
    net = init_network([64, 128, 1], seed=0)
    wb = net.layers[0].base_weights
    assert np.abs(wb).max() <= 1 / 8
    ws = net.layers[0].spline_weights
    assert ws.std() == pytest.approx(0.1 / 8, rel=0.05)


@pytest.mark.parametrize("dims", [[4], [4, 0, 1], [-1, 2]])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        init_network(dims, seed=0)


def test_network_rejects_mismatched_layers(rng):
    a = random_layer(rng, in_dim=3, out_dim=2)
    b = random_layer(rng, in_dim=4, out_dim=1)
    with pytest.raises(ValueError, match="layer 1"):
        KanNetwork([a, b])
