import numpy as np
import pytest

import oracles
from gckan.spline_kan import init_network
from gckan.trainer import (
    AdamState,
    GroupIndex,
    LossBreakdown,
    TrainConfig,
    TrainingError,
    adam_step,
    compute_losses,
    group_norms,
    loss_and_grads,
    train_component,
)


def small_problem(rng, p=3, K=2, n=40, hidden=4, seed=0):
    groups = GroupIndex.lagged(p, K)
    net = init_network([p * K, hidden, 1], seed=seed)
    x = rng.normal(size=(n, p * K))
    y = rng.normal(size=n)
    return net, x, y, groups


def test_lagged_layout_column_order():
    g = GroupIndex.lagged(3, 2)
    assert g.series.tolist() == [0, 1, 2, 0, 1, 2]
    assert g.lags.tolist() == [1, 1, 1, 2, 2, 2]
    assert g.columns(1).tolist() == [1, 4]
    assert g.max_lag == 2 and g.n_columns == 6


@pytest.mark.parametrize(
    "series, lags, n",
    [([0, 1], [1], 2), ([0, 0], [1, 1], 1), ([0, 2], [1, 1], 2), ([0, 1], [0, 1], 2), ([0], [1], 2)],
)
def test_group_index_validation(series, lags, n):
    with pytest.raises(ValueError):
        GroupIndex(np.array(series), np.array(lags), n)


@pytest.mark.parametrize("scope", ["edge", "base"])
def test_loss_terms_match_scalar_oracle(rng, scope):
    net, x, y, groups = small_problem(rng)
    cfg = TrainConfig(lam=0.3, gamma=0.7, penalty_scope=scope)
    losses = compute_losses(net, x, y, cfg, groups)
    pred = net.predict(x)[:, 0]
    assert losses.predict == pytest.approx(sum((a - b) ** 2 for a, b in zip(pred, y)) / len(y), rel=1e-12)
    wb0 = net.layers[0].base_weights.tolist()
    ws0 = net.layers[0].spline_weights.tolist()
    expected_s = 0.0
    for j in range(3):
        cols = groups.columns(j).tolist()
        sq = oracles.frobenius_columns(wb0, cols) ** 2
        if scope == "edge":
            sq += sum(oracles.frobenius_columns(row, cols) ** 2 for row in ws0_by_basis(ws0))
        expected_s += 0.3 * sq**0.5
    assert losses.sparsity == pytest.approx(expected_s, rel=1e-12)
    wb1 = net.layers[1].base_weights.tolist()
    expected_r = 0.7 * oracles.frobenius_columns(wb1, range(len(wb1[0])))
    assert losses.ridge == pytest.approx(expected_r, rel=1e-12)
    assert losses.total == pytest.approx(losses.predict + losses.sparsity + losses.ridge)


def ws0_by_basis(ws):
    # ws[o][c][k] -> list over k of (out x in) matrices
    return [[[ws[o][c][k] for c in range(len(ws[0]))] for o in range(len(ws))] for k in range(len(ws[0][0]))]


def test_zero_penalty_weights_give_zero_penalties(rng):
    net, x, y, groups = small_problem(rng)
    losses = compute_losses(net, x, y, TrainConfig(lam=0.0, gamma=0.0), groups)
    assert losses.sparsity == 0.0 and losses.ridge == 0.0


def test_group_norms_zero_for_zero_weights(rng):
    net, _, _, groups = small_problem(rng)
    net.layers[0].base_weights[:] = 0
    assert np.all(group_norms(net.layers[0], groups) == 0.0)


def test_group_norms_reject_mismatched_layout(rng):
    net, _, _, _ = small_problem(rng)
    with pytest.raises(ValueError):
        group_norms(net.layers[0], GroupIndex.lagged(3, 3))


def test_loss_breakdown_addition():
    a = LossBreakdown(1.0, 2.0, 3.0) + LossBreakdown(0.5, 0.25, 0.125)
    assert a.as_dict() == {"predict": 1.5, "sparsity": 2.25, "ridge": 3.125, "total": 6.875}


@pytest.mark.parametrize("scope", ["edge", "base"])
def test_gradients_match_central_differences_of_smoothed_objective(rng, scope):
    net, x, y, groups = small_problem(rng, n=15)
    cfg = TrainConfig(lam=0.2, gamma=0.1, penalty_scope=scope)
    _, _, grads = loss_and_grads(net, x, y, cfg, groups)

    def objective():
        net.mark_updated()
        val, _, _ = loss_and_grads(net, x, y, cfg, groups)
        return val

    h = 1e-6
    for param, grad in zip(net.parameters(), grads):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in rng.choice(flat.size, size=min(flat.size, 12), replace=False):
            keep = flat[idx]
            flat[idx] = keep + h
            up = objective()
            flat[idx] = keep - h
            down = objective()
            flat[idx] = keep
            numeric = (up - down) / (2 * h)
            assert abs(numeric - gflat[idx]) <= 1e-6 + 1e-4 * abs(numeric)
    net.mark_updated()


def test_gradient_relative_error_over_100_random_trials():
    # directional derivative along a random direction, one fresh problem per trial
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        p, K = int(rng.integers(2, 4)), int(rng.integers(1, 3))
        net, x, y, groups = small_problem(rng, p=p, K=K, n=12, hidden=int(rng.integers(2, 5)), seed=trial)
        cfg = TrainConfig(lam=float(rng.uniform(0, 0.3)), gamma=float(rng.uniform(0, 0.3)))
        _, _, grads = loss_and_grads(net, x, y, cfg, groups)
        params = net.parameters()
        dirs = [rng.normal(size=param.shape) for param in params]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))

        def shifted(t):
            for param, d in zip(params, dirs):
                param += t * d
            net.mark_updated()
            val, _, _ = loss_and_grads(net, x, y, cfg, groups)
            for param, d in zip(params, dirs):
                param -= t * d
            return val

        h = 1e-5
        numeric = (shifted(h) - shifted(-h)) / (2 * h)
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic)))
    net.mark_updated()
    assert worst < 1e-4, worst


def test_smoothed_objective_is_close_to_exact_total(rng):
    net, x, y, groups = small_problem(rng)
    cfg = TrainConfig(lam=0.2, gamma=0.1)
    obj, breakdown, _ = loss_and_grads(net, x, y, cfg, groups)
    assert obj == pytest.approx(breakdown.total, abs=1e-6)
    assert breakdown == compute_losses(net, x, y, cfg, groups) or breakdown.total == pytest.approx(
        compute_losses(net, x, y, cfg, groups).total, rel=1e-12
    )


def test_adam_first_step_oracle():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 0.0])
    state = AdamState.zeros_like([p])
    adam_step([p], [g], state, 0.01)
    # after one step m_hat = g and v_hat = g^2
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=0, atol=1e-15)
    assert state.step == 1


def test_adam_two_step_oracle():
    p = np.array([0.7])
    state = AdamState.zeros_like([p])
    grads = [np.array([1.5]), np.array([-0.5])]
    m = v = 0.0
    ref = 0.7
    for t, g in enumerate(grads, start=1):
        adam_step([p], [g], state, 0.1)
        m = 0.9 * m + 0.1 * g[0]
        v = 0.999 * v + 0.001 * g[0] ** 2
        ref -= 0.1 * (m / (1 - 0.9**t)) / ((v / (1 - 0.999**t)) ** 0.5 + 1e-8)
    assert p[0] == pytest.approx(ref, rel=1e-14)


def test_adam_rejects_shape_mismatch():
    p = np.zeros(3)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(2)], AdamState.zeros_like([p]), 0.1)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"lam": -1.0},
        {"gamma": -0.1},
        {"learning_rate": 0.0},
        {"max_epochs": 0},
        {"batch_size": 0},
        {"batch_size": "half"},
        {"early_stop_patience": -1},
        {"penalty_scope": "all"},
    ],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_training_reduces_loss_and_is_deterministic(rng):
    _, x, _, groups = small_problem(rng, n=60)
    y = np.tanh(x[:, 0]) + 0.5 * x[:, 4]
    cfg = TrainConfig(max_epochs=150, learning_rate=1e-2, seed=4)
    init = init_network([6, 4, 1], seed=4)
    start = compute_losses(init, x, y, cfg, groups).total
    net_a, loss_a = train_component(x, y, [6, 4, 1], cfg, groups)
    net_b, loss_b = train_component(x, y, [6, 4, 1], cfg, groups)
    assert loss_a.total < 0.5 * start
    assert loss_a == loss_b
    for pa, pb in zip(net_a.parameters(), net_b.parameters()):
        assert np.array_equal(pa, pb)


def test_minibatch_training_is_deterministic(rng):
    _, x, y, groups = small_problem(rng, n=50)
    cfg = TrainConfig(max_epochs=20, learning_rate=1e-2, batch_size=16, seed=2)
    _, a = train_component(x, y, [6, 4, 1], cfg, groups)
    _, b = train_component(x, y, [6, 4, 1], cfg, groups)
    assert a == b


def test_returned_loss_is_best_seen(rng):
    _, x, y, groups = small_problem(rng, n=50)
    cfg = TrainConfig(max_epochs=60, learning_rate=5e-2, early_stop_patience=5)
    res = train_component(x, y, [6, 4, 1], cfg, groups, return_details=True)
    assert res.losses.total == pytest.approx(min(res.history), rel=1e-12)
    assert res.history[res.best_epoch - 1] == min(res.history)
    assert res.epochs_run <= res.best_epoch + cfg.early_stop_patience


def test_edge_penalty_gradient_reaches_spline_weights(rng):
    net, x, y, groups = small_problem(rng)
    base = loss_and_grads(net, x, y, TrainConfig(lam=0.0), groups)[2]
    edge = loss_and_grads(net, x, y, TrainConfig(lam=0.5, penalty_scope="edge"), groups)[2]
    only_base = loss_and_grads(net, x, y, TrainConfig(lam=0.5, penalty_scope="base"), groups)[2]
    assert not np.allclose(edge[1], base[1])
    assert np.array_equal(only_base[1], base[1])


def test_group_lasso_shrinks_irrelevant_series(rng):
    groups = GroupIndex.lagged(4, 1)
    x = rng.normal(size=(200, 4))
    y = np.sin(x[:, 2]) + 0.05 * rng.normal(size=200)
    cfg = TrainConfig(lam=0.05, gamma=0.01, learning_rate=1e-2, max_epochs=400, seed=1)
    net, _ = train_component(x, y, [4, 8, 1], cfg, groups)
    norms = group_norms(net.layers[0], groups)
    assert np.argmax(norms) == 2
    assert np.all(np.delete(norms, 2) < 0.25 * norms[2])


def test_non_finite_loss_raises_with_epoch(rng):
    _, x, _, groups = small_problem(rng, n=10)
    y = np.full(10, 1e200)
    with pytest.raises(TrainingError, match="epoch 1"):
        train_component(x, y, [6, 4, 1], TrainConfig(max_epochs=5), groups)


def test_training_rejects_bad_shapes(rng):
    _, x, y, groups = small_problem(rng, n=10)
    with pytest.raises(ValueError):
        train_component(x, y[:-1], [6, 4, 1], TrainConfig(max_epochs=1), groups)
    with pytest.raises(ValueError):
        train_component(x, y, [5, 4, 1], TrainConfig(max_epochs=1), groups)
    with pytest.raises(ValueError):
        train_component(x, y, [6, 4, 2], TrainConfig(max_epochs=1), groups)
