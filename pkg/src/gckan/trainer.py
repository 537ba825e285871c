"""Penalized loss, Adam updates and the training loop for one component model.

The objective for component ``i`` is

    L = L_p + L_s + L_r
    L_p = mean_t (x_ti - g_i(x_<t))^2
    L_s = lam   * sum_j ||W^0[:, cols(j)]||_F            (group lasso)
    L_r = gamma * sum_{l>=1} ||W_b^l||_F                  (ridge on deeper base weights)

With ``penalty_scope="base"`` the group ``W^0[:, cols(j)]`` holds only the
first-layer base weights.  With the default ``"edge"`` it also holds the
spline weights of those edges; otherwise the unpenalized spline path can
carry every input while the base weights shrink uniformly to zero.

Gradients of the two norm penalties use the smoothed norm
``sqrt(sum w^2 + eps)`` so the objective is differentiable at zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .spline_kan import (
    KanLayer,
    KanNetwork,
    LayerFeatures,
    SplineGrid,
    init_network,
    layer_features,
    network_backward,
    network_forward,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "GroupIndex",
    "AdamState",
    "TrainingError",
    "group_norms",
    "penalty_norms",
    "PENALTY_SCOPES",
    "compute_losses",
    "loss_and_grads",
    "adam_step",
    "train_component",
]


PENALTY_SCOPES = ("edge", "base")


class TrainingError(RuntimeError):
    """Raised when optimization produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.05
    gamma: float = 0.05
    learning_rate: float = 1e-3
    max_epochs: int = 2000
    batch_size: Union[int, str] = "full"
    early_stop_patience: int = 100
    seed: int = 0
    group_norm_epsilon: float = 1e-8
    penalty_scope: str = "edge"

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size != "full" and not (isinstance(self.batch_size, int) and self.batch_size > 0):
            raise ValueError(f"batch_size must be a positive int or 'full', got {self.batch_size!r}")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")
        if not self.group_norm_epsilon > 0:
            raise ValueError("group_norm_epsilon must be > 0")
        if self.penalty_scope not in PENALTY_SCOPES:
            raise ValueError(f"penalty_scope must be one of {PENALTY_SCOPES}, got {self.penalty_scope!r}")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class LossBreakdown:
    predict: float
    sparsity: float
    ridge: float

    @property
    def total(self) -> float:
        return self.predict + self.sparsity + self.ridge

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            self.predict + other.predict, self.sparsity + other.sparsity, self.ridge + other.ridge
        )

    def as_dict(self) -> dict:
        return {"predict": self.predict, "sparsity": self.sparsity, "ridge": self.ridge, "total": self.total}


@dataclass(frozen=True)
class GroupIndex:
    """Maps each first-layer input column to its (series, lag) pair.

    ``series[c]`` is the zero-based source series of column ``c`` and
    ``lags[c]`` its one-based lag.
    """

    series: np.ndarray
    lags: np.ndarray
    n_series: int

    def __post_init__(self):
        series = np.asarray(self.series, dtype=np.int64)
        lags = np.asarray(self.lags, dtype=np.int64)
        if series.shape != lags.shape or series.ndim != 1:
            raise ValueError("series and lags must be 1-D arrays of equal length")
        if self.n_series < 1:
            raise ValueError("n_series must be >= 1")
        if series.size and (series.min() < 0 or series.max() >= self.n_series):
            raise ValueError("series index out of range")
        if set(np.unique(series).tolist()) != set(range(self.n_series)):
            raise ValueError("every series must own at least one column")
        if lags.size and lags.min() < 1:
            raise ValueError("lags are one-based")
        pairs = set(zip(series.tolist(), lags.tolist()))
        if len(pairs) != series.size:
            raise ValueError("each (series, lag) pair must appear exactly once")
        object.__setattr__(self, "series", series)
        object.__setattr__(self, "lags", lags)
        object.__setattr__(
            self, "_columns", tuple(np.flatnonzero(series == j) for j in range(self.n_series))
        )

    @classmethod
    def lagged(cls, n_series: int, max_lag: int) -> "GroupIndex":
        """Layout where column ``(k-1)*p + j`` holds series ``j`` at lag ``k``."""
        cols = np.arange(n_series * max_lag)
        return cls(series=cols % n_series, lags=cols // n_series + 1, n_series=n_series)

    @property
    def n_columns(self) -> int:
        return self.series.size

    @property
    def max_lag(self) -> int:
        return int(self.lags.max())

    def columns(self, j: int) -> np.ndarray:
        return self._columns[j]


def _check_groups(first_layer: KanLayer, groups: GroupIndex) -> None:
    if groups.n_columns != first_layer.in_dim:
        raise ValueError(
            f"group index covers {groups.n_columns} columns but the first layer has {first_layer.in_dim} inputs"
        )


def group_norms(first_layer: KanLayer, groups: GroupIndex) -> np.ndarray:
    """Frobenius norm of the first-layer base weights belonging to each series."""
    _check_groups(first_layer, groups)
    sq = np.square(first_layer.base_weights).sum(axis=0)
    return np.sqrt(np.array([sq[groups.columns(j)].sum() for j in range(groups.n_series)]))


def _penalty_column_sq(first_layer: KanLayer, scope: str) -> np.ndarray:
    sq = np.square(first_layer.base_weights).sum(axis=0)
    if scope == "edge":
        sq = sq + np.square(first_layer.spline_weights).sum(axis=(0, 2))
    return sq


def penalty_norms(first_layer: KanLayer, groups: GroupIndex, scope: str = "edge") -> np.ndarray:
    """Per-series norms entering the group-lasso term under ``scope``."""
    _check_groups(first_layer, groups)
    col_sq = _penalty_column_sq(first_layer, scope)
    return np.sqrt(np.bincount(groups.series, weights=col_sq, minlength=groups.n_series))


def _check_batch(network: KanNetwork, inputs, targets) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("inputs must be a non-empty (N, d) matrix")
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} input rows but {y.shape[0]} targets")
    if network.layers[-1].out_dim != 1:
        raise ValueError("component models must have a scalar output")
    return x, y


def compute_losses(
    network: KanNetwork,
    inputs,
    targets,
    cfg: TrainConfig,
    groups: GroupIndex,
    *,
    first_features: LayerFeatures | None = None,
) -> LossBreakdown:
    """Exact (unsmoothed) loss terms of ``network`` on a batch."""
    x, y = _check_batch(network, inputs, targets)
    out, _ = network_forward(network, x if first_features is None else None,
                             first_features=first_features, for_backward=False)
    resid = out[:, 0] - y
    predict = float(np.mean(resid * resid))
    sparsity = cfg.lam * float(penalty_norms(network.layers[0], groups, cfg.penalty_scope).sum())
    ridge = cfg.gamma * float(sum(np.linalg.norm(layer.base_weights) for layer in network.layers[1:]))
    return LossBreakdown(predict, sparsity, ridge)


def loss_and_grads(
    network: KanNetwork,
    inputs,
    targets,
    cfg: TrainConfig,
    groups: GroupIndex,
    *,
    first_features: LayerFeatures | None = None,
) -> tuple[float, LossBreakdown, list[np.ndarray]]:
    """Smoothed objective, its exact-norm breakdown, and gradients.

    The returned scalar is the objective actually differentiated, with both
    norm penalties replaced by ``sqrt(||W||^2 + eps)``.  Gradients come in
    :meth:`KanNetwork.parameters` order.
    """
    eps = cfg.group_norm_epsilon
    if first_features is None:
        x, y = _check_batch(network, inputs, targets)
    else:
        y = np.asarray(targets, dtype=np.float64).reshape(-1)
        x = None
    _check_groups(network.layers[0], groups)
    out, caches = network_forward(network, x, first_features=first_features)
    resid = out[:, 0] - y
    n = resid.size
    predict = float(resid @ resid) / n
    grads, _ = network_backward(network, caches, (2.0 / n) * resid[:, None])

    first = network.layers[0]
    col_sq = _penalty_column_sq(first, cfg.penalty_scope)
    group_sq = np.bincount(groups.series, weights=col_sq, minlength=groups.n_series)
    smooth = np.sqrt(group_sq + eps)
    scale = cfg.lam / smooth[groups.series]
    grads[0] = grads[0] + first.base_weights * scale
    if cfg.penalty_scope == "edge":
        grads[1] = grads[1] + first.spline_weights * scale[None, :, None]
    sparsity_exact = cfg.lam * float(np.sqrt(group_sq).sum())
    objective = predict + cfg.lam * float(smooth.sum())

    ridge_exact = 0.0
    for idx in range(1, len(network.layers)):
        wb = network.layers[idx].base_weights
        sq = float(np.sum(wb * wb))
        smooth_l = np.sqrt(sq + eps)
        grads[2 * idx] = grads[2 * idx] + cfg.gamma * wb / smooth_l
        ridge_exact += np.sqrt(sq)
        objective += cfg.gamma * smooth_l
    breakdown = LossBreakdown(predict, sparsity_exact, cfg.gamma * ridge_exact)
    return objective, breakdown, grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, learning_rate: float):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Returns ``(params, state)`` for convenience.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have the same length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class TrainResult:
    network: KanNetwork
    losses: LossBreakdown
    epochs_run: int
    best_epoch: int
    history: list[float] = field(default_factory=list)


def train_component(
    inputs,
    targets,
    dims: Sequence[int],
    cfg: TrainConfig,
    groups: GroupIndex,
    *,
    grid: SplineGrid | None = None,
    base_fn: str = "silu",
    first_features: LayerFeatures | None = None,
    init: KanNetwork | None = None,
    return_details: bool = False,
):
    """Fit one component network by Adam on the penalized loss.

    Training runs for ``cfg.max_epochs`` epochs or until the total loss has
    not improved for ``cfg.early_stop_patience`` consecutive epochs; the
    best parameters seen are returned together with their full-data
    :class:`LossBreakdown`.  ``first_features`` may carry the first-layer
    activations of ``inputs`` when several components share a dataset.
    """
    x, y = np.asarray(inputs, dtype=np.float64), np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("need at least one training row")
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} input rows but {y.shape[0]} targets")
    dims = [int(d) for d in dims]
    if dims[0] != x.shape[1]:
        raise ValueError(f"dims[0]={dims[0]} does not match input width {x.shape[1]}")
    if dims[-1] != 1:
        raise ValueError("component models predict a single series; dims[-1] must be 1")
    if grid is None:
        grid = SplineGrid.uniform()

    if init is not None:
        net = init.copy()
        if net.dims != dims:
            raise ValueError(f"initial network dims {net.dims} != {dims}")
    else:
        net = init_network(
            dims, grid.grid_size, grid.order, cfg.seed, grid_range=(grid.lo, grid.hi), base_fn=base_fn
        )
    _check_groups(net.layers[0], groups)

    full_batch = cfg.batch_size == "full" or cfg.batch_size >= x.shape[0]
    if first_features is None:
        first_features = layer_features(x, net.layers[0].grid, net.layers[0].base_fn)
    elif first_features.inputs.shape != x.shape:
        raise ValueError("first_features were computed for a different input matrix")

    params = net.parameters()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed + 1)

    best_total = np.inf
    best_params = [p.copy() for p in params]
    best_epoch = 0
    stale = 0
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if full_batch:
            _, breakdown, grads = loss_and_grads(net, None, y, cfg, groups, first_features=first_features)
            # loss of the parameters before this epoch's update
            current = breakdown.total
            checked_params = [p.copy() for p in params] if current < best_total else None
            adam_step(params, grads, state, cfg.learning_rate)
            net.mark_updated()
        else:
            order = rng.permutation(x.shape[0])
            for start in range(0, x.shape[0], cfg.batch_size):
                rows = order[start : start + cfg.batch_size]
                sub = LayerFeatures(
                    first_features.inputs[rows], first_features.base[rows], first_features.basis[rows]
                )
                _, _, grads = loss_and_grads(net, None, y[rows], cfg, groups, first_features=sub)
                adam_step(params, grads, state, cfg.learning_rate)
                net.mark_updated()
            breakdown = compute_losses(net, x, y, cfg, groups, first_features=first_features)
            current = breakdown.total
            checked_params = [p.copy() for p in params] if current < best_total else None

        if not np.isfinite(current):
            raise TrainingError(f"non-finite loss ({current}) at epoch {epoch}")
        history.append(current)
        if checked_params is not None:
            best_total = current
            best_params = checked_params
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                log.debug("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    for p, best in zip(params, best_params):
        p[...] = best
    net.mark_updated()
    final = compute_losses(net, x, y, cfg, groups, first_features=first_features)
    if not np.isfinite(final.total):
        raise TrainingError(f"non-finite final loss after epoch {epoch}")
    if return_details:
        return TrainResult(net, final, epoch, best_epoch, history)
    return net, final
