"""Component-wise KAN Granger causality.

One network per target series ``i`` predicts ``x_t[i]`` from the ``K``
previous observations of every series.  After training, the Frobenius norm
of the first-layer base weights attached to series ``j`` scores the
influence ``j -> i``; these norms fill row ``i`` of the GC matrix.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .spline_kan import KanNetwork, SplineGrid, layer_features
from .trainer import (
    GroupIndex,
    LossBreakdown,
    TrainConfig,
    TrainingError,
    compute_losses,
    group_norms,
    train_component,
)

log = logging.getLogger(__name__)

__all__ = [
    "TimeSeriesPanel",
    "WindowedDataset",
    "ModelConfig",
    "GcResult",
    "ComponentError",
    "build_windowed",
    "standardize",
    "component_seed",
    "fit_gckan",
    "extract_gc_matrix",
    "lag_profile",
    "selected_lags",
    "select_penalties",
]


class ComponentError(RuntimeError):
    """A component model failed to train; ``component`` holds its index."""

    def __init__(self, component: int, cause: Exception):
        super().__init__(f"component {component} failed: {cause}")
        self.component = component


@dataclass(frozen=True)
class TimeSeriesPanel:
    """A ``(T, p)`` multivariate series; one replicate of a dataset."""

    values: np.ndarray
    replicate_id: int | None = None
    series_names: tuple[str, ...] | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"panel values must be 2-D (T, p), got shape {values.shape}")
        if values.shape[0] < 2:
            raise ValueError(f"need T >= 2 time points, got {values.shape[0]}")
        if values.shape[1] < 2:
            raise ValueError(f"need p >= 2 series, got {values.shape[1]}")
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            t, j = bad[0]
            raise ValueError(f"non-finite value at row {t}, column {j}")
        if self.series_names is not None:
            names = tuple(str(n) for n in self.series_names)
            if len(names) != values.shape[1]:
                raise ValueError(f"{len(names)} series names for {values.shape[1]} series")
            object.__setattr__(self, "series_names", names)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def n_series(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "TimeSeriesPanel":
        return replace(self, values=values)


PanelLike = Union[TimeSeriesPanel, Sequence[TimeSeriesPanel]]


def _as_panels(panel: PanelLike) -> list[TimeSeriesPanel]:
    panels = [panel] if isinstance(panel, TimeSeriesPanel) else list(panel)
    if not panels:
        raise ValueError("no panels given")
    p = panels[0].n_series
    for idx, pan in enumerate(panels):
        if not isinstance(pan, TimeSeriesPanel):
            raise TypeError(f"replicate {idx} is not a TimeSeriesPanel")
        if pan.n_series != p:
            raise ValueError(f"replicate {idx} has {pan.n_series} series, expected {p}")
    return panels


@dataclass(frozen=True)
class WindowedDataset:
    """Lagged design matrix: row ``r`` holds x_{t-1}, ..., x_{t-K} and target x_t.

    Column ``(k-1)*p + j`` holds series ``j`` at lag ``k``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    lag: int
    groups: GroupIndex

    @property
    def n_series(self) -> int:
        return self.groups.n_series

    @property
    def n_rows(self) -> int:
        return self.inputs.shape[0]


def build_windowed(panel: PanelLike, K: int) -> WindowedDataset:
    """Window each replicate separately and stack the rows.

    Windows never cross replicate boundaries, so a replicate of length T
    contributes T - K rows.
    """
    if K < 1:
        raise ValueError(f"lag K must be >= 1, got {K}")
    panels = _as_panels(panel)
    p = panels[0].n_series
    inputs, targets = [], []
    for idx, pan in enumerate(panels):
        T = pan.n_times
        if T <= K:
            raise ValueError(f"replicate {idx}: T={T} must exceed the lag K={K}")
        x = pan.values
        inputs.append(np.hstack([x[K - k : T - k] for k in range(1, K + 1)]))
        targets.append(x[K:])
    return WindowedDataset(
        inputs=np.vstack(inputs),
        targets=np.vstack(targets),
        lag=K,
        groups=GroupIndex.lagged(p, K),
    )


def standardize(panel: PanelLike) -> list[TimeSeriesPanel]:
    """Z-score every series within each replicate.

    Constant series are only centred.
    """
    out = []
    for pan in _as_panels(panel):
        x = pan.values
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        out.append(pan.with_values((x - mu) / sd))
    return out


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (32,)
    grid_size: int = 5
    order: int = 3
    grid_range: tuple[float, float] = (-3.0, 3.0)
    base_fn: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "grid_range", tuple(float(v) for v in self.grid_range))
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden sizes must be >= 1, got {self.hidden}")
        if self.grid_size < 1 or self.order < 0:
            raise ValueError("grid_size must be >= 1 and order >= 0")
        # validates the range
        self.grid()

    def grid(self) -> SplineGrid:
        return SplineGrid.uniform(self.grid_size, self.order, *self.grid_range)

    def dims(self, n_inputs: int) -> list[int]:
        return [n_inputs, *self.hidden, 1]


@dataclass
class GcResult:
    gc_matrix: np.ndarray
    per_component_losses: list[LossBreakdown]
    lag_profiles: np.ndarray
    models: list[KanNetwork] = field(repr=False, default_factory=list)
    seeds: list[int] = field(default_factory=list)

    @property
    def aggregate_losses(self) -> LossBreakdown:
        total = LossBreakdown(0.0, 0.0, 0.0)
        for loss in self.per_component_losses:
            total = total + loss
        return total

    @property
    def selected_lags(self) -> np.ndarray:
        """One-based lag with the largest column norm for every (i, j)."""
        return self.lag_profiles.argmax(axis=2) + 1


def component_seed(base_seed: int, component: int, stream: int = 0) -> int:
    """Seed for one component model, derived only from its own coordinates."""
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, int(stream), int(component)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def extract_gc_matrix(models: Sequence[KanNetwork], groups: GroupIndex) -> np.ndarray:
    """Row ``i`` holds the series group norms of model ``i``'s first layer."""
    if len(models) != groups.n_series:
        raise ValueError(f"expected {groups.n_series} models (one per series), got {len(models)}")
    return np.vstack([group_norms(m.layers[0], groups) for m in models])


def lag_profile(model: KanNetwork, groups: GroupIndex) -> np.ndarray:
    """``(p, K)`` matrix of first-layer column norms per (series, lag)."""
    wb = model.layers[0].base_weights
    if wb.shape[1] != groups.n_columns:
        raise ValueError(
            f"model has {wb.shape[1]} inputs but the lag layout has {groups.n_columns} columns"
        )
    K = groups.max_lag
    if groups.n_columns != groups.n_series * K:
        raise ValueError("lag layout must have every series at every lag")
    profile = np.zeros((groups.n_series, K))
    profile[groups.series, groups.lags - 1] = np.sqrt(np.square(wb).sum(axis=0))
    return profile


def selected_lags(model: KanNetwork, groups: GroupIndex) -> np.ndarray:
    return lag_profile(model, groups).argmax(axis=1) + 1


def _train_one(args):
    i, inputs, targets, dims, cfg, groups, model, features, init = args
    try:
        return train_component(
            inputs, targets, dims, cfg, groups,
            grid=model.grid(), base_fn=model.base_fn, first_features=features, init=init,
        )
    except (TrainingError, FloatingPointError, ValueError) as exc:
        raise ComponentError(i, exc) from exc


def _run_components(jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_train_one(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_one, jobs))


def fit_gckan(
    panel: PanelLike,
    K: int,
    cfg: TrainConfig,
    model: ModelConfig | None = None,
    *,
    workers: int = 1,
    seeds: Sequence[int] | None = None,
    stream: int = 0,
    standardize_input: bool = True,
    init_networks: Sequence[KanNetwork] | None = None,
) -> GcResult:
    """Train the p component models and assemble the GC matrix.

    Component ``i`` uses seed ``seeds[i]`` if given, otherwise
    :func:`component_seed` of ``(cfg.seed, i, stream)``.  Results do not
    depend on ``workers``.
    """
    model = model or ModelConfig()
    panels = standardize(panel) if standardize_input else _as_panels(panel)
    data = build_windowed(panels, K)
    p = data.n_series
    if seeds is None:
        seeds = [component_seed(cfg.seed, i, stream) for i in range(p)]
    elif len(seeds) != p:
        raise ValueError(f"need {p} component seeds, got {len(seeds)}")
    dims = model.dims(data.inputs.shape[1])
    grid = model.grid()
    features = layer_features(data.inputs, grid, model.base_fn)
    jobs = [
        (
            i,
            data.inputs,
            data.targets[:, i],
            dims,
            cfg.with_seed(seeds[i]),
            data.groups,
            model,
            features,
            None if init_networks is None else init_networks[i],
        )
        for i in range(p)
    ]
    trained = _run_components(jobs, workers)
    models = [net for net, _ in trained]
    losses = [loss for _, loss in trained]
    gc = extract_gc_matrix(models, data.groups)
    profiles = np.stack([lag_profile(m, data.groups) for m in models])
    return GcResult(gc, losses, profiles, models, [int(s) for s in seeds])


def _split_tail(panels: list[TimeSeriesPanel], K: int, fraction: float):
    """Per replicate, hold out the last ``fraction`` of the windowed rows."""
    train, test = [], []
    for pan in panels:
        n_rows = pan.n_times - K
        n_test = max(1, int(round(fraction * n_rows)))
        if n_rows - n_test < 1:
            raise ValueError("replicate too short for a held-out split")
        cut = pan.n_times - n_test
        train.append(pan.with_values(pan.values[:cut]))
        # the held-out windows need the K observations before the cut
        test.append(pan.with_values(pan.values[cut - K :]))
    return train, test


def select_penalties(
    panel: PanelLike,
    K: int,
    cfg: TrainConfig,
    model: ModelConfig | None = None,
    *,
    lambdas: Sequence[float] = (0.01, 0.05, 0.1),
    gammas: Sequence[float] = (0.01, 0.05, 0.1),
    holdout: float = 0.1,
    criterion: str = "total",
    workers: int = 1,
    stream: int = 0,
) -> tuple[TrainConfig, dict]:
    """Grid-search (lam, gamma) on a held-out tail of every replicate.

    Each candidate trains all p components on the leading rows and is
    scored by the summed held-out ``criterion`` loss (``"total"`` or
    ``"predict"``).  Returns the config with the winning penalties and a
    table of all scores.
    """
    if criterion not in ("total", "predict"):
        raise ValueError("criterion must be 'total' or 'predict'")
    if not 0 < holdout < 1:
        raise ValueError("holdout must lie in (0, 1)")
    model = model or ModelConfig()
    panels = standardize(panel)
    train, test = _split_tail(panels, K, holdout)
    test_data = build_windowed(test, K)
    scores = {}
    for lam in lambdas:
        for gamma in gammas:
            trial = replace(cfg, lam=float(lam), gamma=float(gamma))
            res = fit_gckan(train, K, trial, model, workers=workers, stream=stream, standardize_input=False)
            held = LossBreakdown(0.0, 0.0, 0.0)
            for i, net in enumerate(res.models):
                held = held + compute_losses(net, test_data.inputs, test_data.targets[:, i], trial, test_data.groups)
            scores[(float(lam), float(gamma))] = held.total if criterion == "total" else held.predict
            log.info("penalty sweep lam=%g gamma=%g -> %s %.6g", lam, gamma, criterion, scores[(lam, gamma)])
    best = min(scores, key=lambda key: (scores[key], key))
    return replace(cfg, lam=best[0], gamma=best[1]), scores
