"""Fusing GC estimates from the original and the time-reversed series.

Both directions are fitted.  If one direction has both the lower
prediction loss and the lower sparsity loss its matrix is returned as is;
otherwise the two matrices are merged entry by entry, averaging entries
that differ by less than ``theta`` and taking the larger one elsewhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .granger import GcResult, ModelConfig, PanelLike, TimeSeriesPanel, _as_panels, fit_gckan
from .trainer import TrainConfig

__all__ = [
    "FusionConfig",
    "FusionOutcome",
    "reverse_panel",
    "fuse_gc",
    "infer_with_fusion",
    "ORIGINAL_STREAM",
    "REVERSED_STREAM",
]

ORIGINAL_STREAM = 0
REVERSED_STREAM = 1


@dataclass(frozen=True)
class FusionConfig:
    theta: float = 0.05
    transpose_reversed: bool = False

    def __post_init__(self):
        if not self.theta >= 0:
            raise ValueError(f"theta must be >= 0, got {self.theta}")


@dataclass
class FusionOutcome:
    fused: np.ndarray
    branch: str
    losses: dict
    # per entry: "average" or "max"; only for the elementwise branch
    rule: np.ndarray | None = None
    original: np.ndarray | None = None
    reversed: np.ndarray | None = None
    original_result: GcResult | None = field(default=None, repr=False)
    reversed_result: GcResult | None = field(default=None, repr=False)


def reverse_panel(panel: PanelLike):
    """Reverse the time axis of a panel, or of each replicate independently."""
    if isinstance(panel, TimeSeriesPanel):
        return panel.with_values(panel.values[::-1].copy())
    return [reverse_panel(p) for p in _as_panels(panel)]


def fuse_gc(
    G,
    G_rev,
    predict_orig: float,
    predict_rev: float,
    sparsity_orig: float,
    sparsity_rev: float,
    cfg: FusionConfig | None = None,
) -> FusionOutcome:
    """Pick or merge the two GC matrices according to the loss comparison."""
    cfg = cfg or FusionConfig()
    G = np.asarray(G, dtype=np.float64)
    G_rev = np.asarray(G_rev, dtype=np.float64)
    if G.shape != G_rev.shape or G.ndim != 2:
        raise ValueError(f"GC matrices must share a 2-D shape, got {G.shape} and {G_rev.shape}")
    losses = {
        "predict_original": float(predict_orig),
        "predict_reversed": float(predict_rev),
        "sparsity_original": float(sparsity_orig),
        "sparsity_reversed": float(sparsity_rev),
    }
    if not all(np.isfinite(v) for v in losses.values()):
        raise ValueError("fusion losses must be finite")
    if cfg.transpose_reversed:
        G_rev = G_rev.T.copy()

    if predict_orig < predict_rev and sparsity_orig < sparsity_rev:
        return FusionOutcome(G.copy(), "original", losses, original=G, reversed=G_rev)
    if predict_orig > predict_rev and sparsity_orig > sparsity_rev:
        return FusionOutcome(G_rev.copy(), "reversed", losses, original=G, reversed=G_rev)
    close = np.abs(G - G_rev) < cfg.theta
    fused = np.where(close, 0.5 * (G + G_rev), np.maximum(G, G_rev))
    rule = np.where(close, "average", "max")
    return FusionOutcome(fused, "elementwise", losses, rule=rule, original=G, reversed=G_rev)


def infer_with_fusion(
    panel: PanelLike,
    K: int,
    train_cfg: TrainConfig,
    fusion_cfg: FusionConfig | None = None,
    model: ModelConfig | None = None,
    *,
    workers: int = 1,
) -> FusionOutcome:
    """Fit both time directions (2p models) and fuse their GC matrices.

    The two directions draw component seeds from separate streams of
    ``train_cfg.seed``.
    """
    fusion_cfg = fusion_cfg or FusionConfig()
    forward = fit_gckan(panel, K, train_cfg, model, workers=workers, stream=ORIGINAL_STREAM)
    backward = fit_gckan(reverse_panel(panel), K, train_cfg, model, workers=workers, stream=REVERSED_STREAM)
    lo, lr = forward.aggregate_losses, backward.aggregate_losses
    outcome = fuse_gc(
        forward.gc_matrix, backward.gc_matrix, lo.predict, lr.predict, lo.sparsity, lr.sparsity, fusion_cfg
    )
    outcome.original_result = forward
    outcome.reversed_result = backward
    return outcome
