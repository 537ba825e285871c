"""AUROC scoring of GC matrices and replicate aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = ["EvalSpec", "ScoreSummary", "auroc", "gc_auroc", "aggregate", "evaluated_entries"]


@dataclass(frozen=True)
class EvalSpec:
    """Which entries of a p x p matrix are scored.

    Gene-network benchmarks have no self-loops in their gold standard, so
    they are scored with ``include_diagonal=False``; synthetic benchmarks
    score every entry.
    """

    include_diagonal: bool = True
    convention: str = "all-entries"

    @classmethod
    def gene_network(cls) -> "EvalSpec":
        return cls(include_diagonal=False, convention="off-diagonal")


@dataclass(frozen=True)
class ScoreSummary:
    mean: float
    std: float
    n: int
    values: tuple[float, ...] = field(default=())

    def format(self, digits: int = 3) -> str:
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"

    def __str__(self) -> str:
        return self.format()


def auroc(scores, labels) -> float:
    """Area under the ROC curve with ties counted as one half.

    Equals the normalized Mann-Whitney U statistic
    P(s+ > s-) + 0.5 P(s+ = s-), computed from midranks.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined when labels contain a single class")
    ranks = rankdata(s, method="average")
    # rank sums of integers and half-integers are exact in float64 for any realistic n
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluated_entries(shape: tuple[int, int], spec: EvalSpec) -> np.ndarray:
    """Boolean mask of the matrix entries that take part in scoring."""
    mask = np.ones(shape, dtype=bool)
    if not spec.include_diagonal:
        np.fill_diagonal(mask, False)
    return mask


def gc_auroc(G, truth, spec: EvalSpec | None = None) -> float:
    """AUROC of GC scores against a ground-truth adjacency.

    ``truth`` may be a :class:`~gckan.datagen.GroundTruthGraph` or an array.
    Masked entries are never read, so they may hold anything (even NaN).
    """
    spec = spec or EvalSpec()
    G = np.asarray(G, dtype=np.float64)
    adj = np.asarray(getattr(truth, "adjacency", truth))
    if G.shape != adj.shape or G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"score matrix {G.shape} and truth {adj.shape} must be equal square shapes")
    mask = evaluated_entries(G.shape, spec)
    labels = adj[mask]
    if labels.min() == labels.max():
        raise ValueError("ground truth has a single class over the evaluated entries")
    return auroc(G[mask], labels)


def aggregate(values: Sequence[float]) -> ScoreSummary:
    """Mean and sample standard deviation (n - 1 denominator; 0 for n = 1)."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("cannot aggregate an empty sequence")
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return ScoreSummary(float(vals.mean()), std, int(vals.size), tuple(float(v) for v in vals))
