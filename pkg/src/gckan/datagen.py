"""Synthetic benchmark generators with ground truth, and panel file loaders."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .granger import TimeSeriesPanel

__all__ = [
    "Lorenz96Config",
    "VarConfig",
    "GroundTruthGraph",
    "SimulationError",
    "PanelParseError",
    "lorenz96_derivative",
    "rk4_step",
    "simulate_lorenz96",
    "lorenz96_truth",
    "generate_var",
    "var_coefficients",
    "companion_matrix",
    "spectral_radius",
    "load_panel",
    "load_truth",
    "write_panel",
    "write_truth",
]


class SimulationError(RuntimeError):
    pass


class PanelParseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GroundTruthGraph:
    """Binary adjacency; ``adjacency[i, j] == 1`` iff series j Granger-causes series i."""

    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {adj.shape}")
        if not np.all((adj == 0) | (adj == 1)):
            raise ValueError("adjacency entries must be 0 or 1")
        adj = adj.astype(np.int8)
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def n_series(self) -> int:
        return self.adjacency.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GroundTruthGraph):
            return NotImplemented
        return np.array_equal(self.adjacency, other.adjacency)

    def __hash__(self):
        return hash((self.adjacency.shape, self.adjacency.tobytes()))


# ---------------------------------------------------------------------------
# Lorenz-96


@dataclass(frozen=True)
class Lorenz96Config:
    p: int = 10
    forcing: float = 10.0
    T: int = 1000
    dt: float = 0.05
    burn_in: int = 1000
    obs_noise_std: float = 0.01
    seed: int = 0
    convention: str = "paper"

    def __post_init__(self):
        if self.p < 4:
            raise ValueError(f"Lorenz-96 needs p >= 4, got {self.p}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.burn_in < 0 or self.obs_noise_std < 0:
            raise ValueError("burn_in and obs_noise_std must be >= 0")
        if self.convention not in ("paper", "standard"):
            raise ValueError("convention must be 'paper' or 'standard'")


def lorenz96_derivative(state, F: float, convention: str = "paper") -> np.ndarray:
    """Time derivative of the cyclic Lorenz-96 system.

    ``paper``:    dx_i/dt = -x_{i-1} (x_{i-2} - x_{i+1}) - x_i + F
    ``standard``: dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F
    """
    x = np.asarray(state, dtype=np.float64)
    if x.ndim != 1 or x.size < 4:
        raise ValueError(f"Lorenz-96 needs a state vector with p >= 4, got shape {x.shape}")
    xm1 = np.roll(x, 1)
    xm2 = np.roll(x, 2)
    xp1 = np.roll(x, -1)
    if convention == "paper":
        return -xm1 * (xm2 - xp1) - x + F
    if convention == "standard":
        return (xp1 - xm2) * xm1 - x + F
    raise ValueError("convention must be 'paper' or 'standard'")


def rk4_step(state, F: float, dt: float, convention: str = "paper") -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be > 0")
    x = np.asarray(state, dtype=np.float64)
    k1 = lorenz96_derivative(x, F, convention)
    k2 = lorenz96_derivative(x + 0.5 * dt * k1, F, convention)
    k3 = lorenz96_derivative(x + 0.5 * dt * k2, F, convention)
    k4 = lorenz96_derivative(x + dt * k3, F, convention)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz96_truth(p: int) -> GroundTruthGraph:
    """Row i marks columns i-2, i-1, i, i+1 (mod p)."""
    adj = np.zeros((p, p), dtype=np.int8)
    for i in range(p):
        for off in (-2, -1, 0, 1):
            adj[i, (i + off) % p] = 1
    return GroundTruthGraph(adj)


def simulate_lorenz96(cfg: Lorenz96Config) -> tuple[TimeSeriesPanel, GroundTruthGraph]:
    rng = np.random.default_rng(cfg.seed)
    x = cfg.forcing + rng.normal(0.0, 0.01, size=cfg.p)
    out = np.empty((cfg.T, cfg.p))
    for step in range(cfg.burn_in + cfg.T):
        if step >= cfg.burn_in:
            out[step - cfg.burn_in] = x
        x = rk4_step(x, cfg.forcing, cfg.dt, cfg.convention)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"Lorenz-96 state became non-finite at integration step {step + 1}")
    if cfg.obs_noise_std > 0:
        out = out + rng.normal(0.0, cfg.obs_noise_std, size=out.shape)
    return TimeSeriesPanel(out), lorenz96_truth(cfg.p)


# ---------------------------------------------------------------------------
# VAR


@dataclass(frozen=True)
class VarConfig:
    p: int = 10
    T: int = 1000
    lag: int = 3
    sparsity: float = 0.2
    coeff_scale: float = 0.1
    noise_std: float = 1.0
    spectral_target: float = 0.95
    burn_in: int = 100
    lag_density: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.p < 2:
            raise ValueError("p must be >= 2")
        if self.lag < 1:
            raise ValueError("lag must be >= 1")
        if not 0 < self.sparsity <= 1:
            raise ValueError("sparsity must lie in (0, 1]")
        if self.sparsity * self.p * self.p < self.p - 1e-9:
            raise ValueError("sparsity * p^2 must be >= p so the diagonal fits in the support")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be > 0")
        if not 0 < self.spectral_target < 1:
            raise ValueError("spectral_target must lie in (0, 1)")
        if self.coeff_scale == 0:
            raise ValueError("coeff_scale must be nonzero")
        if not 0 < self.lag_density <= 1:
            raise ValueError("lag_density must lie in (0, 1]")


def companion_matrix(coefs: np.ndarray) -> np.ndarray:
    """Companion form of VAR coefficients stacked as ``(lag, p, p)``."""
    lag, p, _ = coefs.shape
    comp = np.zeros((lag * p, lag * p))
    comp[:p] = np.hstack(list(coefs))
    if lag > 1:
        comp[p:, : (lag - 1) * p] = np.eye((lag - 1) * p)
    return comp


def spectral_radius(coefs: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(companion_matrix(coefs)))))


def _rescale_to_radius(coefs: np.ndarray, target: float, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Scale all coefficients by one common factor so the companion radius hits ``target``.

    The radius is continuous in the factor and zero at zero, so bisection
    on a bracketing interval converges to a crossing.
    """
    if spectral_radius(coefs) == 0:
        raise SimulationError("VAR coefficients have zero spectral radius; cannot rescale")
    lo, hi = 0.0, 1.0
    while spectral_radius(coefs * hi) < target:
        lo, hi = hi, hi * 2.0
        if hi > 1e12:
            raise SimulationError("spectral radius rescaling failed to bracket the target")
    rho = np.nan
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        rho = spectral_radius(coefs * mid)
        if abs(rho - target) <= tol:
            return coefs * mid
        if rho < target:
            lo = mid
        else:
            hi = mid
    raise SimulationError(f"spectral radius rescaling did not converge (last radius {rho})")


def _draw_coefficients(cfg: VarConfig, rng: np.random.Generator) -> np.ndarray:
    p, lag = cfg.p, cfg.lag
    n_edges = int(round(cfg.sparsity * p * p))
    support = np.eye(p, dtype=bool)
    off = np.flatnonzero(~support.ravel())
    chosen = rng.choice(off, size=n_edges - p, replace=False)
    support.ravel()[chosen] = True
    signs = rng.choice([-1.0, 1.0], size=(lag, p, p))
    active = np.broadcast_to(support, (lag, p, p)).copy()
    if cfg.lag_density < 1:
        active &= rng.random((lag, p, p)) < cfg.lag_density
        empty = support & ~active.any(axis=0)
        fallback = rng.integers(0, lag, size=(p, p))
        for i, j in zip(*np.nonzero(empty)):
            active[fallback[i, j], i, j] = True
    coefs = np.where(active, signs * cfg.coeff_scale, 0.0)
    return _rescale_to_radius(coefs, cfg.spectral_target)


def var_coefficients(cfg: VarConfig) -> np.ndarray:
    """The ``(lag, p, p)`` coefficients :func:`generate_var` draws for ``cfg``."""
    return _draw_coefficients(cfg, np.random.default_rng(cfg.seed))


def generate_var(cfg: VarConfig, coefs: np.ndarray | None = None) -> tuple[TimeSeriesPanel, GroundTruthGraph]:
    """Sparse stationary VAR(lag) sample with its Granger ground truth.

    The support is a fixed set of ``round(sparsity * p^2)`` (effect, cause)
    pairs that always includes the diagonal.  Each lag of a supported pair
    is active with probability ``lag_density`` (at least one lag always
    is) and active lags get a random-sign coefficient of magnitude
    ``coeff_scale``; the companion matrix is then rescaled to
    ``spectral_target``.  Passing ``coefs`` (shape ``(lag, p, p)``)
    bypasses the random draw and the rescaling.
    """
    rng = np.random.default_rng(cfg.seed)
    p, lag = cfg.p, cfg.lag
    if coefs is None:
        coefs = _draw_coefficients(cfg, rng)
    else:
        coefs = np.asarray(coefs, dtype=np.float64)
        if coefs.shape != (lag, p, p):
            raise ValueError(f"coefs must have shape {(lag, p, p)}, got {coefs.shape}")
    truth = (np.abs(coefs) > 0).any(axis=0).astype(np.int8)

    total = cfg.burn_in + cfg.T
    noise = rng.normal(0.0, cfg.noise_std, size=(total + lag, p))
    x = np.zeros((total + lag, p))
    x[:lag] = noise[:lag]
    for t in range(lag, total + lag):
        acc = noise[t].copy()
        for m in range(lag):
            acc += coefs[m] @ x[t - m - 1]
        x[t] = acc
    values = x[lag + cfg.burn_in :]
    if not np.all(np.isfinite(values)):
        raise SimulationError("VAR simulation diverged")
    return TimeSeriesPanel(values), GroundTruthGraph(truth)


# ---------------------------------------------------------------------------
# file formats


def _parse_float(cell: str, path, row: int, col: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise PanelParseError(f"{path}: non-numeric cell {cell!r} at row {row}, column {col}") from None
    if not np.isfinite(value):
        raise PanelParseError(f"{path}: non-finite value {cell!r} at row {row}, column {col}")
    return value


def _make_panel(path, values, rid: int, names, first_row: int) -> TimeSeriesPanel:
    try:
        return TimeSeriesPanel(values, replicate_id=rid, series_names=names)
    except ValueError as exc:
        raise PanelParseError(f"{path}: replicate {rid} starting at row {first_row}: {exc}") from None


def load_panel(
    path,
    format: str = "csv",
    *,
    replicate_length: int | None = None,
    replicate_column: str | None = None,
) -> list[TimeSeriesPanel]:
    """Read one or more replicates from a panel CSV.

    The file has a header row of series names followed by numeric rows
    (row numbers in error messages count the header as row 1).  Replicates
    are separated in one of three ways:

    * ``format="csv"``: the whole file is a single replicate, unless
      ``replicate_length`` is given, in which case the rows are cut into
      consecutive blocks of that length (for example 46 blocks of 21 time
      points for DREAM-3 style data);
    * ``format="csv-replicate-column"``: the column named
      ``replicate_column`` (default ``"replicate"``) carries an integer
      replicate index and rows of one replicate must be contiguous.
    """
    path = Path(path)
    if format not in ("csv", "csv-replicate-column"):
        raise PanelParseError(f"unknown panel format {format!r}")
    text = path.read_text()
    if not text.strip():
        raise PanelParseError(f"{path}: file is empty")
    rows = list(csv.reader(io.StringIO(text)))
    while rows and not any(cell.strip() for cell in rows[-1]):
        rows.pop()
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise PanelParseError(f"{path}: no data rows after the header")
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise PanelParseError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
    values = np.array(
        [[_parse_float(cell, path, r, c + 1) for c, cell in enumerate(row)] for r, row in enumerate(body, start=2)]
    )

    if format == "csv-replicate-column":
        name = replicate_column or "replicate"
        if name not in header:
            raise PanelParseError(f"{path}: no replicate column {name!r} in header")
        rc = header.index(name)
        rep = values[:, rc]
        if np.any(rep != np.round(rep)):
            raise PanelParseError(f"{path}: replicate column {name!r} must hold integers")
        keep = [c for c in range(len(header)) if c != rc]
        names = tuple(header[c] for c in keep)
        data = values[:, keep]
        panels, seen = [], set()
        starts = np.flatnonzero(np.r_[True, rep[1:] != rep[:-1]])
        bounds = list(starts) + [len(rep)]
        for a, b in zip(bounds[:-1], bounds[1:]):
            rid = int(rep[a])
            if rid in seen:
                raise PanelParseError(f"{path}: rows of replicate {rid} are not contiguous (row {a + 2})")
            seen.add(rid)
            panels.append(_make_panel(path, data[a:b], rid, names, a + 2))
        if replicate_length is not None:
            for pan in panels:
                if pan.n_times != replicate_length:
                    raise PanelParseError(
                        f"{path}: replicate {pan.replicate_id} has {pan.n_times} rows, expected {replicate_length}"
                    )
        return panels

    names = tuple(header)
    if replicate_length is None:
        return [_make_panel(path, values, 0, names, 2)]
    if replicate_length < 2 or values.shape[0] % replicate_length:
        raise PanelParseError(
            f"{path}: {values.shape[0]} data rows are not a whole number of replicates of length {replicate_length}"
        )
    return [
        _make_panel(path, values[a : a + replicate_length], idx, names, a + 2)
        for idx, a in enumerate(range(0, values.shape[0], replicate_length))
    ]


def load_truth(path) -> GroundTruthGraph:
    """Read a p x p 0/1 CSV (row = effect, column = cause), no header."""
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise PanelParseError(f"{path}: file is empty")
    rows = [row for row in csv.reader(io.StringIO(text)) if any(c.strip() for c in row)]
    p = len(rows)
    mat = np.zeros((p, p), dtype=np.int8)
    for r, row in enumerate(rows, start=1):
        if len(row) != p:
            raise PanelParseError(f"{path}: row {r} has {len(row)} cells, expected {p}")
        for c, cell in enumerate(row, start=1):
            if cell.strip() not in ("0", "1"):
                raise PanelParseError(f"{path}: cell at row {r}, column {c} must be 0 or 1, got {cell!r}")
            mat[r - 1, c - 1] = int(cell)
    return GroundTruthGraph(mat)


def format_float(value: float) -> str:
    # shortest round-trip representation keeps files byte-stable and lossless
    return repr(float(value))


def write_matrix(path, matrix: np.ndarray, header: Sequence[str] | None = None, integer: bool = False) -> None:
    lines = []
    if header is not None:
        lines.append(",".join(header))
    for row in np.asarray(matrix):
        cells = (str(int(v)) for v in row) if integer else (format_float(v) for v in row)
        lines.append(",".join(cells))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_panel(path, panel: TimeSeriesPanel) -> None:
    names = panel.series_names or tuple(f"x{j}" for j in range(panel.n_series))
    write_matrix(path, panel.values, header=names)


def write_truth(path, truth: GroundTruthGraph) -> None:
    write_matrix(path, truth.adjacency, integer=True)
