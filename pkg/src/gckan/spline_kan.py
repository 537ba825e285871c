"""B-spline basis evaluation and KAN layers with an analytic backward pass.

A KAN edge carries the learnable univariate function

    phi(x) = w_b * b(x) + sum_k w_s[k] * B_k(x)

where ``b`` is a fixed base function (SiLU by default) and ``B_k`` are
B-spline basis functions on a static, uniform, extended knot vector.
A layer sums the edge functions arriving at each output node.

All arrays are float64 numpy arrays.  Shapes follow the convention
``base_weights: (out_dim, in_dim)`` and
``spline_weights: (out_dim, in_dim, num_basis)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

__all__ = [
    "SplineGrid",
    "KanLayer",
    "KanNetwork",
    "ForwardCache",
    "LayerFeatures",
    "layer_features",
    "CacheError",
    "bspline_basis",
    "bspline_basis_with_derivative",
    "layer_forward",
    "layer_backward",
    "network_forward",
    "network_backward",
    "init_network",
    "BASE_FUNCTIONS",
]


class CacheError(ValueError):
    """Raised when a forward cache does not belong to the layer it is used with."""


# ---------------------------------------------------------------------------
# base functions


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def _identity(x):
    return x


def _identity_grad(x):
    return np.ones_like(x)


BASE_FUNCTIONS: dict[str, tuple[Callable, Callable]] = {
    "silu": (_silu, _silu_grad),
    "identity": (_identity, _identity_grad),
}


# ---------------------------------------------------------------------------
# grid and basis


@dataclass(frozen=True)
class SplineGrid:
    """Extended knot vector for B-splines of a fixed order on ``[lo, hi]``.

    ``knots`` holds ``grid_size + 2 * order + 1`` strictly increasing values;
    the interval ``[lo, hi]`` is covered by ``grid_size`` interior cells and
    ``order`` extra knots are appended on each side so every basis function
    touching ``[lo, hi]`` has full support.
    """

    knots: np.ndarray
    order: int
    lo: float
    hi: float

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64)
        if knots.ndim != 1:
            raise ValueError("knots must be one-dimensional")
        if self.order < 0:
            raise ValueError(f"spline order must be >= 0, got {self.order}")
        if not self.lo < self.hi:
            raise ValueError(f"grid range must satisfy lo < hi, got [{self.lo}, {self.hi}]")
        if knots.size < 2 * self.order + 2:
            raise ValueError(
                f"need at least {2 * self.order + 2} knots for order {self.order}, got {knots.size}"
            )
        if not np.all(np.isfinite(knots)):
            raise ValueError("knots must be finite")
        if np.any(np.diff(knots) <= 0):
            bad = int(np.argmax(np.diff(knots) <= 0))
            raise ValueError(f"knots must be strictly increasing (violated at index {bad + 1})")
        if knots[self.order] > self.lo or knots[-self.order - 1] < self.hi:
            raise ValueError("extended knots do not cover [lo, hi]")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        # ghost knots so the local recursion never indexes out of bounds;
        # they only feed basis functions outside the grid, which are discarded
        k = self.order
        pad_lo = knots[0] - (knots[1] - knots[0]) * np.arange(k, 0, -1)
        pad_hi = knots[-1] + (knots[-1] - knots[-2]) * np.arange(1, k + 1)
        object.__setattr__(self, "_padded", np.concatenate([pad_lo, knots, pad_hi]))
        steps = np.diff(knots)
        uniform = np.allclose(steps, steps[0], rtol=1e-9, atol=0.0)
        object.__setattr__(self, "_step", float(steps[0]) if uniform else 0.0)

    @classmethod
    def uniform(cls, grid_size: int = 5, order: int = 3, lo: float = -3.0, hi: float = 3.0) -> "SplineGrid":
        if grid_size < 1:
            raise ValueError(f"grid_size must be >= 1, got {grid_size}")
        h = (hi - lo) / grid_size
        knots = lo + h * np.arange(-order, grid_size + order + 1, dtype=np.float64)
        # pin the range endpoints exactly; arange arithmetic can drift by an ulp
        knots[order] = lo
        knots[order + grid_size] = hi
        return cls(knots=knots, order=order, lo=float(lo), hi=float(hi))

    @property
    def grid_size(self) -> int:
        return self.knots.size - 2 * self.order - 1

    @property
    def num_basis(self) -> int:
        return self.grid_size + self.order

    def __eq__(self, other):
        if not isinstance(other, SplineGrid):
            return NotImplemented
        return (
            self.order == other.order
            and self.lo == other.lo
            and self.hi == other.hi
            and np.array_equal(self.knots, other.knots)
        )

    def __hash__(self):
        return hash((self.order, self.lo, self.hi, self.knots.tobytes()))


@njit(cache=True, nogil=True)
def _basis_kernel(x, knots, padded, step, order, want_deriv, out, dout):  # pragma: no cover - compiled
    # Triangular Cox-de Boor on the order+1 nonzero bases of each point.
    # ``padded`` is ``knots`` with ``order`` ghost knots on either side.
    # ``step > 0`` marks a uniform knot vector.
    k = order
    n_basis = out.shape[1]
    n_cells = knots.size - 1
    top = np.empty(k + 1)
    low = np.empty(k + 1)
    left = np.empty(k + 1)
    right = np.empty(k + 1)
    for i in range(x.size):
        xi = x[i]
        inside = 1.0 if knots[0] <= xi < knots[n_cells] else 0.0
        # outside points only scale zeros; clamping keeps the arithmetic finite
        xi = min(max(xi, knots[0]), knots[n_cells])
        if step > 0.0:
            span = int((xi - knots[0]) / step)
            span = max(0, min(span, n_cells - 1))
            if span > 0 and xi < knots[span]:
                span -= 1
            elif span < n_cells - 1 and xi >= knots[span + 1]:
                span += 1
        else:
            lo_idx = 0
            hi_idx = n_cells
            while hi_idx - lo_idx > 1:
                mid = (lo_idx + hi_idx) // 2
                if knots[mid] <= xi:
                    lo_idx = mid
                else:
                    hi_idx = mid
            span = lo_idx
        ps = span + k
        top[0] = inside
        for j in range(1, k + 1):
            if j == k:
                for r in range(k):
                    low[r] = top[r]
            left[j] = xi - padded[ps + 1 - j]
            right[j] = padded[ps + j] - xi
            saved = 0.0
            for r in range(j):
                temp = top[r] / (right[r + 1] + left[j - r])
                top[r] = saved + right[r + 1] * temp
                saved = left[j - r] * temp
            top[j] = saved
        for r in range(k + 1):
            col = span - k + r
            if 0 <= col < n_basis:
                out[i, col] = top[r]
        if want_deriv:
            # dB_g = k/(t_{g+k}-t_g) B_{g,k-1} - k/(t_{g+k+1}-t_{g+1}) B_{g+1,k-1}
            for r in range(k):
                c = k * low[r] / (padded[ps + 1 + r] - padded[span + 1 + r])
                col = span + 1 + r - k
                if 0 <= col < n_basis:
                    dout[i, col] += c
                if 0 <= col - 1 < n_basis:
                    dout[i, col - 1] -= c


def _evaluate(x, grid: SplineGrid, want_deriv: bool):
    x = np.asarray(x, dtype=np.float64)
    flat = np.ascontiguousarray(x.ravel())
    if not np.all(np.isfinite(flat)):
        raise ValueError("spline inputs must be finite")
    n = grid.num_basis
    out = np.zeros((flat.size, n))
    dout = np.zeros((flat.size, n)) if want_deriv else np.zeros((0, n))
    _basis_kernel(flat, grid.knots, grid._padded, grid._step, grid.order, want_deriv, out, dout)
    shape = x.shape + (n,)
    if not want_deriv:
        return out.reshape(shape), None
    return out.reshape(shape), dout.reshape(shape)


def bspline_basis(x, grid: SplineGrid) -> np.ndarray:
    """Evaluate all ``grid.num_basis`` B-spline basis functions at ``x``.

    ``x`` may be a scalar or an array of any shape; the result has shape
    ``x.shape + (num_basis,)``.  Values outside ``[lo, hi]`` are evaluated
    on the extended knots without clamping, so the basis may no longer sum
    to one there and vanishes entirely beyond the outermost knots.
    """
    return _evaluate(x, grid, False)[0]


def bspline_basis_with_derivative(x, grid: SplineGrid) -> tuple[np.ndarray, np.ndarray]:
    """Basis values and their derivatives with respect to ``x``.

    Uses dB_{i,k}/dx = k/(t_{i+k}-t_i) B_{i,k-1} - k/(t_{i+k+1}-t_{i+1}) B_{i+1,k-1}.
    """
    return _evaluate(x, grid, True)


# ---------------------------------------------------------------------------
# layers


@dataclass(eq=False)
class KanLayer:
    base_weights: np.ndarray
    spline_weights: np.ndarray
    grid: SplineGrid
    base_fn: str = "silu"
    # bumped on every in-place parameter update so stale caches can be detected
    version: int = 0

    def __post_init__(self):
        self.base_weights = np.asarray(self.base_weights, dtype=np.float64)
        self.spline_weights = np.asarray(self.spline_weights, dtype=np.float64)
        if self.base_weights.ndim != 2:
            raise ValueError("base_weights must be (out_dim, in_dim)")
        expected = self.base_weights.shape + (self.grid.num_basis,)
        if self.spline_weights.shape != expected:
            raise ValueError(f"spline_weights shape {self.spline_weights.shape} != expected {expected}")
        if self.base_fn not in BASE_FUNCTIONS:
            raise ValueError(f"unknown base function {self.base_fn!r}; choose from {sorted(BASE_FUNCTIONS)}")
        if not (np.all(np.isfinite(self.base_weights)) and np.all(np.isfinite(self.spline_weights))):
            raise ValueError("layer weights must be finite")

    @property
    def in_dim(self) -> int:
        return self.base_weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.base_weights.shape[0]

    @property
    def num_basis(self) -> int:
        return self.grid.num_basis

    def copy(self) -> "KanLayer":
        return KanLayer(
            self.base_weights.copy(), self.spline_weights.copy(), self.grid, self.base_fn, self.version
        )


@dataclass(eq=False)
class LayerFeatures:
    """Per-edge activations of a batch: base function values and B-spline bases.

    The derivative arrays are only filled when an input gradient is needed.
    For a fixed input batch these depend on the data alone, so a trainer can
    compute them once for the first layer and reuse them every epoch.
    """

    inputs: np.ndarray
    base: np.ndarray
    basis: np.ndarray
    base_grad: np.ndarray | None = None
    basis_grad: np.ndarray | None = None


def layer_features(
    x: np.ndarray, grid: SplineGrid, base_fn: str = "silu", with_derivative: bool = False
) -> LayerFeatures:
    fn, dfn = BASE_FUNCTIONS[base_fn]
    x = np.asarray(x, dtype=np.float64)
    if with_derivative:
        basis, dbasis = bspline_basis_with_derivative(x, grid)
        return LayerFeatures(x, fn(x), basis, dfn(x), dbasis)
    return LayerFeatures(x, fn(x), bspline_basis(x, grid))


@dataclass(eq=False)
class ForwardCache:
    """What :func:`layer_backward` needs from the matching forward call."""

    layer_id: int
    layer_version: int
    features: LayerFeatures


def layer_forward(
    layer: KanLayer,
    batch: np.ndarray | None,
    layer_index: int = 0,
    *,
    features: LayerFeatures | None = None,
    with_derivative: bool = True,
) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the layer on a ``(B, in_dim)`` batch.

    ``output[b, o] = sum_j W_b[o, j] b(x[b, j]) + sum_{j,k} W_s[o, j, k] B_k(x[b, j])``

    Pass ``features`` instead of ``batch`` to reuse precomputed activations.
    ``with_derivative=False`` skips the basis derivatives, after which
    :func:`layer_backward` cannot return an input gradient.
    """
    if features is None:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != layer.in_dim:
            raise ValueError(
                f"layer {layer_index}: expected input of shape (B, {layer.in_dim}), got {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError(f"layer {layer_index}: input contains non-finite values")
        features = layer_features(x, layer.grid, layer.base_fn, with_derivative)
    elif features.inputs.ndim != 2 or features.inputs.shape[1] != layer.in_dim:
        raise ValueError(
            f"layer {layer_index}: precomputed features have input shape {features.inputs.shape}, "
            f"layer expects (B, {layer.in_dim})"
        )
    n_batch = features.inputs.shape[0]
    out = features.base @ layer.base_weights.T
    out += features.basis.reshape(n_batch, -1) @ layer.spline_weights.reshape(layer.out_dim, -1).T
    return out, ForwardCache(id(layer), layer.version, features)


def layer_backward(layer: KanLayer, cache: ForwardCache, grad_out: np.ndarray, need_input_grad: bool = True):
    """Gradients of ``sum(grad_out * output)`` w.r.t. both weight tensors and the input.

    Returns ``(grad_base_weights, grad_spline_weights, grad_input)``; the
    input gradient is ``None`` when ``need_input_grad`` is false.
    """
    if cache.layer_id != id(layer) or cache.layer_version != layer.version:
        raise CacheError("forward cache is stale or belongs to a different layer")
    f = cache.features
    g = np.asarray(grad_out, dtype=np.float64)
    n_batch = f.inputs.shape[0]
    if g.shape != (n_batch, layer.out_dim):
        raise ValueError(f"grad_out shape {g.shape} != ({n_batch}, {layer.out_dim})")
    grad_wb = g.T @ f.base
    grad_ws = (g.T @ f.basis.reshape(n_batch, -1)).reshape(layer.spline_weights.shape)
    if not need_input_grad:
        return grad_wb, grad_ws, None
    if f.basis_grad is None:
        f.base_grad = BASE_FUNCTIONS[layer.base_fn][1](f.inputs)
        f.basis_grad = bspline_basis_with_derivative(f.inputs, layer.grid)[1]
    flat_ws = layer.spline_weights.reshape(layer.out_dim, -1)
    grad_x = (g @ layer.base_weights) * f.base_grad
    grad_x += np.einsum("bjk,bjk->bj", (g @ flat_ws).reshape(f.basis_grad.shape), f.basis_grad)
    return grad_wb, grad_ws, grad_x


# ---------------------------------------------------------------------------
# networks


@dataclass(eq=False)
class KanNetwork:
    layers: list[KanLayer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for idx in range(1, len(self.layers)):
            if self.layers[idx].in_dim != self.layers[idx - 1].out_dim:
                raise ValueError(
                    f"layer {idx} expects {self.layers[idx].in_dim} inputs but layer {idx - 1} "
                    f"produces {self.layers[idx - 1].out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: (W_b^0, W_s^0, W_b^1, W_s^1, ...)."""
        out = []
        for layer in self.layers:
            out.extend((layer.base_weights, layer.spline_weights))
        return out

    def mark_updated(self) -> None:
        for layer in self.layers:
            layer.version += 1

    def copy(self) -> "KanNetwork":
        return KanNetwork([layer.copy() for layer in self.layers])

    def predict(self, batch: np.ndarray) -> np.ndarray:
        out, _ = network_forward(self, batch, for_backward=False)
        return out


def network_forward(
    net: KanNetwork,
    batch: np.ndarray | None,
    *,
    first_features: LayerFeatures | None = None,
    for_backward: bool = True,
) -> tuple[np.ndarray, list[ForwardCache]]:
    """Run every layer; returns the ``(B, out_dim)`` output and per-layer caches.

    ``first_features`` lets callers reuse the first layer's activations of a
    fixed batch.  The first layer never needs basis derivatives because the
    network inputs are data, not parameters.
    """
    caches = []
    h, cache = layer_forward(net.layers[0], batch, 0, features=first_features, with_derivative=False)
    caches.append(cache)
    for idx in range(1, len(net.layers)):
        h, cache = layer_forward(net.layers[idx], h, idx, with_derivative=for_backward)
        caches.append(cache)
    return h, caches


def network_backward(
    net: KanNetwork, caches: Sequence[ForwardCache], grad_out: np.ndarray, need_input_grad: bool = False
):
    """Backpropagate through every layer.

    Returns ``(grads, grad_input)`` with ``grads`` in
    :meth:`KanNetwork.parameters` order; ``grad_input`` is ``None`` unless
    requested.
    """
    if len(caches) != len(net.layers):
        raise CacheError(f"expected {len(net.layers)} caches, got {len(caches)}")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    g = grad_out
    for idx in range(len(net.layers) - 1, -1, -1):
        want = idx > 0 or need_input_grad
        grad_wb, grad_ws, g = layer_backward(net.layers[idx], caches[idx], g, need_input_grad=want)
        grads[2 * idx] = grad_wb
        grads[2 * idx + 1] = grad_ws
    return grads, g


def init_network(
    layer_dims: Sequence[int],
    grid_size: int = 5,
    order: int = 3,
    seed: int = 0,
    *,
    grid_range: tuple[float, float] = (-3.0, 3.0),
    base_fn: str = "silu",
    spline_scale: float = 0.1,
) -> KanNetwork:
    """Build a freshly initialized network.

    Base weights are uniform on ``[-1/sqrt(in), 1/sqrt(in)]``; spline
    weights are normal with standard deviation ``spline_scale / sqrt(in)``
    so the initial network is close to a SiLU MLP.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output size")
    if any(d < 1 for d in dims):
        raise ValueError(f"all layer dims must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    grid = SplineGrid.uniform(grid_size, order, *grid_range)
    layers = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(n_in)
        wb = rng.uniform(-bound, bound, size=(n_out, n_in))
        ws = rng.normal(0.0, spline_scale / np.sqrt(n_in), size=(n_out, n_in, grid.num_basis))
        layers.append(KanLayer(wb, ws, grid, base_fn))
    return KanNetwork(layers)
