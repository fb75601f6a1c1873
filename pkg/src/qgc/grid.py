"""Time partition, nested spatial grid cubes, grid functions and finite differences."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations_with_replacement
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n: int
    nodes: Array

    @property
    def h(self) -> Array:
        return np.diff(self.nodes)

    @property
    def mesh(self) -> float:
        return float(np.max(self.h))

    def step(self, i: int) -> tuple[float, float]:
        """Interval I_i = [t_{i-1}, t_i], 1-based."""
        return float(self.nodes[i - 1]), float(self.nodes[i])

    def interval_index(self, t: float) -> int:
        """i with t in [t_{i-1}, t_i); t = T maps to n + 1."""
        if t < 0 or t > self.T:
            raise ValueError(f"time {t} outside [0, {self.T}]")
        if t >= self.T:
            return self.n + 1
        i = int(np.searchsorted(self.nodes, t, side="right"))
        return min(max(i, 1), self.n)


def build_time_grid(T: float, n: int) -> TimeGrid:
    if n < 1:
        raise ValueError("n must be at least 1")
    if T <= 0:
        raise ValueError("T must be positive")
    nodes = T * np.arange(n + 1) / n
    nodes[-1] = T
    return TimeGrid(T=float(T), n=int(n), nodes=nodes)


@dataclass(frozen=True)
class SpatialGrid:
    """Tensor grid x = center + delta * m with integer m in [-K, K]^d.

    ``counts`` are the half widths (in spacings) of the working cube B_i and
    ``outer_counts`` those of the enlarged cube B_i'; values live on the latter.
    """

    d: int
    delta: float
    center: Array
    counts: tuple
    outer_counts: tuple
    t: float = 0.0

    def __post_init__(self):
        if any(k < 1 for k in self.counts):
            raise ValueError("grid half width smaller than one spacing")
        if any(o < k for o, k in zip(self.outer_counts, self.counts)):
            raise ValueError("enlarged box must contain the working box")

    @property
    def shape(self) -> tuple:
        return tuple(2 * k + 1 for k in self.outer_counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def half_widths(self) -> Array:
        return self.delta * np.asarray(self.counts, dtype=float)

    @property
    def outer_half_widths(self) -> Array:
        return self.delta * np.asarray(self.outer_counts, dtype=float)

    @property
    def origin(self) -> Array:
        return self.center - self.outer_half_widths

    @property
    def lower(self) -> Array:
        return self.origin

    @property
    def upper(self) -> Array:
        return self.center + self.outer_half_widths

    def axes(self) -> list:
        return [
            self.center[j] + self.delta * np.arange(-k, k + 1)
            for j, k in enumerate(self.outer_counts)
        ]

    def points(self) -> Array:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def coords(self, index) -> Array:
        return self.origin + self.delta * np.asarray(index, dtype=float)

    def multi_indices(self) -> Array:
        mesh = np.meshgrid(*[np.arange(s) for s in self.shape], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def core_mask(self) -> Array:
        masks = [
            np.abs(np.arange(-o, o + 1)) <= k
            for o, k in zip(self.outer_counts, self.counts)
        ]
        out = masks[0]
        for m in masks[1:]:
            out = np.multiply.outer(out, m)
        return out

    def edge_mask(self) -> Array:
        """Nodes on the outermost layer of the box."""
        out = np.zeros(self.shape, dtype=bool)
        for j in range(self.d):
            sl = [slice(None)] * self.d
            sl[j] = [0, -1]
            out[tuple(sl)] = True
        return out

    def center_index(self) -> tuple:
        return tuple(self.outer_counts)

    def contains(self, other: "SpatialGrid", outer: bool = True) -> bool:
        """Point-set inclusion other ⊆ self (same lattice required)."""
        if other.d != self.d or not math.isclose(other.delta, self.delta, rel_tol=1e-12):
            return False
        offset = (other.center - self.center) / self.delta
        if not np.allclose(offset, np.round(offset), atol=1e-9):
            return False
        offset = np.round(offset).astype(int)
        mine = self.outer_counts if outer else self.counts
        theirs = other.outer_counts if outer else other.counts
        return all(
            off - k2 >= -k1 and off + k2 <= k1 for off, k1, k2 in zip(offset, mine, theirs)
        )


def mesh_scale(n: int, C_M: float, delta_exp: float) -> float:
    """Edge length cap M = C_M n^(delta/2)."""
    return C_M * n ** (delta_exp / 2.0)


def build_grid_sequence(
    tg: TimeGrid,
    x0,
    zeta: float,
    delta_exp: float = 0.5,
    C_M: float = 8.0,
    lam: float = 5.0,
    region: str = "dependence",
    vol_scale: float = 0.0,
    nu: float = 0.5,
    w0: Optional[float] = None,
    sigma_norm: Optional[Callable[[float, Array, Array], float]] = None,
    drift: Optional[Array] = None,
    drift_norm: Optional[Callable[[float, Array, Array], float]] = None,
) -> list:
    """Grids B_1 ⊆ ... ⊆ B_{n+1}; B_i sits at time t_{i-1}.

    ``region`` picks the node sets:

    * ``"dependence"``: only nodes that can influence the value at x0. Each step
      back from T drops the outer layer reached by the stencil, so no boundary
      closure ever enters the result.
    * ``"cone"``: half width w0 + lam * vol_scale * sqrt(t), capped at M/2.
    * ``"cube"``: the full cube of side M = C_M n^(delta/2).

    For the last two, ``sigma_norm(t, lower, upper)`` bounds the volatility near
    the boundary and sizes the enlarged box B_i'. ``drift`` (constant) shifts the
    centers along the Euler flow so that it maps nodes onto nodes; otherwise
    ``drift_norm(t, lower, upper)`` bounds |b| for the dependence region.
    """
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    if region not in ("dependence", "cone", "cube"):
        raise ValueError(f"unknown grid region {region!r}")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    delta = zeta * tg.mesh**nu
    times = tg.nodes  # B_i at t_{i-1}, i = 1..n+1
    centers = [x0 + (t * drift if drift is not None else 0.0) for t in times]

    if region == "dependence":
        counts = [2]  # enough nodes for third differences at t = 0
        for i in range(tg.n):
            k = counts[-1]
            reach = 1
            if drift is None and drift_norm is not None:
                c = centers[i]
                bmax = float(drift_norm(float(times[i]), c - k * delta, c + k * delta))
                reach += math.ceil(tg.h[i] * bmax / delta - 1e-12)
            counts.append(k + reach)
        # the working cube is the probability cone; it only scopes diagnostics here
        w_0 = 2 * delta if w0 is None else w0
        core = [
            min(k, max(2, math.ceil((w_0 + lam * vol_scale * math.sqrt(t)) / delta - 1e-9)))
            for t, k in zip(times, counts)
        ]
        return [
            SpatialGrid(d=d, delta=delta, center=c, counts=(m,) * d, outer_counts=(k,) * d,
                        t=float(t))
            for t, k, m, c in zip(times, counts, core, centers)
        ]

    M = mesh_scale(tg.n, C_M, delta_exp)
    if w0 is None:
        w0 = 2 * delta
    counts = []
    for t in times:
        if region == "cone":
            w = min(M / 2, w0 + lam * vol_scale * math.sqrt(t))
            k = math.ceil(w / delta - 1e-9)
        else:
            k = math.floor(M / (2 * delta) + 1e-9)
        if k < 1:
            raise ValueError("grid half width smaller than one spacing")
        counts.append(k)
    # nesting: nondecreasing forward in time
    for i in range(1, len(counts)):
        counts[i] = max(counts[i], counts[i - 1])

    hs = np.concatenate([tg.h, tg.h[-1:]])
    outer = []
    for t, k, h, c in zip(times, counts, hs, centers):
        extra = 0
        if sigma_norm is not None:
            lo, hi = c - k * delta, c + k * delta
            s = float(sigma_norm(float(t), lo, hi))
            extra = math.ceil(lam * s * math.sqrt(h) / (2 * delta) - 1e-9)
        outer.append(k + max(extra, 1))
    for i in range(1, len(outer)):
        outer[i] = max(outer[i], outer[i - 1])

    return [
        SpatialGrid(d=d, delta=delta, center=c, counts=(k,) * d, outer_counts=(o,) * d,
                    t=float(t))
        for t, k, o, c in zip(times, counts, outer, centers)
    ]


# ---------------------------------------------------------------------------
# finite differences on whole arrays


def _check_axis(v: Array, axis: int, need: int):
    if not 0 <= axis < v.ndim:
        raise ValueError(f"axis {axis} out of range for a {v.ndim}-d grid")
    if v.shape[axis] < need:
        raise ValueError(f"need at least {need} nodes along axis {axis}")


def diff1(v: Array, axis: int, delta: float) -> Array:
    """First difference: central inside, second-order one-sided at the edges."""
    _check_axis(v, axis, 3)
    w = np.moveaxis(v, axis, 0)
    out = np.empty_like(w)
    out[1:-1] = (w[2:] - w[:-2]) / (2 * delta)
    out[0] = (-3 * w[0] + 4 * w[1] - w[2]) / (2 * delta)
    out[-1] = (3 * w[-1] - 4 * w[-2] + w[-3]) / (2 * delta)
    return np.moveaxis(out, 0, axis)


def diff2(v: Array, axis: int, delta: float) -> Array:
    """Pure second difference: 3-point inside, first-order one-sided at the edges."""
    _check_axis(v, axis, 3)
    w = np.moveaxis(v, axis, 0)
    out = np.empty_like(w)
    out[1:-1] = (w[2:] - 2 * w[1:-1] + w[:-2]) / delta**2
    out[0] = (w[0] - 2 * w[1] + w[2]) / delta**2
    out[-1] = (w[-1] - 2 * w[-2] + w[-3]) / delta**2
    return np.moveaxis(out, 0, axis)


def diff3(v: Array, axis: int, delta: float) -> Array:
    """Pure third difference: 5-point central where possible, 4-point one-sided near edges."""
    _check_axis(v, axis, 4)
    w = np.moveaxis(v, axis, 0)
    out = np.empty_like(w)
    m = w.shape[0]
    if m >= 5:
        out[2:-2] = (w[4:] - 2 * w[3:-1] + 2 * w[1:-3] - w[:-4]) / (2 * delta**3)
    lo = [0, 1] if m >= 5 else list(range(m - 3))
    for k in lo:
        out[k] = (w[k + 3] - 3 * w[k + 2] + 3 * w[k + 1] - w[k]) / delta**3
    hi = [m - 2, m - 1] if m >= 5 else [k for k in range(m) if k not in lo]
    for k in hi:
        out[k] = (w[k] - 3 * w[k - 1] + 3 * w[k - 2] - w[k - 3]) / delta**3
    return np.moveaxis(out, 0, axis)


def gradient_table(v: Array, delta: float) -> Array:
    return np.stack([diff1(v, j, delta) for j in range(v.ndim)])


def hessian_table(v: Array, delta: float, grad: Optional[Array] = None) -> Array:
    """Pure seconds on the diagonal, four-point cross stencil off it."""
    d = v.ndim
    if grad is None:
        grad = gradient_table(v, delta)
    out = np.empty((d, d) + v.shape)
    for j in range(d):
        out[j, j] = diff2(v, j, delta)
        for k in range(j + 1, d):
            out[j, k] = diff1(grad[k], j, delta)
            out[k, j] = out[j, k]
    return out


def third_table(v: Array, delta: float, hess: Optional[Array] = None) -> dict:
    """All third differences keyed by sorted axis triples."""
    d = v.ndim
    if hess is None:
        hess = hessian_table(v, delta)
    out = {}
    for j, k, l in combinations_with_replacement(range(d), 3):
        if j == k == l:
            out[(j, k, l)] = diff3(v, j, delta)
        elif j == k:
            out[(j, k, l)] = diff1(hess[j, j], l, delta)
        elif k == l:
            out[(j, k, l)] = diff1(hess[k, k], j, delta)
        else:
            out[(j, k, l)] = diff1(hess[j, k], l, delta)
    return out


# ---------------------------------------------------------------------------


class GridFunction:
    """Node values of a function on a SpatialGrid with cached difference tables."""

    def __init__(self, grid: SpatialGrid, values: Array, edge: str = "linear"):
        if edge not in ("linear", "one_sided"):
            raise ValueError(f"unknown edge closure {edge!r}")
        values = np.asarray(values, dtype=float).reshape(grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function values must be finite")
        self.grid = grid
        self.values = values
        self.edge = edge

    @classmethod
    def from_function(cls, grid: SpatialGrid, fn: Callable[[Array], Array],
                      edge: str = "linear") -> "GridFunction":
        return cls(grid, fn(grid.points()), edge=edge)

    @cached_property
    def grad(self) -> Array:
        return gradient_table(self.values, self.grid.delta)

    @cached_property
    def hess(self) -> Array:
        return hessian_table(self.values, self.grid.delta, self.grad)

    @cached_property
    def taylor_hess(self) -> Array:
        """Hessian used for evaluation; "linear" zeroes it on the outermost layer.

        The one-sided second difference at an edge node feeds the node's own value
        back with weight above one and makes the explicit sweep grow without bound.
        """
        if self.edge == "one_sided":
            return self.hess
        out = self.hess.copy()
        for j in range(self.grid.d):
            sl = [slice(None)] * (self.grid.d + 2)
            sl[2 + j] = [0, -1]
            out[tuple(sl)] = 0.0
        return out

    @cached_property
    def third(self) -> dict:
        return third_table(self.values, self.grid.delta, self.hess)

    def maxima(self, mask: Optional[Array] = None, log_coords: bool = False) -> tuple:
        """Sup norms of the function and its first three difference tables.

        ``mask`` restricts the nodes. With ``log_coords`` the grid variable is
        s = log x and the tables are converted to derivatives in x first.
        """
        g, H, T3 = self.grad, self.hess, self.third
        if log_coords:
            g, H, T3 = _from_log(self.grid, g, H, T3)
        if mask is None:
            mask = np.ones(self.grid.shape, dtype=bool)

        def sup(a: Array) -> float:
            return float(np.max(np.abs(a[..., mask])))

        return sup(self.values), sup(g), sup(H), max(sup(t) for t in T3.values())

    def core_maxima(self, log_coords: bool = False) -> tuple:
        """maxima() over the working cube B_i, from tables on the cube plus two layers."""
        g = self.grid
        pad = tuple(min(k + 2, o) for k, o in zip(g.counts, g.outer_counts))
        sl = tuple(slice(o - p, o + p + 1) for o, p in zip(g.outer_counts, pad))
        sub = SpatialGrid(d=g.d, delta=g.delta, center=g.center, counts=g.counts,
                          outer_counts=pad, t=g.t)
        return GridFunction(sub, self.values[sl], edge=self.edge).maxima(
            sub.core_mask(), log_coords=log_coords)

    def to_csv(self, path) -> None:
        idx = self.grid.multi_indices()
        pts = self.grid.points()
        d = self.grid.d
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"m{j}" for j in range(d)] + [f"x{j}" for j in range(d)] + ["value"])
            for m, x, v in zip(idx, pts, self.values.ravel()):
                w.writerow(list(m) + [f"{c:.17g}" for c in x] + [f"{v:.17g}"])


def _from_log(grid: SpatialGrid, g: Array, H: Array, T3: dict):
    """Chain rule for u(x) = v(log x) applied to difference tables of v."""
    d = grid.d
    mesh = np.meshgrid(*grid.axes(), indexing="ij")
    inv = [np.exp(-m) for m in mesh]
    gx = np.stack([g[j] * inv[j] for j in range(d)])
    Hx = np.empty_like(H)
    for j in range(d):
        for k in range(d):
            Hx[j, k] = (H[j, k] - (g[j] if j == k else 0.0)) * inv[j] * inv[k]
    Tx = {}
    for (j, k, l), t in T3.items():
        acc = t.copy()
        if j == k:
            acc -= H[j, l]
        if j == l:
            acc -= H[j, k]
        if k == l:
            acc -= H[j, k]
        if j == k == l:
            acc += 2 * g[j]
        Tx[(j, k, l)] = acc * inv[j] * inv[k] * inv[l]
    return gx, Hx, Tx


def _node_tuple(gf: GridFunction, node) -> tuple:
    node = tuple(int(k) for k in np.atleast_1d(node))
    if len(node) != gf.grid.d or any(not 0 <= k < s for k, s in zip(node, gf.grid.shape)):
        raise ValueError(f"node {node} not in grid")
    return node


def central_diff(gf: GridFunction, node, axis: int) -> float:
    if not 0 <= axis < gf.grid.d:
        raise ValueError("axis out of range")
    return float(gf.grad[axis][_node_tuple(gf, node)])


def second_diff(gf: GridFunction, node, axis_j: int, axis_k: int) -> float:
    if not (0 <= axis_j < gf.grid.d and 0 <= axis_k < gf.grid.d):
        raise ValueError("axis out of range")
    return float(gf.hess[axis_j, axis_k][_node_tuple(gf, node)])


def third_diff(gf: GridFunction, node, axes: Sequence[int]) -> float:
    axes = tuple(sorted(int(a) for a in axes))
    if len(axes) != 3 or not all(0 <= a < gf.grid.d for a in axes):
        raise ValueError("need three axes in range")
    return float(gf.third[axes][_node_tuple(gf, node)])


def nearest_node(grid: SpatialGrid, y) -> Array:
    """Componentwise nearest index, ties toward the smaller index, clamped to the grid.

    Accepts a point (d,) or a batch (N, d) and returns integer indices of the same shape.
    """
    y = np.asarray(y, dtype=float)
    u = (y - grid.origin) / grid.delta
    idx = np.ceil(u - 0.5).astype(np.int64)
    upper = np.asarray(grid.shape) - 1
    return np.clip(idx, 0, upper)


@dataclass
class TaylorResult:
    value: Array
    gradient: Array
    hessian: Array
    out_of_box: Array = field(default_factory=lambda: np.zeros(0, dtype=bool))


def taylor_eval(gf: GridFunction, y, band: float = 1.0) -> TaylorResult:
    """Second-order Taylor data at off-grid points from the nearest node.

    Points farther than ``band * delta`` (max norm) outside the grid hull fall back
    to the nearest node with zero offset and are flagged.
    """
    grid = gf.grid
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    idx = nearest_node(grid, Y)
    flat = np.ravel_multi_index(tuple(idx.T), grid.shape)
    x = grid.origin + grid.delta * idx
    dy = Y - x

    excess = np.maximum(grid.lower - Y, 0.0) + np.maximum(Y - grid.upper, 0.0)
    oob = np.max(excess, axis=1) > band * grid.delta + 1e-12 * grid.delta
    if np.any(oob):
        dy[oob] = 0.0

    d = grid.d
    v = gf.values.ravel()[flat]
    g = gf.grad.reshape(d, -1)[:, flat].T
    H = gf.taylor_hess.reshape(d, d, -1)[:, :, flat].transpose(2, 0, 1)
    Hdy = np.einsum("njk,nk->nj", H, dy)
    value = v + np.einsum("nj,nj->n", g, dy) + 0.5 * np.einsum("nj,nj->n", dy, Hdy)
    gradient = g + Hdy
    if single:
        return TaylorResult(value[0], gradient[0], H[0], oob)
    return TaylorResult(value, gradient, H, oob)
