"""Backward connecting sweep over a time partition with finite-difference grids."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .expansion import step_values
from .grid import (
    GridFunction,
    SpatialGrid,
    build_grid_sequence,
    build_time_grid,
    nearest_node,
    taylor_eval,
)
from .model import (
    Driver,
    ForwardModel,
    TerminalFunction,
    TruncationRule,
    default_c_N,
    log_coordinates,
    truncate_driver,
)

log = logging.getLogger(__name__)

Array = np.ndarray


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    n: int
    T: float = 1.0
    x0: tuple = (1.0,)
    zeta: float = 1.0
    nu: float = 0.5
    delta_exp: float = 0.5
    C_M: float = 8.0
    lam: float = 5.0
    region: str = "dependence"
    w0: Optional[float] = None
    vol_scale: Optional[float] = None
    truncation: Optional[TruncationRule] = None
    log_coords: bool = False
    drift_shift: bool = True
    band: float = 1.0
    edge: str = "linear"
    diag_coords: str = "model"
    threads: int = 1
    keep_grids: bool = False
    dump_dir: Optional[str] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.zeta <= 0:
            raise ValueError("zeta must be positive")
        if not 1.0 / 3.0 < self.nu <= 1.0:
            raise ValueError("nu must lie in (1/3, 1]")
        if self.T <= 0:
            raise ValueError("T must be positive")
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))

    def echo(self) -> dict:
        out = asdict(self)
        out["truncation"] = None if self.truncation is None else asdict(self.truncation)
        return out

    def problem_key(self) -> dict:
        out = self.echo()
        for k in ("n", "threads", "keep_grids", "dump_dir"):
            out.pop(k)
        return out


@dataclass
class StepStats:
    i: int
    max_u: float
    max_du: float
    max_d2u: float
    max_d3u: float
    out_of_box: int = 0
    divergent: bool = False

    def orders(self) -> tuple:
        return (self.max_u, self.max_du, self.max_d2u, self.max_d3u)


@dataclass
class SolveReport:
    y0: float
    z0: Array
    per_step: list
    runtime_seconds: float
    config: dict
    problem: dict
    divergent: bool = False
    divergence_at: Optional[dict] = None
    warnings: list = field(default_factory=list)
    grids: Optional[list] = field(default=None, repr=False)
    context: Optional[dict] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return int(self.config["n"])

    @property
    def out_of_box(self) -> int:
        return sum(s.out_of_box for s in self.per_step)

    def maxima(self) -> tuple:
        """max_i of each stability quantity (nan when the ledger is empty)."""
        if not self.per_step:
            return (math.nan,) * 4
        arr = np.array([s.orders() for s in self.per_step])
        return tuple(float(v) for v in np.max(arr, axis=0))

    def to_dict(self) -> dict:
        return {
            "y0": self.y0,
            "z0": [float(v) for v in np.atleast_1d(self.z0)],
            "per_step": [asdict(s) for s in self.per_step],
            "runtime_seconds": self.runtime_seconds,
            "divergent": self.divergent,
            "divergence_at": self.divergence_at,
            "warnings": list(self.warnings),
            "config": self.config,
            "problem": self.problem,
        }

    def to_json(self) -> str:
        return dumps17(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "SolveReport":
        return cls(
            y0=float(data["y0"]),
            z0=np.asarray(data["z0"], dtype=float),
            per_step=[StepStats(**s) for s in data["per_step"]],
            runtime_seconds=float(data["runtime_seconds"]),
            config=data["config"],
            problem=data["problem"],
            divergent=bool(data.get("divergent", False)),
            divergence_at=data.get("divergence_at"),
            warnings=list(data.get("warnings", [])),
        )


def _num(x) -> str:
    if x is None:
        return "null"
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps17(obj, indent: int = 0) -> str:
    """JSON with every float printed at 17 significant digits."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps17(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(dumps17(v, indent + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + dumps17(v, indent + 1) for v in seq) + "\n" + end + "]"
    if isinstance(obj, str):
        return json.dumps(obj)
    return _num(obj)


def _problem(model: ForwardModel, driver: Driver, terminal: TerminalFunction, config: SolverConfig) -> dict:
    return {
        "model": model.name,
        "driver": driver.name,
        "terminal": terminal.name,
        "config": config.problem_key(),
    }


def _threads(config: SolverConfig) -> int:
    return max(1, int(config.threads))


def _row_norm_max(model: ForwardModel, t: float, pts: Array) -> float:
    S = model.sigma(t, pts)
    return float(np.max(np.linalg.norm(S, axis=2)))


def _drift_norm_max(model: ForwardModel, t: float, pts: Array) -> float:
    return float(np.max(np.abs(model.b(t, pts))))


def _box_probe(lo: Array, hi: Array) -> Array:
    d = lo.size
    corners = np.array(np.meshgrid(*[[lo[j], hi[j]] for j in range(d)], indexing="ij"))
    return np.concatenate([corners.reshape(d, -1).T, ((lo + hi) / 2)[None, :]])


def backward_sweep(model: ForwardModel, driver: Driver, terminal: TerminalFunction,
                   config: SolverConfig) -> SolveReport:
    """Solve for (Y_0, Z_0) by the connecting scheme on nested grid cubes."""
    started = time.perf_counter()
    warnings_: list = []
    problem = _problem(model, driver, terminal, config)
    x0 = np.asarray(config.x0, dtype=float)
    if x0.size != model.d:
        raise ValueError(f"x0 has dimension {x0.size}, model has {model.d}")

    if config.log_coords:
        if np.any(x0 <= 0):
            raise ValueError("log coordinates need a positive x0")
        model, driver, terminal = log_coordinates(model, driver, terminal)
        x0 = np.log(x0)
    if not model.has_drift_hessian:
        warnings_.append("drift Hessian unavailable: second-order drift term omitted")
        log.warning(warnings_[-1])

    rule = config.truncation
    if rule is not None and rule.enabled:
        if rule.c_N is None:
            coarse = backward_sweep(model, driver, terminal,
                                    replace(config, n=1, truncation=None, log_coords=False,
                                            x0=tuple(x0), keep_grids=False, dump_dir=None))
            rule = replace(rule, c_N=default_c_N(driver, coarse.z0))
            warnings_.append(f"c_N defaulted to {rule.c_N:.6g}")
        driver = truncate_driver(driver, rule, config.n)
    elif rule is not None:
        driver = truncate_driver(driver, rule, config.n)
        warnings_.extend(driver.warnings[-1:])

    tg = build_time_grid(config.T, config.n)
    vol = config.vol_scale
    if vol is None:
        vol = _row_norm_max(model, 0.0, x0[None, :])
    drift = None
    if config.drift_shift and model.constant_drift is not None:
        drift = np.asarray(model.constant_drift, dtype=float)
    grids = build_grid_sequence(
        tg, x0, config.zeta, delta_exp=config.delta_exp, C_M=config.C_M, lam=config.lam,
        region=config.region, vol_scale=vol, nu=config.nu, w0=config.w0,
        sigma_norm=lambda t, lo, hi: _row_norm_max(model, t, _box_probe(lo, hi)),
        drift=drift,
        drift_norm=lambda t, lo, hi: _drift_norm_max(model, t, _box_probe(lo, hi)),
    )

    u_next = GridFunction.from_function(grids[-1], terminal, edge=config.edge)
    dump = Path(config.dump_dir) if config.dump_dir else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
        u_next.to_csv(dump / f"u_{config.n + 1:05d}.csv")

    kept = [None] * (config.n + 2) if config.keep_grids else None
    if kept is not None:
        kept[config.n + 1] = (u_next, None)
    per_step: list = []
    workers = _threads(config)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    z_center = None
    try:
        for i in range(config.n, 0, -1):
            grid = grids[i - 1]
            t_start, t_end = tg.step(i)
            Y, Z, oob, ybar = _step(model, driver, u_next, (t_start, t_end), grid, config.band,
                                    pool, workers)
            if config.edge == "linear" and config.region != "dependence":
                # far field: transport only, no diffusion or driver on the outer layer
                edge = grid.edge_mask().ravel()
                Y[edge] = ybar[edge]
            bad = ~np.isfinite(Y)
            if np.any(bad):
                where = int(np.argmax(bad))
                at = grid.points()[where]
                if config.log_coords:
                    at = np.exp(at)
                info = {"i": i, "x": [float(v) for v in at]}
                log.warning("divergence at step %d, x=%s", i, info["x"])
                per_step.append(StepStats(i, math.inf, math.inf, math.inf, math.inf,
                                          int(oob.sum()), True))
                per_step.reverse()
                return SolveReport(
                    y0=math.nan, z0=np.full(model.d, math.nan), per_step=per_step,
                    runtime_seconds=time.perf_counter() - started, config=config.echo(),
                    problem=problem, divergent=True, divergence_at=info, warnings=warnings_,
                )
            u = GridFunction(grid, Y, edge=config.edge)
            m = u.core_maxima(log_coords=config.log_coords and config.diag_coords == "model")
            per_step.append(StepStats(i, *m, out_of_box=int(oob.sum())))
            if dump is not None:
                u.to_csv(dump / f"u_{i:05d}.csv")
            if kept is not None:
                kept[i] = (u, Z.reshape(grid.shape + (model.d,)))
            if i == 1:
                z_center = Z.reshape(grid.shape + (model.d,))
            u_next = u
    finally:
        if pool is not None:
            pool.shutdown()

    per_step.reverse()
    node = tuple(nearest_node(grids[0], x0))
    y0 = float(u_next.values[node])
    z0 = np.array(z_center[node], dtype=float)
    report = SolveReport(
        y0=y0, z0=z0, per_step=per_step, runtime_seconds=time.perf_counter() - started,
        config=config.echo(), problem=problem, warnings=warnings_,
    )
    if kept is not None:
        report.grids = kept
        report.context = {"time_grid": tg, "terminal": terminal, "log_coords": config.log_coords}
    return report


def _aligned_block(model, grid: SpatialGrid, u_next: GridFunction, h: float):
    """Slices of u_next hit exactly by the Euler flow of every node, or None."""
    if model.constant_drift is None:
        return None
    nxt = u_next.grid
    if abs(nxt.delta - grid.delta) > 1e-12 * grid.delta:
        return None
    drift = np.asarray(model.constant_drift, dtype=float)
    off = (grid.center + h * drift - nxt.center) / grid.delta
    off = off + np.asarray(nxt.outer_counts) - np.asarray(grid.outer_counts)
    k = np.rint(off)
    if np.max(np.abs(off - k)) > 1e-7:
        return None
    k = k.astype(int)
    if np.any(k < 0) or np.any(k + np.asarray(grid.shape) > np.asarray(nxt.shape)):
        return None
    return tuple(slice(a, a + n) for a, n in zip(k, grid.shape))


def _step(model, driver, u_next: GridFunction, i_step, grid: SpatialGrid, band: float,
          pool: Optional[ThreadPoolExecutor], workers: int):
    t_start, t_end = i_step
    h = t_end - t_start
    pts = grid.points()
    d = grid.d
    block = _aligned_block(model, grid, u_next, h)
    if block is not None:
        # drift-shifted grids: chi_bar lands on nodes, no Taylor adjustment needed
        full = (slice(None),)
        data = (u_next.values[block].ravel(),
                u_next.grad[full + block].reshape(d, -1).T,
                u_next.taylor_hess[full * 2 + block].reshape(d, d, -1).transpose(2, 0, 1))
        oob = np.zeros(len(pts), dtype=bool)
    else:
        chi = pts + h * model.b(t_start, pts)
        tay = taylor_eval(u_next, chi, band=band)
        data = (tay.value, tay.gradient, tay.hessian)
        oob = tay.out_of_box

    def work(sl: slice):
        return step_values(model, driver, i_step, pts[sl], tuple(a[sl] for a in data),
                           sym_tol=None)

    if pool is None or len(pts) < 2 * workers:
        Y, Z = work(slice(None))
    else:
        bounds = np.linspace(0, len(pts), workers + 1).astype(int)
        parts = list(pool.map(work, [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]))
        Y = np.concatenate([p[0] for p in parts])
        Z = np.concatenate([p[1] for p in parts])
    return Y, Z, oob, data[0]


def eval_solution(report: SolveReport, t: float, x):
    """Piecewise-constant (Y, Z) lookup from a sweep run with keep_grids."""
    if report.grids is None or report.context is None:
        raise NotImplementedError("solution lookup needs a sweep run with keep_grids")
    tg = report.context["time_grid"]
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if report.context["log_coords"]:
        x = np.log(x)
    if t >= tg.T:
        xi = report.context["terminal"]
        return float(xi(x[None, :])[0]), np.zeros(x.size)
    i = tg.interval_index(t)
    u, Z = report.grids[i]
    node = tuple(nearest_node(u.grid, x))
    return float(u.values[node]), np.array(Z[node], dtype=float)


@dataclass(frozen=True)
class StabilityVerdict:
    stable: bool
    order: Optional[int] = None
    n: Optional[int] = None
    slopes: tuple = ()
    reason: str = ""

    def __str__(self) -> str:
        if self.stable:
            return "STABLE"
        return f"UNSTABLE(order={self.order}, n={self.n}: {self.reason})"


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    lx = np.log10(np.asarray(xs, dtype=float))
    ly = np.log10(np.asarray(ys, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def stability_check(reports: Sequence[SolveReport], threshold: float = 0.1) -> StabilityVerdict:
    """Finite-range a posteriori check of the derivative maxima against n."""
    if len(reports) < 3:
        raise ValueError("need at least three reports")
    ns = [r.n for r in reports]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("reports must have strictly increasing n")
    key = reports[0].problem
    if any(r.problem != key for r in reports[1:]):
        raise ValueError("reports describe different problems")

    for r in reports:
        if r.divergent:
            return StabilityVerdict(False, None, r.n, (), "divergent sweep")
    table = np.array([r.maxima() for r in reports])
    slopes = []
    for m in range(4):
        col = table[:, m]
        if not np.all(np.isfinite(col)):
            return StabilityVerdict(False, m, ns[int(np.argmax(~np.isfinite(col)))], (),
                                    "non-finite maximum")
        if np.all(col <= 0):
            slopes.append(0.0)
            continue
        slopes.append(loglog_slope(ns, np.maximum(col, np.finfo(float).tiny)))
    for m, s in enumerate(slopes):
        if s > threshold:
            col = table[:, m]
            return StabilityVerdict(False, m, ns[int(np.argmax(col))], tuple(slopes),
                                    f"log-log slope {s:.3g} > {threshold:g}")
    return StabilityVerdict(True, slopes=tuple(slopes))


def threads_from_env(cli_value: Optional[int] = None) -> int:
    if cli_value is not None:
        return int(cli_value)
    return int(os.environ.get("QGC_THREADS", "1"))
