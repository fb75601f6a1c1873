"""Reference values: exponential-transform closed form, Monte Carlo, Black-Scholes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import logsumexp, ndtr

from .model import TerminalFunction, preset_terminal


class QuadratureNotConverged(RuntimeError):
    def __init__(self, value: float, refined: float):
        super().__init__(f"quadrature not converged: {value!r} vs {refined!r}")
        self.value = value
        self.refined = refined


@dataclass(frozen=True)
class QuadratureSpec:
    """Lognormal 2-d model with driver (a/2)|z|^2 and a terminal function.

    ``order`` is the number of trapezoid nodes per standard deviation on each
    Gaussian axis (``method="trapezoid"``) or the Gauss-Hermite order
    (``method="hermite"``).
    """

    a: float
    b: tuple = (0.05, 0.05)
    sigma: tuple = (0.5, 0.5)
    rho: float = 0.3
    T: float = 1.0
    x0: tuple = (1.0, 1.0)
    terminal: TerminalFunction = field(default_factory=lambda: preset_terminal("sin2"))
    order: int = 64
    method: str = "trapezoid"
    width: float = 8.5

    def __post_init__(self):
        if self.order < 2:
            raise ValueError("quadrature order must be at least 2")
        if self.a == 0:
            raise ValueError("a must be nonzero")
        if self.method not in ("trapezoid", "hermite"):
            raise ValueError(f"unknown quadrature method {self.method!r}")


def hermite_rule(order: int):
    """Physicists' Gauss-Hermite nodes and weights (sum of weights = sqrt(pi))."""
    return np.polynomial.hermite.hermgauss(order)


def terminal_points(spec: QuadratureSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """X_T for standard normal pairs (u, v)."""
    b = np.asarray(spec.b, dtype=float)
    s = np.asarray(spec.sigma, dtype=float)
    x0 = np.asarray(spec.x0, dtype=float)
    sq = math.sqrt(spec.T)
    g1 = sq * u
    g2 = sq * (spec.rho * u + math.sqrt(1 - spec.rho**2) * v)
    drift = np.log(x0) + (b - 0.5 * s * s) * spec.T
    return np.stack([np.exp(drift[0] + s[0] * g1), np.exp(drift[1] + s[1] * g2)], axis=-1)


def _log_mean_hermite(spec: QuadratureSpec, order: int) -> float:
    nodes, weights = hermite_rule(order)
    s = math.sqrt(2.0) * nodes
    U, V = np.meshgrid(s, s, indexing="ij")
    W = np.multiply.outer(weights, weights) / math.pi
    X = terminal_points(spec, U.ravel(), V.ravel())
    return float(logsumexp(spec.a * spec.terminal(X), b=W.ravel()))


def _log_mean_trapezoid(spec: QuadratureSpec, order: int, block: int = 1024) -> float:
    # integrate over the correlated pair (G1, G2)/sqrt(T) on a uniform lattice
    step = 1.0 / order
    k = int(math.ceil(spec.width * order))
    g = step * np.arange(-k, k + 1)
    b = np.asarray(spec.b, dtype=float)
    s = np.asarray(spec.sigma, dtype=float)
    m = np.log(np.asarray(spec.x0, dtype=float)) + (b - 0.5 * s * s) * spec.T
    sq = math.sqrt(spec.T)
    x1 = np.exp(m[0] + s[0] * sq * g)
    x2 = np.exp(m[1] + s[1] * sq * g)
    rho = spec.rho
    rp2 = 1.0 - rho * rho
    if rp2 <= 0:
        raise ValueError("degenerate correlation needs the hermite method")
    log_c = math.log(step * step / (2 * math.pi * math.sqrt(rp2)))
    peaks = []
    sums = []
    for i0 in range(0, g.size, block):
        gi = g[i0:i0 + block]
        G1, G2 = np.meshgrid(gi, g, indexing="ij")
        log_phi = -(G1 * G1 - 2 * rho * G1 * G2 + G2 * G2) / (2 * rp2)
        P = np.empty(G1.shape + (2,))
        P[..., 0] = x1[i0:i0 + block, None]
        P[..., 1] = x2[None, :]
        e = spec.a * spec.terminal(P.reshape(-1, 2)) + log_phi.ravel()
        peak = float(np.max(e))
        peaks.append(peak)
        sums.append(float(np.sum(np.exp(e - peak))))
    top = max(peaks)
    total = sum(v * math.exp(p - top) for p, v in zip(peaks, sums))
    return top + math.log(total) + log_c


def _value(spec: QuadratureSpec, order: int) -> float:
    if spec.method == "hermite":
        return _log_mean_hermite(spec, order) / spec.a
    return _log_mean_trapezoid(spec, order) / spec.a


def qg_closed_form(spec: QuadratureSpec, tol: float = 1e-8, return_check: bool = False):
    """Y_0 = (1/a) log E[exp(a xi(X_T))] by tensor quadrature in Gaussian coordinates.

    The result is checked against the rule with twice the order; a relative gap
    above ``tol`` raises QuadratureNotConverged.
    """
    value = _value(spec, spec.order)
    refined = _value(spec, 2 * spec.order)
    gap = abs(value - refined)
    if not gap <= tol * max(abs(value), 1e-300):
        raise QuadratureNotConverged(value, refined)
    if return_check:
        return value, gap
    return value


def closed_form_slice(spec: QuadratureSpec, x, tau: float):
    """Y(T - tau, x) for a batch of starting points x (N, 2)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.array([
        _value(replace(spec, T=tau, x0=tuple(start)), spec.order) for start in x
    ])


def mc_check(spec: QuadratureSpec, paths: int, seed: int, chunk: int = 1 << 20):
    """Plain Monte Carlo of (1/a) log E[exp(a xi(X_T))] with a delta-method error.

    Chunk k draws from Philox(key=seed) jumped k times, so the estimate does not
    depend on how chunks are scheduled.
    """
    if paths < 10_000:
        raise ValueError("need at least 10^4 paths")
    count = 0
    logs = []
    sums = []
    sumsq = []
    k = 0
    while count < paths:
        m = min(chunk, paths - count)
        gen = np.random.Generator(np.random.Philox(key=seed).jumped(k))
        uv = gen.standard_normal((m, 2))
        X = terminal_points(spec, uv[:, 0], uv[:, 1])
        e = spec.a * spec.terminal(X)
        shift = float(np.max(e))
        w = np.exp(e - shift)
        logs.append(shift)
        sums.append(float(np.sum(w)))
        sumsq.append(float(np.sum(w * w)))
        count += m
        k += 1
    ref = max(logs)
    scale = np.exp(np.asarray(logs) - ref)
    s1 = float(np.sum(np.asarray(sums) * scale))
    s2 = float(np.sum(np.asarray(sumsq) * scale**2))
    mean = s1 / paths
    var = max(s2 / paths - mean * mean, 0.0)
    estimate = (ref + math.log(mean)) / spec.a
    se = math.sqrt(var / paths) / (abs(spec.a) * mean)
    if var <= 1e-28 * mean * mean:
        se = 0.0
    return estimate, se


def black_scholes_call(x0, K, sigma, rate, T) -> float:
    if sigma <= 0 or T <= 0 or K <= 0:
        raise ValueError("sigma, T and K must be positive")
    sq = sigma * math.sqrt(T)
    d1 = (math.log(x0 / K) + (rate + 0.5 * sigma * sigma) * T) / sq
    d2 = d1 - sq
    return float(x0 * ndtr(d1) - K * math.exp(-rate * T) * ndtr(d2))


def black_scholes_put(x0, K, sigma, rate, T) -> float:
    sq = sigma * math.sqrt(T)
    d1 = (math.log(x0 / K) + (rate + 0.5 * sigma * sigma) * T) / sq
    d2 = d1 - sq
    return float(K * math.exp(-rate * T) * ndtr(-d2) - x0 * ndtr(-d1))


REFERENCE_VALUES = {
    "call_spread_gobet": (2.96, 0.01, "regression Monte Carlo benchmark"),
    "extreme_R301_n181": (6.43, 0.05, "connecting scheme, n=181"),
    "extreme_R301_limit": (6.38, 0.05, "connecting scheme, large-n limit"),
}


def reference_value(case_id: str):
    try:
        return REFERENCE_VALUES[case_id]
    except KeyError:
        raise KeyError(f"unknown reference case {case_id!r}") from None
