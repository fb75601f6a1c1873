"""Forward SDE coefficients, BSDE drivers, terminal payoffs and presets.

All callables are vectorized over a leading batch axis:

    b(t, x)      : (N, d) -> (N, d)
    sigma(t, x)  : (N, d) -> (N, d, d)
    db_dx(t, x)  : (N, d) -> (N, d, d) with [j, k] = d b^k / d x^j
    f(t, x, y, z): (N, d), (N,), (N, d) -> (N,)
    xi(x)        : (N, d) -> (N,)

The BSDE sign convention is Y_t = xi(X_T) + int_t^T f ds - int_t^T Z dW.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

Array = np.ndarray


def _fd_jacobian(b: Callable, eps: float = 1e-6) -> Callable:
    """Central finite-difference drift Jacobian, [j, k] = d b^k / d x^j."""

    def db_dx(t, x):
        x = np.asarray(x, dtype=float)
        n, d = x.shape
        out = np.empty((n, d, d))
        for j in range(d):
            step = np.zeros(d)
            step[j] = eps
            out[:, j, :] = (b(t, x + step) - b(t, x - step)) / (2 * eps)
        return out

    return db_dx


@dataclass(frozen=True)
class ForwardModel:
    """Markovian forward diffusion dX = b dt + sigma dW.

    ``drift_hessian`` (shape (N, d, d, d), index [m, j, k] = d^2 b^m / dx^j dx^k)
    is only needed for non-affine drifts. ``geometric`` carries (mu, Sigma) when
    b = diag(mu) x and sigma = diag(x) Sigma, which enables the log-coordinate solve.
    """

    d: int
    b: Callable[[float, Array], Array]
    sigma: Callable[[float, Array], Array]
    db_dx: Optional[Callable[[float, Array], Array]] = None
    drift_hessian: Optional[Callable[[float, Array], Array]] = None
    affine_drift: bool = False
    constant_drift: Optional[Array] = None
    geometric: Optional[tuple] = None
    name: str = "custom"
    notes: tuple = ()

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be a positive integer")
        if self.db_dx is None:
            object.__setattr__(self, "db_dx", _fd_jacobian(self.b))
            object.__setattr__(
                self, "notes", self.notes + ("db_dx from finite differences",)
            )

    @property
    def has_drift_hessian(self) -> bool:
        return self.affine_drift or self.drift_hessian is not None


@dataclass(frozen=True)
class Driver:
    """Driver f(t, x, y, z) with its quadratic structure constants.

    Structure condition: |f| <= l_bound + beta |y| + gamma/2 |z|^2.
    """

    f: Callable[[float, Array, Array, Array], Array]
    beta: float = 0.0
    gamma: float = 1.0
    l_bound: float = 0.0
    lipschitz_in_z: Optional[float] = None
    name: str = "custom"
    warnings: tuple = ()

    def __call__(self, t, x, y, z):
        return self.f(t, x, y, z)


@dataclass(frozen=True)
class TerminalFunction:
    xi: Callable[[Array], Array]
    sup_bound: Optional[float] = None
    smooth: bool = True
    name: str = "custom"

    def __call__(self, x):
        return self.xi(x)


@dataclass(frozen=True)
class TruncationRule:
    """Driver truncation with z-Lipschitz constant N(n) = c_N * n**alpha."""

    alpha: float = 1.0 / 3.0
    c_N: Optional[float] = None
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.c_N is not None and self.c_N <= 0:
            raise ValueError("c_N must be positive")

    def lipschitz(self, n: int) -> float:
        if self.c_N is None:
            raise ValueError("c_N is not set")
        return self.c_N * n**self.alpha

    def radius(self, n: int, gamma: float) -> float:
        return self.lipschitz(n) / gamma


def universal_bound(beta, gamma, l_bound, xi_bound, T):
    """A priori sup bound on Y and BMO bound on Z from the structure condition."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if T <= 0:
        raise ValueError("T must be positive")
    if min(beta, l_bound, xi_bound) < 0:
        raise ValueError("beta, l_bound and xi_bound must be nonnegative")
    y_bound = math.exp(beta * T) * (xi_bound + T * l_bound)
    z_bmo = math.exp(4 * gamma * y_bound) / gamma**2 * (
        3 + 6 * gamma * T * (beta * y_bound + l_bound)
    )
    return y_bound, z_bmo


def radial_clamp(z: Array, r: float) -> Array:
    """z * min(1, r/|z|) row-wise."""
    z = np.asarray(z, dtype=float)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norm > r, r / norm, 1.0)
    return z * scale


def truncate_driver(driver: Driver, rule: TruncationRule, n: int) -> Driver:
    if not rule.enabled:
        return replace(driver, warnings=driver.warnings + ("truncation disabled",))
    if driver.gamma <= 0:
        raise ValueError("truncation needs a positive gamma")
    N = rule.lipschitz(n)
    r = N / driver.gamma
    f = driver.f

    def f_trunc(t, x, y, z):
        return f(t, x, y, radial_clamp(z, r))

    lip = 2 * N if driver.lipschitz_in_z is None else min(driver.lipschitz_in_z, 2 * N)
    return replace(
        driver, f=f_trunc, lipschitz_in_z=lip, name=f"{driver.name}|trunc(N={N:.6g})"
    )


def check_structure(driver: Driver, d: int, samples: int = 10_000, seed: int = 0,
                    scale: float = 10.0) -> bool:
    """Sampled check of |f| <= l + beta|y| + gamma/2 |z|^2."""
    rng = np.random.default_rng(seed)
    t = 0.0
    x = rng.normal(scale=scale, size=(samples, d))
    y = rng.normal(scale=scale, size=samples)
    z = rng.normal(scale=scale, size=(samples, d))
    lhs = np.abs(driver(t, x, y, z))
    rhs = driver.l_bound + driver.beta * np.abs(y) + 0.5 * driver.gamma * np.sum(z * z, axis=1)
    return bool(np.all(lhs <= rhs * (1 + 1e-12) + 1e-12))


# ---------------------------------------------------------------------------
# presets


def _geometric_model(mu: Array, Sigma: Array, name: str) -> ForwardModel:
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    d = mu.size

    def b(t, x):
        return x * mu

    def sigma(t, x):
        return x[:, :, None] * Sigma[None, :, :]

    def db_dx(t, x):
        return np.broadcast_to(np.diag(mu), (x.shape[0], d, d)).copy()

    return ForwardModel(
        d=d, b=b, sigma=sigma, db_dx=db_dx, affine_drift=True,
        geometric=(mu, Sigma), name=name,
    )


def preset_qg_2d(b1, b2, sigma1, sigma2, rho, a):
    """Correlated 2-d geometric Brownian motion with driver (a/2)|z|^2."""
    if abs(rho) > 1:
        raise ValueError("|rho| must not exceed 1")
    if sigma1 <= 0 or sigma2 <= 0:
        raise ValueError("volatilities must be positive")
    L = np.array([[1.0, 0.0], [rho, math.sqrt(1 - rho * rho)]])
    Sigma = np.diag([sigma1, sigma2]) @ L
    model = _geometric_model([b1, b2], Sigma, "qg2d")

    def f(t, x, y, z):
        return 0.5 * a * np.sum(z * z, axis=-1)

    driver = Driver(f=f, beta=0.0, gamma=a if a > 0 else abs(a) or 1.0, l_bound=0.0,
                    name=f"quadratic(a={a:g})")
    return model, driver


def preset_two_rate(mu, sigma, r, R):
    """1-d GBM with the lending/borrowing replication driver."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    model = _geometric_model([mu], [[sigma]], "gbm")
    theta = (mu - r) / sigma

    def f(t, x, y, z):
        z1 = z[..., 0]
        borrow = np.maximum(-(y - z1 / sigma), 0.0)
        return -(r * y + theta * z1 - borrow * (R - r))

    lip = abs(r) + abs(mu - r) / sigma + abs(R - r) / sigma
    # |f| <= (|r| + |R-r|)|y| + lz|z| and lz|z| <= lz^2/2 + |z|^2/2
    lz = abs(theta) + abs(R - r) / sigma
    driver = Driver(f=f, beta=abs(r) + abs(R - r), gamma=1.0, l_bound=0.5 * lz * lz,
                    lipschitz_in_z=lip, name=f"two_rate(r={r:g},R={R:g})")
    return model, driver


def preset_terminal(kind: str, **params) -> TerminalFunction:
    if kind == "sin2":
        def xi(x):
            return 3.0 * (np.sin(x[:, 0]) ** 2 + np.sin(x[:, 1]) ** 2)
        return TerminalFunction(xi=xi, sup_bound=6.0, smooth=True, name="sin2")
    if kind == "capped_spread":
        def xi(x):
            return np.minimum(np.maximum(x[:, 0], 1.0), 3.0) + np.maximum(2.0 - x[:, 1], 0.0)
        return TerminalFunction(xi=xi, sup_bound=5.0, smooth=False, name="capped_spread")
    if kind == "call":
        K = float(params.get("K", 0.0))
        if K <= 0:
            raise ValueError("strike must be positive")
        def xi(x):
            return np.maximum(x[:, 0] - K, 0.0)
        return TerminalFunction(xi=xi, smooth=False, name=f"call(K={K:g})")
    if kind == "call_spread":
        K1 = float(params.get("K1", 0.0))
        K2 = float(params.get("K2", 0.0))
        c = float(params.get("c", 1.0))
        if K1 <= 0 or K2 <= 0:
            raise ValueError("strikes must be positive")
        def xi(x):
            return np.maximum(x[:, 0] - K1, 0.0) - c * np.maximum(x[:, 0] - K2, 0.0)
        sup = (K2 - K1) if c >= 1 and K2 > K1 else None
        return TerminalFunction(xi=xi, sup_bound=sup, smooth=False,
                                name=f"call_spread(K1={K1:g},K2={K2:g},c={c:g})")
    if kind == "custom":
        fn = params.get("fn")
        if fn is None:
            raise ValueError("custom terminal needs fn")
        return TerminalFunction(xi=fn, sup_bound=params.get("sup_bound"),
                                smooth=params.get("smooth", True), name="custom")
    raise ValueError(f"unknown terminal kind {kind!r}")


def log_coordinates(model: ForwardModel, driver: Driver, terminal: TerminalFunction):
    """Rewrite a geometric problem in s = log x, where the coefficients are constant.

    Z is the dW-integrand and does not change under the coordinate map.
    """
    if model.geometric is None:
        raise ValueError("log coordinates need a geometric model")
    mu, Sigma = model.geometric
    d = model.d
    drift = mu - 0.5 * np.sum(Sigma * Sigma, axis=1)

    def b(t, s):
        return np.broadcast_to(drift, s.shape).copy()

    def sigma(t, s):
        return np.broadcast_to(Sigma, (s.shape[0], d, d)).copy()

    def db_dx(t, s):
        return np.zeros((s.shape[0], d, d))

    log_model = ForwardModel(d=d, b=b, sigma=sigma, db_dx=db_dx, affine_drift=True,
                             constant_drift=drift, name=f"log({model.name})")
    f = driver.f
    log_driver = replace(driver, f=lambda t, s, y, z: f(t, np.exp(s), y, z))
    xi = terminal.xi
    log_terminal = replace(terminal, xi=lambda s: xi(np.exp(s)))
    return log_model, log_driver, log_terminal


def constant_model(d: int, drift=None, vol=None, name: str = "constant") -> ForwardModel:
    """Constant-coefficient diffusion (test and tooling helper)."""
    drift = np.zeros(d) if drift is None else np.asarray(drift, dtype=float).reshape(d)
    vol = np.zeros((d, d)) if vol is None else np.asarray(vol, dtype=float).reshape(d, d)

    return ForwardModel(
        d=d,
        b=lambda t, x: np.broadcast_to(drift, x.shape).copy(),
        sigma=lambda t, x: np.broadcast_to(vol, (x.shape[0], d, d)).copy(),
        db_dx=lambda t, x: np.zeros((x.shape[0], d, d)),
        affine_drift=True,
        constant_drift=drift,
        name=name,
    )


def zero_driver() -> Driver:
    return Driver(f=lambda t, x, y, z: np.zeros(np.shape(y)), beta=0.0, gamma=1.0,
                  l_bound=0.0, lipschitz_in_z=0.0, name="zero")


def default_c_N(driver: Driver, z0_coarse: Array) -> float:
    """gamma * (1 + |Z_0|) from a coarse (n=1) solve."""
    return driver.gamma * (1.0 + float(np.linalg.norm(z0_coarse)))

