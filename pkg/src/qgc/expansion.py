"""One-step short-term expansion on an interval [t_start, t_end].

The terminal data of the interval enter through ``(value, gradient, hessian)``,
the next grid function and its derivatives at the Euler endpoint
chi_bar(t_end, x) = x + h b(t_start, x).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Driver, ForwardModel

Array = np.ndarray


@dataclass(frozen=True)
class ExpansionStep:
    t_start: float
    t_end: float
    x: Array
    chi_bar: Array
    y_bar: float
    y1_bar: Array
    G2_bar: Array
    y20_bar: float
    Y_hat: float
    Z_hat: Array

    @property
    def h(self) -> float:
        return self.t_end - self.t_start


def _batch(x) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def euler_flow(model: ForwardModel, t_start: float, t: float, x) -> Array:
    if t < t_start:
        raise ValueError("t must not precede t_start")
    X, single = _batch(x)
    out = X + (t - t_start) * model.b(t_start, X)
    return out[0] if single else out


def coeff_bundle(model: ForwardModel, i_step, t, x, u_next_at_chi,
                 sym_tol: Optional[float] = 1e-10,
                 with_G2: bool = True):
    """Euler-approximated coefficient functions at time t in I_i.

    Returns ``(y_bar, y1_bar, G2_bar, y20_bar)``; batched when x is (N, d).
    ``G2_bar`` is None when ``with_G2`` is false.
    """
    t_start, t_end = i_step
    if not t_start <= t <= t_end:
        raise ValueError("t must lie in the step interval")
    X, single = _batch(x)
    value, grad, hess = u_next_at_chi
    value = np.atleast_1d(np.asarray(value, dtype=float))
    grad = np.asarray(grad, dtype=float).reshape(X.shape)
    hess = np.asarray(hess, dtype=float).reshape(X.shape + (X.shape[1],))
    if sym_tol is not None:
        scale = np.max(np.abs(hess)) if hess.size else 0.0
        if np.max(np.abs(hess - hess.transpose(0, 2, 1)), initial=0.0) > sym_tol * max(scale, 1.0):
            raise ValueError("hessian input must be symmetric")

    h = t_end - t_start
    rem = t_end - t
    chi = X + h * model.b(t_start, X)
    if model.constant_drift is not None:
        y1 = grad
        G2 = hess if with_G2 else None
    else:
        J = model.db_dx(t_end, chi)  # [j, k] = d_j b^k
        y1 = grad + rem * (J @ grad[:, :, None])[:, :, 0]
        G2 = None
        if with_G2:
            JH = J @ hess
            G2 = hess + rem * (JH + JH.transpose(0, 2, 1))
            if not model.affine_drift and model.drift_hessian is not None:
                D2b = model.drift_hessian(t_end, chi)  # [m, j, k]
                G2 = G2 + rem * np.einsum("nmjk,nm->njk", D2b, grad)
    S = model.sigma(t_end, chi)
    cov = S @ S.transpose(0, 2, 1)
    y20 = rem * np.einsum("njk,nkj->n", hess, cov)
    if single:
        return value[0], y1[0], G2[0], y20[0]
    return value, y1, G2, y20


def step_values(model: ForwardModel, driver: Driver, i_step, x, u_next_at_chi,
                sym_tol: Optional[float] = 1e-10):
    """Node values (Y_hat, Z_hat) at t_start; batched when x is (N, d)."""
    t_start, t_end = i_step
    X, single = _batch(x)
    y_bar, y1, _, y20 = coeff_bundle(model, i_step, t_start, X, u_next_at_chi, sym_tol=sym_tol,
                                     with_G2=False)
    h = t_end - t_start
    S0 = model.sigma(t_start, X)
    Z = (y1[:, None, :] @ S0)[:, 0, :]
    y_mid = y_bar + 0.5 * y20
    with np.errstate(all="ignore"):
        Y = y_mid + h * driver(t_start, X, y_mid, Z)
    if single:
        return Y[0], Z[0]
    return Y, Z


def expansion_step(model: ForwardModel, driver: Driver, i_step, x, u_next_at_chi) -> ExpansionStep:
    """Full coefficient bundle and node values for a single point."""
    t_start, t_end = i_step
    x = np.asarray(x, dtype=float)
    chi = euler_flow(model, t_start, t_end, x)
    y_bar, y1, G2, y20 = coeff_bundle(model, i_step, t_start, x, u_next_at_chi)
    Y, Z = step_values(model, driver, i_step, x, u_next_at_chi)
    return ExpansionStep(t_start=t_start, t_end=t_end, x=x, chi_bar=chi, y_bar=float(y_bar),
                         y1_bar=y1, G2_bar=G2, y20_bar=float(y20), Y_hat=float(Y), Z_hat=Z)
