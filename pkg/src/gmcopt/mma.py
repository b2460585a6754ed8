"""Method of moving asymptotes for ``min f0(x) s.t. f_i(x) <= 0, xmin <= x <= xmax``.

Convex separable approximations with asymptote updates driven by the last two iterates;
the subproblem is solved through its dual over the constraint multipliers. Each
constraint gets an elastic variable ``y_i`` with a large linear cost so the subproblem
is always feasible.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize


class MMAError(RuntimeError):
    pass


@dataclass
class MMAState:
    """Asymptotes and iterate history carried between MMA steps."""

    n: int
    low: np.ndarray | None = None
    upp: np.ndarray | None = None
    xold1: np.ndarray | None = None
    xold2: np.ndarray | None = None
    iteration: int = 0
    history: list = field(default_factory=list)


@dataclass(frozen=True)
class MMASettings:
    asy_init: float = 0.5
    asy_incr: float = 1.2
    asy_decr: float = 0.7
    move: float = 0.5
    raa0: float = 1e-5
    c: float = 1000.0
    d: float = 1.0


def _asymptotes(x, xmin, xmax, st: MMAState, s: MMASettings):
    span = xmax - xmin
    if st.iteration < 2 or st.xold2 is None:
        low = x - s.asy_init * span
        upp = x + s.asy_init * span
    else:
        sign = (x - st.xold1) * (st.xold1 - st.xold2)
        gamma = np.where(sign < 0, s.asy_decr, np.where(sign > 0, s.asy_incr, 1.0))
        low = x - gamma * (st.xold1 - st.low)
        upp = x + gamma * (st.upp - st.xold1)
        low = np.clip(low, x - 10 * span, x - 0.01 * span)
        upp = np.clip(upp, x + 0.01 * span, x + 10 * span)
    return low, upp


def _approx(df, x, low, upp, span, raa0):
    pos = np.maximum(df, 0.0)
    neg = np.maximum(-df, 0.0)
    reg = raa0 / span
    p = (upp - x) ** 2 * (1.001 * pos + 0.001 * neg + reg)
    q = (x - low) ** 2 * (0.001 * pos + 1.001 * neg + reg)
    return p, q


def mma_step(x, f0, df0, fc, dfc, xmin, xmax, state: MMAState, settings: MMASettings = MMASettings()):
    """One MMA update; returns the new x and advances ``state`` in place.

    ``fc`` (m,) are constraint values (feasible when <= 0) and ``dfc`` (m, n) their
    gradients. ``f0`` is accepted for the history record only.
    """
    x = np.asarray(x, dtype=float)
    df0 = np.asarray(df0, dtype=float)
    fc = np.atleast_1d(np.asarray(fc, dtype=float))
    dfc = np.asarray(dfc, dtype=float).reshape(len(fc), -1)
    xmin = np.broadcast_to(np.asarray(xmin, float), x.shape)
    xmax = np.broadcast_to(np.asarray(xmax, float), x.shape)
    if not (np.all(np.isfinite(df0)) and np.all(np.isfinite(dfc)) and np.all(np.isfinite(fc))):
        raise MMAError("non-finite objective or constraint gradient")
    if not np.all(xmax > xmin):
        raise MMAError("box bounds must satisfy xmin < xmax")
    s = settings
    span = xmax - xmin
    low, upp = _asymptotes(x, xmin, xmax, state, s)
    alpha = np.maximum.reduce([xmin, low + 0.1 * (x - low), x - s.move * span])
    beta = np.minimum.reduce([xmax, upp - 0.1 * (upp - x), x + s.move * span])
    p0, q0 = _approx(df0, x, low, upp, span, s.raa0)
    P, Q = _approx(dfc, x[None], low[None], upp[None], span[None], s.raa0)
    r = fc - np.sum(P / (upp - x) + Q / (x - low), axis=1)
    m = len(fc)

    def primal(lam):
        pl = p0 + lam @ P
        ql = q0 + lam @ Q
        sp_, sq = np.sqrt(pl), np.sqrt(ql)
        xs = np.clip((sp_ * low + sq * upp) / (sp_ + sq), alpha, beta)
        y = np.maximum(0.0, (lam - s.c) / s.d)
        return xs, y, pl, ql

    def neg_dual(lam):
        xs, y, pl, ql = primal(lam)
        g = np.sum(P / (upp - xs) + Q / (xs - low), axis=1) + r
        W = np.sum(pl / (upp - xs) + ql / (xs - low)) + lam @ (r - y) + s.c * y.sum() + 0.5 * s.d * (y @ y)
        return -W, -(g - y)

    if m:
        res = minimize(neg_dual, np.zeros(m), jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * m, options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-12})
        lam = res.x
    else:
        lam = np.zeros(0)
    xnew, y, _, _ = primal(lam)
    state.xold2 = state.xold1
    state.xold1 = x.copy()
    state.low, state.upp = low, upp
    state.iteration += 1
    state.history.append({"f0": float(f0), "max_constraint": float(fc.max()) if m else None, "multipliers": lam.tolist()})
    return xnew
