"""Bound-constrained limited-memory BFGS with projections, and an augmented Lagrangian loop.

Both routines are problem-agnostic: they see a flat vector, box bounds and
callables.  Constraint conventions: equalities ``c(x) = 0`` and
inequalities ``h(x) <= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import ParameterError


@dataclass(frozen=True)
class LbfgsSettings:
    memory: int = 10
    max_iter: int = 200
    pgtol: float = 1e-6
    armijo: float = 1e-4
    max_halvings: int = 30
    ftol: float = 1e-10


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    pg_norm: float
    reason: str


def project(x, lo, hi):
    return np.minimum(np.maximum(x, lo), hi)


def projected_gradient(x, g, lo, hi):
    """``P(x - g) - x``: zero exactly at box-constrained stationary points."""
    return project(x - g, lo, hi) - x


def _two_loop(g, S, Y, rho):
    q = g.copy()
    alpha = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        a = r * float(s @ q)
        alpha.append(a)
        q -= a * y
    if S:
        s, y = S[-1], Y[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, r), a in zip(zip(S, Y, rho), reversed(alpha)):
        b = r * float(y @ q)
        q += (a - b) * s
    return q


def projected_lbfgs(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0, lo, hi,
                    settings: LbfgsSettings | None = None,
                    callback: Callable[[np.ndarray, float], None] | None = None) -> LbfgsResult:
    """Minimize ``fun`` over the box ``[lo, hi]``.

    Each step: variables at a bound whose gradient points outward are held
    fixed, an L-BFGS direction is computed on the rest, the trial point is
    projected onto the box, and an Armijo backtracking search (halving) is
    run on the projected path.  If the quasi-Newton direction fails the
    search, a projected steepest-descent step is tried before giving up.
    Every iterate lies inside the box.
    """
    st = settings or LbfgsSettings()
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ParameterError("lower bounds exceed upper bounds")
    x = project(np.asarray(x0, dtype=float), lo, hi)
    f, g = fun(x)
    nev = 1
    S: list[np.ndarray] = []
    Y: list[np.ndarray] = []
    rho: list[float] = []
    reason = "max_iter"
    it = 0
    pg = float(np.linalg.norm(projected_gradient(x, g, lo, hi)))
    if callback is not None:
        callback(x, f)
    while it < st.max_iter:
        if pg <= st.pgtol:
            reason = "pgtol"
            break
        it += 1
        fixed = ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
        gf = np.where(fixed, 0.0, g)
        d = -_two_loop(gf, S, Y, rho)
        d[fixed] = 0.0
        if float(d @ gf) >= 0:
            d = -gf
        accepted = False
        for direction in (d, -gf):
            t = 1.0
            for _ in range(st.max_halvings):
                xn = project(x + t * direction, lo, hi)
                step = xn - x
                if not np.any(step):
                    break
                fn, gn = fun(xn)
                nev += 1
                if fn <= f + st.armijo * float(g @ step):
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
            S.clear(), Y.clear(), rho.clear()
        if not accepted:
            reason = "line_search"
            break
        s = xn - x
        y = gn - g
        sy = float(s @ y)
        if sy > 1e-12 * max(1.0, float(y @ y)):
            S.append(s)
            Y.append(y)
            rho.append(1.0 / sy)
            if len(S) > st.memory:
                S.pop(0), Y.pop(0), rho.pop(0)
        f_prev = f
        x, f, g = xn, fn, gn
        pg = float(np.linalg.norm(projected_gradient(x, g, lo, hi)))
        if callback is not None:
            callback(x, f)
        if abs(f_prev - f) <= st.ftol * max(1.0, abs(f)):
            reason = "ftol"
            break
    return LbfgsResult(x, f, g, it, nev, pg, reason)


# ---------------------------------------------------------------------------
# augmented Lagrangian
# ---------------------------------------------------------------------------

@dataclass
class AlState:
    """Multipliers and penalties of the augmented Lagrangian, per constraint component."""

    lam_eq: np.ndarray
    lam_in: np.ndarray
    mu_eq: np.ndarray
    mu_in: np.ndarray
    outer: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def initial(cls, n_eq: int, n_in: int, mu0: float = 10.0) -> "AlState":
        if mu0 <= 0:
            raise ParameterError("initial penalty must be positive")
        return cls(np.zeros(n_eq), np.zeros(n_in), np.full(n_eq, mu0), np.full(n_in, mu0))


@dataclass(frozen=True)
class AlSettings:
    mu0: float = 10.0
    growth: float = 5.0
    shrink_required: float = 4.0
    max_outer: int = 15
    mu_max: float = 1e8
    # relative objective change between outer iterations that counts as settled
    f_tol: float = 1e-4
    inner: LbfgsSettings = field(default_factory=LbfgsSettings)


def al_value(f, gf, c, Jc, h, Jh, st: AlState):
    """Augmented Lagrangian value and gradient.

    Equalities: ``lam c + mu/2 c^2``.  Inequalities use the shifted form
    ``(max(0, lam + mu h)^2 - lam^2) / (2 mu)``.
    """
    val = f + float(st.lam_eq @ c) + 0.5 * float(st.mu_eq @ (c * c))
    grad = gf + Jc.T @ (st.lam_eq + st.mu_eq * c)
    shifted = np.maximum(0.0, st.lam_in + st.mu_in * h)
    val += float(((shifted ** 2 - st.lam_in ** 2) / (2.0 * st.mu_in)).sum())
    grad = grad + Jh.T @ shifted
    return val, grad


def violation(c, h, st: AlState) -> tuple[np.ndarray, np.ndarray]:
    """Per-component violation: ``|c|`` and ``max(h, -lam/mu)`` for complementarity."""
    return np.abs(c), np.abs(np.maximum(h, -st.lam_in / st.mu_in))


@dataclass
class AlResult:
    x: np.ndarray
    state: AlState
    outer: int
    inner: int
    evaluations: int
    max_violation: list


def augmented_lagrangian(evaluate, x0, lo, hi, n_eq: int, n_in: int,
                         settings: AlSettings | None = None, tol_eq=1e-3, tol_in=1e-3,
                         is_feasible=None, rebase=None, observe=None) -> AlResult:
    """Outer multiplier/penalty loop around ``projected_lbfgs``.

    ``evaluate(x) -> (f, grad f, c, J_c, h, J_h)``.  ``rebase(x) -> x`` lets
    the caller re-center manifold increments between outer iterations
    (the bounds are unchanged).  ``observe(x)`` is called at every accepted
    inner iterate, e.g. to keep the best feasible point seen.  The loop stops
    when ``is_feasible(x)`` holds and the objective stopped moving, or after
    ``max_outer`` iterations.  A component's penalty grows by ``growth``
    whenever its violation did not shrink by ``shrink_required``.
    """
    st_set = settings or AlSettings()
    st = AlState.initial(n_eq, n_in, st_set.mu0)
    x = project(np.asarray(x0, dtype=float), lo, hi)
    prev_ve = prev_vi = None
    f_prev = None
    inner_total = 0
    nev = 0
    trace = []

    def al_fun(z):
        f, gf, c, Jc, h, Jh = evaluate(z)
        return al_value(f, gf, c, Jc, h, Jh, st)

    cb = None if observe is None else (lambda z, _v: observe(z))
    for k in range(st_set.max_outer):
        st.outer = k
        if rebase is not None:
            x = project(rebase(x), lo, hi)
        res = projected_lbfgs(al_fun, x, lo, hi, st_set.inner, cb)
        x = res.x
        inner_total += res.iterations
        nev += res.evaluations
        f, _, c, _, h, _ = evaluate(x)
        ve, vi = violation(c, h, st)
        vmax = max(float(ve.max(initial=0.0)), float(np.maximum(h, 0.0).max(initial=0.0)))
        trace.append(vmax)
        st.history.append((float(f), vmax, float(st.mu_eq.max(initial=0.0)),
                           float(st.mu_in.max(initial=0.0))))
        feasible = is_feasible(x) if is_feasible is not None else (
            float(ve.max(initial=0.0)) <= tol_eq and float(np.maximum(h, 0).max(initial=0.0)) <= tol_in)
        if feasible and f_prev is not None and abs(f - f_prev) <= st_set.f_tol * max(1.0, abs(f)):
            break
        f_prev = f
        st.lam_eq = st.lam_eq + st.mu_eq * c
        st.lam_in = np.maximum(0.0, st.lam_in + st.mu_in * h)
        if prev_ve is not None:
            grow_e = (ve > prev_ve / st_set.shrink_required) & (ve > tol_eq)
            grow_i = (vi > prev_vi / st_set.shrink_required) & (vi > tol_in)
            st.mu_eq = np.where(grow_e, np.minimum(st.mu_eq * st_set.growth, st_set.mu_max), st.mu_eq)
            st.mu_in = np.where(grow_i, np.minimum(st.mu_in * st_set.growth, st_set.mu_max), st.mu_in)
        prev_ve, prev_vi = ve, vi
    return AlResult(x, st, st.outer + 1, inner_total, nev, trace)
