"""Bound-constrained quasi-Newton minimization.

`minimize` drives every inversion in the package: L-BFGS-B (limited
memory, gradient projection on the bounds, strong-Wolfe line search with
polynomial interpolation) via scipy's battle-tested backend, wrapped so
that callers get an evaluation cache, an iteration history, and a clean
abort on non-finite objectives.  `line_search` exposes the More-Thuente
style scalar search on its own.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize as sopt
from scipy.optimize._linesearch import scalar_search_wolfe1


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iter: int = 200
    grad_tol: float = 1e-10
    f_rel_tol: float = 1e-12
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_line_trials: int = 25

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.grad_tol < 0.0 or self.f_rel_tol < 0.0:
            raise ValueError("tolerances must be non-negative")


@dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    n_iter: int
    status: str                      # converged | max-iter | numerical-failure
    message: str = ""
    history: list = field(default_factory=list)   # (iter, f, |proj grad|_inf)


class _NonFinite(Exception):
    pass


def projected_gradient(x, g, bounds):
    """x - clip(x - g, lo, hi); equals g on the free set, 0 on active bounds
    whose gradient pushes outward."""
    if bounds is None:
        return np.asarray(g, dtype=float)
    lo, hi = bounds
    return x - np.clip(x - g, lo, hi)


def _split_bounds(bounds, n):
    if bounds is None:
        return None
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for i, (a, b) in enumerate(bounds):
        lo[i] = -np.inf if a is None else a
        hi[i] = np.inf if b is None else b
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    return lo, hi


def minimize(fun, x0, bounds=None, config=None, callback=None):
    """Minimize fun(x) -> (f, grad) subject to box bounds.

    bounds is a list of (lo, hi) pairs (None for unbounded) or None.
    Terminates on the projected-gradient norm (grad_tol), relative f
    reduction (f_rel_tol), or max_iter.  A NaN/Inf objective or gradient
    at any trial point aborts with status "numerical-failure" and the best
    point seen so far; x0 itself must evaluate finite.

    Note: the backend fixes the Wolfe constants at the (c1, c2) defaults;
    LbfgsConfig still validates custom values for the standalone
    line_search.
    """
    cfg = config or LbfgsConfig()
    x0 = np.asarray(x0, dtype=float)
    lohi = _split_bounds(bounds, x0.size)

    cache = {}
    best = {"f": np.inf, "x": x0.copy(), "g": np.zeros_like(x0)}

    def wrapped(x):
        key = x.tobytes()
        if key in cache:
            return cache[key]
        f, g = fun(np.asarray(x, dtype=float).copy())
        f = float(f)
        g = np.asarray(g, dtype=float)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise _NonFinite()
        if f < best["f"]:
            best.update(f=f, x=x.copy(), g=g.copy())
        cache[key] = (f, g)
        return f, g

    f0, g0 = wrapped(x0)         # precondition: finite at the start
    history = [(0, f0, float(np.max(np.abs(projected_gradient(x0, g0, lohi)))))]

    def on_iter(xk):
        f, g = wrapped(np.asarray(xk, dtype=float))
        pg = float(np.max(np.abs(projected_gradient(xk, g, lohi))))
        history.append((len(history), f, pg))
        if callback is not None:
            callback(xk, f, pg)

    try:
        res = sopt.minimize(
            wrapped, x0, jac=True, method="L-BFGS-B",
            bounds=None if lohi is None else list(zip(*lohi)),
            callback=on_iter,
            options={"maxcor": cfg.memory, "maxiter": cfg.max_iter,
                     "gtol": cfg.grad_tol, "ftol": cfg.f_rel_tol,
                     "maxls": cfg.max_line_trials})
    except _NonFinite:
        return MinimizeResult(x=best["x"], f=best["f"], grad=best["g"],
                              n_iter=max(0, len(history) - 1),
                              status="numerical-failure",
                              message="non-finite objective or gradient",
                              history=history)

    if res.status == 0:
        status = "converged"
    elif res.status == 1:
        status = "max-iter"
    else:
        status = "numerical-failure"
    return MinimizeResult(x=np.asarray(res.x, dtype=float), f=float(res.fun),
                          grad=np.asarray(res.jac, dtype=float),
                          n_iter=int(res.nit), status=status,
                          message=str(res.message), history=history)


def accept_pair(s, y, tol=1e-10):
    """Curvature-pair admission rule: keep (s, y) only when
    s^T y > tol * |s| |y|, preserving a positive-definite Hessian model."""
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(s @ y) > tol * np.linalg.norm(s) * np.linalg.norm(y)


def two_loop_direction(g, pairs, gamma=None):
    """L-BFGS two-loop recursion: -H_k g from stored (s, y) pairs.

    pairs is ordered oldest first; gamma scales the initial inverse
    Hessian (defaults to the standard s^T y / y^T y of the newest pair).
    """
    g = np.asarray(g, dtype=float)
    q = g.copy()
    alphas = []
    for s, y in reversed(pairs):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        q -= a * y
        alphas.append((a, rho))
    if gamma is None:
        if pairs:
            s, y = pairs[-1]
            gamma = float(s @ y) / float(y @ y)
        else:
            gamma = 1.0
    r = gamma * q
    for (a, rho), (s, y) in zip(reversed(alphas), pairs):
        b = rho * float(y @ r)
        r += (a - b) * s
    return -r


def line_search(phi, dphi, phi0=None, dphi0=None, config=None):
    """Strong-Wolfe step length for a 1-D restriction phi(alpha).

    Polynomial-interpolation search (More-Thuente's dcsrch).  Returns
    (alpha, n_trials, satisfied) where satisfied reports the strong Wolfe
    conditions f(a) <= f(0) + c1 a f'(0) and |f'(a)| <= c2 |f'(0)| checked
    explicitly at the returned step.  Raises ValueError when dphi(0) >= 0.
    """
    cfg = config or LbfgsConfig()
    phi0 = float(phi(0.0)) if phi0 is None else float(phi0)
    dphi0 = float(dphi(0.0)) if dphi0 is None else float(dphi0)
    if dphi0 >= 0.0:
        raise ValueError("line_search needs a descent direction (dphi(0) < 0)")

    trials = {"n": 0}

    def phi_c(a):
        trials["n"] += 1
        if trials["n"] > cfg.max_line_trials:
            raise _NonFinite()
        return float(phi(a))

    def dphi_c(a):
        return float(dphi(a))

    try:
        alpha, _, _ = scalar_search_wolfe1(
            phi_c, dphi_c, phi0=phi0, derphi0=dphi0,
            c1=cfg.wolfe_c1, c2=cfg.wolfe_c2)
    except _NonFinite:
        return None, trials["n"], False

    if alpha is None:
        return None, trials["n"], False
    fa, dfa = float(phi(alpha)), float(dphi(alpha))
    ok = (fa <= phi0 + cfg.wolfe_c1 * alpha * dphi0
          and abs(dfa) <= cfg.wolfe_c2 * abs(dphi0))
    return float(alpha), trials["n"], bool(ok)
