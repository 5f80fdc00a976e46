"""Reverse-mode tape over coarse-grained array operations.

Simulators record one node per array operation or solver call.  Each node
stores a vector-Jacobian closure, so the backward sweep is a single
reverse pass over the recording order (deterministic, ordered
accumulation).  Implicit solves -- linear systems and Newton solves inside
a time step -- record a node whose backward pass solves the transposed
linearized system,

    (dF/du)^T w = u_bar,    theta_bar = -w^T (dF/dtheta),

with dF/dtheta applied as a hand-written vector-Jacobian product per
residual family, never materialized.
"""

import numpy as np

from . import nn as _nn


class Var:
    """Handle to a taped value."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape, vid, value):
        self.tape = tape
        self.id = vid
        self.value = value

    # convenience arithmetic; constants may appear on either side
    def __add__(self, other):
        return add(self.tape, self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self.tape, self, other)

    def __rsub__(self, other):
        return sub(self.tape, other, self)

    def __mul__(self, other):
        return mul(self.tape, self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self.tape, self, -1.0)

    def __truediv__(self, const):
        return scale(self.tape, self, 1.0 / const)

    def __repr__(self):
        return f"Var(id={self.id}, shape={np.shape(self.value)})"


def value_of(x):
    return x.value if isinstance(x, Var) else x


class Tape:
    def __init__(self):
        self.nodes = []
        self._n = 0

    def leaf(self, value):
        v = Var(self, self._n, np.asarray(value, dtype=float))
        self._n += 1
        return v

    def record(self, value, parents, vjp):
        """New var computed from `parents` (Vars only) with cotangent rule
        vjp(out_bar) -> tuple of cotangents aligned with parents."""
        v = Var(self, self._n, np.asarray(value, dtype=float))
        self._n += 1
        self.nodes.append((v.id, tuple(p.id for p in parents), vjp))
        return v

    def backward(self, var, seed=None):
        """Cotangents of every reachable var w.r.t. `var`.

        Accumulation follows the recording order reversed, so results are
        bitwise reproducible across runs.
        """
        grads = {var.id: np.asarray(1.0 if seed is None else seed, dtype=float)}
        for out_id, parent_ids, vjp in reversed(self.nodes):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            cots = vjp(g)
            for pid, c in zip(parent_ids, cots):
                if c is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + c
                else:
                    grads[pid] = np.asarray(c, dtype=float)
        return Grads(grads)


class Grads:
    """Gradient lookup; vars the loss never touched get exact zeros."""

    def __init__(self, table):
        self._table = table

    def of(self, var):
        g = self._table.get(var.id)
        if g is None:
            return np.zeros_like(np.asarray(var.value, dtype=float))
        return np.asarray(g, dtype=float).reshape(np.shape(var.value))


def _unbroadcast(g, shape):
    g = np.asarray(g, dtype=float)
    if g.size == int(np.prod(shape)):
        return g.reshape(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _binary(tape, a, b, out, vjp_a, vjp_b):
    parents, slots = [], []
    if isinstance(a, Var):
        parents.append(a)
        slots.append(0)
    if isinstance(b, Var):
        parents.append(b)
        slots.append(1)
    sa = np.shape(value_of(a))
    sb = np.shape(value_of(b))

    def vjp(g):
        outs = []
        for s in slots:
            outs.append(_unbroadcast(vjp_a(g), sa) if s == 0
                        else _unbroadcast(vjp_b(g), sb))
        return tuple(outs)

    return tape.record(out, parents, vjp)


# -- elementwise / linear primitives ---------------------------------------

def add(tape, a, b):
    va, vb = value_of(a), value_of(b)
    return _binary(tape, a, b, va + vb, lambda g: g, lambda g: g)


def sub(tape, a, b):
    va, vb = value_of(a), value_of(b)
    return _binary(tape, a, b, va - vb, lambda g: g, lambda g: -g)


def mul(tape, a, b):
    va, vb = value_of(a), value_of(b)
    return _binary(tape, a, b, va * vb, lambda g: g * vb, lambda g: g * va)


def scale(tape, a, c):
    c = float(c)
    return tape.record(value_of(a) * c, [a], lambda g: (g * c,))


def reciprocal(tape, a):
    va = value_of(a)
    inv = 1.0 / va
    return tape.record(inv, [a], lambda g: (-g * inv * inv,))


def softplus(tape, a):
    va = value_of(a)
    out = np.logaddexp(0.0, va)
    sig = 1.0 / (1.0 + np.exp(-va))
    return tape.record(out, [a], lambda g: (g * sig,))


def matvec(tape, mat, x):
    """Constant matrix (dense or scipy sparse) times a taped vector."""
    return tape.record(mat @ value_of(x), [x], lambda g: (mat.T @ g,))


def gather(tape, x, idx):
    if isinstance(idx, slice):
        idx = np.arange(idx.start or 0, idx.stop, idx.step or 1)
    idx = np.asarray(idx, dtype=int)
    vx = value_of(x)

    def vjp(g):
        out = np.zeros_like(vx)
        np.add.at(out, idx, g)
        return (out,)

    return tape.record(vx[idx], [x], vjp)


def concat_cols(tape, a, b):
    va, vb = value_of(a), value_of(b)
    ka = va.shape[1]

    def vjp(g):
        return g[:, :ka], g[:, ka:]

    return tape.record(np.hstack([va, vb]), [a, b], vjp)


def sum_squares(tape, a):
    va = value_of(a)
    return tape.record(np.sum(va * va), [a], lambda g: (2.0 * g * va,))


def point_matvec(tape, a, x):
    """Per-point product (n,3,3) @ (n,3); either factor may be taped."""
    va, vx = value_of(a), value_of(x)
    out = np.einsum("nij,nj->ni", va, vx)
    return _binary(tape, a, x, out,
                   lambda g: np.einsum("ni,nj->nij", g, vx),
                   lambda g: np.einsum("nij,ni->nj", va, g))


def point_matmat(tape, a, b):
    """(n,3,3) @ (3,3) per point; either factor may be taped."""
    va, vb = value_of(a), value_of(b)
    out = np.einsum("nik,kj->nij", va, vb)
    return _binary(tape, a, b, out,
                   lambda g: np.einsum("nij,kj->nik", g, vb),
                   lambda g: np.einsum("nik,nij->kj", va, g))


# -- domain-specific explicit nodes -----------------------------------------

def mlp(tape, spec, w, x):
    """Taped network evaluation; w and/or x may be Vars."""
    cache = []
    out = _nn.mlp_forward(spec, value_of(w), value_of(x), cache=cache)

    def vjp_w(g):
        return _nn.mlp_vjp(spec, value_of(w), cache, g)[1]

    def vjp_x(g):
        return _nn.mlp_vjp(spec, value_of(w), cache, g)[0]

    return _binary(tape, w, x, out, vjp_w, vjp_x)


def spd(tape, p, n=3):
    vp = value_of(p)
    out = _nn.spd_from_param(vp, n=n)
    return tape.record(out, [p],
                       lambda g: (_nn.spd_from_param_vjp(vp, g, n=n),))


def plane_strain(tape, lam, mu):
    """Taped plane-strain elasticity matrix from scalar Lamé Vars."""
    lv = float(np.asarray(value_of(lam)).reshape(()))
    mv = float(np.asarray(value_of(mu)).reshape(()))
    out = np.array([[lv + 2.0 * mv, lv, 0.0],
                    [lv, lv + 2.0 * mv, 0.0],
                    [0.0, 0.0, mv]])

    def vjp_lam(g):
        return g[0, 0] + g[0, 1] + g[1, 0] + g[1, 1]

    def vjp_mu(g):
        return 2.0 * g[0, 0] + 2.0 * g[1, 1] + g[2, 2]

    return _binary(tape, lam, mu, out, vjp_lam, vjp_mu)


_E_TRACE = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 0.0]])
_E_DEV = np.eye(3) - _E_TRACE


def relax(tape, c):
    """S = (I + c P)^{-1} per point from taped relaxation numbers c (n,)."""
    vc = value_of(c)
    f1 = 1.0 / (1.0 + vc / 3.0)
    f2 = 1.0 / (1.0 + vc)
    out = (_E_TRACE[None] * f1[:, None, None]
           + _E_DEV[None] * f2[:, None, None])

    def vjp(g):
        d1 = -(f1 * f1) / 3.0 * np.einsum("nij,ij->n", g, _E_TRACE)
        d2 = -(f2 * f2) * np.einsum("nij,ij->n", g, _E_DEV)
        return (d1 + d2,)

    return tape.record(out, [c], vjp)


def porosity(tape, eps_v, phi0):
    """phi = 1 - (1 - phi0) exp(-eps_v), per cell."""
    ve = value_of(eps_v)
    core = (1.0 - phi0) * np.exp(-ve)
    return tape.record(1.0 - core, [eps_v], lambda g: (g * core,))


# -- implicit solves ---------------------------------------------------------

def record_implicit(tape, solution, parents, adjoint_solve, param_vjp):
    """Record u solving F(theta, u) = 0.

    adjoint_solve(u_bar) must return w with (dF/du)^T w = u_bar;
    param_vjp(w) must return the tuple -w^T dF/dtheta_i aligned with
    `parents` (minus sign included).
    """

    def vjp(g):
        return param_vjp(adjoint_solve(g))

    return tape.record(solution, parents, vjp)


def linear_solve(tape, lu, rhs, extra_parents=(), matrix_vjp=None):
    """Taped solve A x = b with A constant w.r.t. taped quantities.

    `lu` is a scipy splu factorization of A; the adjoint uses the
    transpose solve.  When A itself depends on taped parents, list them in
    extra_parents and supply matrix_vjp(w, x) -> their cotangents
    (the -w^T (dA/dtheta) x terms).
    """
    x = lu.solve(np.asarray(value_of(rhs), dtype=float))
    parents = ([rhs] if isinstance(rhs, Var) else []) + list(extra_parents)

    def vjp(g):
        w = lu.solve(g, trans="T")
        outs = []
        if isinstance(rhs, Var):
            outs.append(w)
        if matrix_vjp is not None:
            outs.extend(matrix_vjp(w, x))
        return tuple(outs)

    return tape.record(x, parents, vjp)


def implicit_root(tape, f, dfdx, dfdtheta, theta, x_init,
                  tol=1e-12, max_iter=100):
    """Solve F(theta, x) = 0 by Newton and record the implicit adjoint.

    f(theta, x) -> (k,) residual; dfdx -> (k, k); dfdtheta -> (k, m).
    theta may be a Var (gradient flows to it) or a plain array.
    """
    tv = np.atleast_1d(np.asarray(value_of(theta), dtype=float))
    x = np.atleast_1d(np.asarray(x_init, dtype=float))
    for _ in range(max_iter):
        r = np.atleast_1d(f(tv, x))
        if np.max(np.abs(r)) < tol:
            break
        x = x - np.linalg.solve(np.atleast_2d(dfdx(tv, x)), r)
    else:
        raise RuntimeError("implicit_root: Newton did not converge")

    jx = np.atleast_2d(dfdx(tv, x))
    jt = np.atleast_2d(dfdtheta(tv, x))

    if not isinstance(theta, Var):
        return tape.leaf(x)

    def adjoint_solve(g):
        return np.linalg.solve(jx.T, np.atleast_1d(g))

    def param_vjp(w):
        out = -(w @ jt)
        return (out.reshape(np.shape(theta.value)),)

    return record_implicit(tape, x, [theta], adjoint_solve, param_vjp)


def time_loop_adjoint(tape, loss):
    """Backward sweep over a recorded rollout; returns a Grads table.

    The tape already holds one implicit node per step solve plus the
    explicit state updates, so reverse iteration *is* the discrete adjoint
    of the time loop (full state storage, no checkpointing).
    """
    return tape.backward(loss)


# -- named parameter packing -------------------------------------------------

class Packing:
    """Deterministic flat packing of named parameter segments."""

    def __init__(self, segments):
        self.names = [n for n, _ in segments]
        self.sizes = [int(s) for _, s in segments]
        offs = np.concatenate([[0], np.cumsum(self.sizes)])
        self._slices = {n: slice(int(offs[i]), int(offs[i + 1]))
                        for i, n in enumerate(self.names)}
        self.size = int(offs[-1])

    def slice_of(self, name):
        return self._slices[name]

    def pack(self, table):
        out = np.empty(self.size)
        for n in self.names:
            out[self._slices[n]] = np.asarray(table[n], dtype=float).ravel()
        return out

    def unpack(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters")
        return {n: vec[self._slices[n]].copy() for n in self.names}


# -- finite-difference gradient verification ---------------------------------

def gradient_check(fun, theta, grad, h=1e-5, components=None,
                   n_directions=0, seed=0):
    """Compare a gradient against central finite differences.

    fun(theta) -> float re-runs the full forward model.  Per-coordinate
    steps are h * max(1, |theta_i|).  For large parameter vectors pass
    `components` (indices) and/or `n_directions` random unit directions.
    Relative errors use denominator max(|ad|, |fd|, floor) with
    floor = max(1e-8, 1e-3 * |grad|_inf), so components far below the
    dominant gradient scale — where central differences are round-off
    limited — are judged against that scale instead of against
    themselves.

    Returns a dict with `rows` [(label, adjoint, fd, rel_err)] and
    `max_rel_err`.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    gmax = float(np.max(np.abs(grad))) if grad.size else 0.0
    floor = max(1e-8, 1e-3 * gmax)
    rows = []

    if components is None:
        components = range(theta.size) if n_directions == 0 else ()
    for i in components:
        hi = h * max(1.0, abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += hi
        tm[i] -= hi
        fd = (fun(tp) - fun(tm)) / (2.0 * hi)
        ad = grad[i]
        rel = abs(ad - fd) / max(abs(ad), abs(fd), floor)
        rows.append((f"theta[{i}]", float(ad), float(fd), float(rel)))

    rng = np.random.default_rng(seed)
    for k in range(n_directions):
        d = rng.standard_normal(theta.size)
        d /= np.linalg.norm(d)
        hi = h * max(1.0, float(np.abs(theta @ d)))
        fd = (fun(theta + hi * d) - fun(theta - hi * d)) / (2.0 * hi)
        ad = float(grad @ d)
        rel = abs(ad - fd) / max(abs(ad), abs(fd), floor)
        rows.append((f"dir[{k}]", ad, float(fd), float(rel)))

    return {"rows": rows,
            "max_rel_err": max((r[3] for r in rows), default=0.0)}
