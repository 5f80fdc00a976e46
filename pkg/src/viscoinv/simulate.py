"""Taped forward simulators for the three problem families.

Each rollout mirrors the plain solver but records every implicit solve on
a Tape, so backward() on any scalar built from the returned states yields
exact gradients with respect to the constitutive parameters.  The adjoint
of every solve reuses the forward factorization (transpose solve) and
applies dF/dtheta as hand-written vector-Jacobian products at the
assembly level; Jacobians of Newton-solved nodes are taken at the
converged state only.

Constitutive behaviour is supplied by provider objects exposing

    coeffs(tape, sigma, eps, dt) -> (T, hist)

with sigma_next = hist + T eps_next at every Gauss point.  Inputs and
outputs may be plain arrays (for data generation) or taped Vars.
"""

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import autodiff as ad
from . import constitutive as cm
from . import flow
from . import mesh as fem
from . import nn
from .autodiff import Var, value_of


# -- small taped helpers ------------------------------------------------------

def strain_op(tape, bmat, u):
    """Voigt strain rows (n_gauss, 3) from a displacement Var."""
    out = (bmat @ value_of(u)).reshape(-1, 3)
    if not isinstance(u, Var):
        return out
    return tape.record(out, [u],
                       lambda g: (bmat.T @ np.asarray(g, float).ravel(),))


def flat_rows(tape, x):
    """(n, 3) -> (3n,) with the matching reshape adjoint."""
    v = value_of(x)
    if not isinstance(x, Var):
        return v.ravel()
    shape = v.shape
    return tape.record(v.ravel(), [x],
                       lambda g: (np.asarray(g, float).reshape(shape),))


def squeeze_col(tape, x):
    """(n, 1) -> (n,)."""
    v = value_of(x)
    if not isinstance(x, Var):
        return v[:, 0]
    return tape.record(v[:, 0], [x],
                       lambda g: (np.asarray(g, float)[:, None],))


def tile_scalar(tape, x, n):
    """Broadcast a scalar Var to shape (n,)."""
    v = np.asarray(value_of(x), dtype=float)
    out = np.full(n, float(v.reshape(())))
    if not isinstance(x, Var):
        return out
    return tape.record(out, [x],
                       lambda g: (np.asarray(g, float).sum().reshape(v.shape),))


def tile_matrix(tape, h, n):
    """Broadcast a (3, 3) Var to (n, 3, 3)."""
    v = value_of(h)
    out = np.broadcast_to(v, (n, 3, 3)).copy()
    if not isinstance(h, Var):
        return out
    return tape.record(out, [h],
                       lambda g: (np.asarray(g, float).sum(axis=0),))


def spd_gauss(tape, p):
    """Per-point SPD matrices (n, 3, 3) from (n, 6) log-Cholesky rows."""
    vp = np.asarray(value_of(p), dtype=float)
    rows, cols = np.tril_indices(3)
    di = np.arange(3)
    ell = np.zeros((vp.shape[0], 3, 3))
    ell[:, rows, cols] = vp
    ell[:, di, di] = np.exp(ell[:, di, di])
    out = ell @ np.swapaxes(ell, 1, 2)
    if not isinstance(p, Var):
        return out

    def vjp(g):
        g = np.asarray(g, dtype=float)
        lbar = (g + np.swapaxes(g, 1, 2)) @ ell
        lbar[:, di, di] *= ell[:, di, di]
        return (lbar[:, rows, cols],)

    return tape.record(out, [p], vjp)


def _affine(tape, terms):
    """Linear combination sum(c * x); Var-aware, plain when possible."""
    out = None
    plain = None
    for c, x in terms:
        if isinstance(x, Var):
            t = ad.scale(tape, x, c)
            out = t if out is None else ad.add(tape, out, t)
        else:
            t = c * np.asarray(x, dtype=float)
            plain = t if plain is None else plain + t
    if out is None:
        return plain
    if plain is not None and np.any(plain):
        out = ad.add(tape, out, plain)
    return out


def _add(tape, a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        return ad.add(tape, a, b)
    return np.asarray(a, float) + np.asarray(b, float)


def _sub(tape, a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        return ad.sub(tape, a, b)
    return np.asarray(a, float) - np.asarray(b, float)


def _point_mv(tape, a, x):
    if isinstance(a, Var) or isinstance(x, Var):
        return ad.point_matvec(tape, a, x)
    return np.einsum("nij,nj->ni", np.asarray(a, float),
                     np.asarray(x, float))


def free_positions(mesh_, fixed, dofs):
    """Positions of full dof ids inside the free-dof vector."""
    free = mesh_.free_dofs(fixed)
    pos = np.full(mesh_.n_dofs, -1, dtype=int)
    pos[free] = np.arange(free.size)
    sel = pos[np.asarray(dofs, dtype=int)]
    if np.any(sel < 0):
        raise ValueError("requested dof is constrained")
    return sel


# -- constitutive providers ---------------------------------------------------

class MaxwellProvider:
    """Linear Maxwell material; mu, lam, inv_eta may be Vars or floats.

    inv_eta is the reciprocal viscosity, scalar or one value per Gauss
    point (the natural inversion variable for depth profiles).
    """

    constant_tangent = True

    def __init__(self, n_gauss, mu, lam, inv_eta):
        self.n_gauss = n_gauss
        self.mu = mu
        self.lam = lam
        self.inv_eta = inv_eta
        self._cache = None

    def _relax(self, tape, dt):
        if (self._cache is not None and self._cache[0] is tape
                and self._cache[1] == dt):
            return self._cache[2], self._cache[3]
        n = self.n_gauss
        if isinstance(self.mu, Var) or isinstance(self.inv_eta, Var):
            c = ad.scale(tape, ad.mul(tape, self.mu, self.inv_eta), dt)
            if np.asarray(value_of(c)).size != n:
                c = tile_scalar(tape, c, n)
            s = ad.relax(tape, c)
        else:
            c = dt * self.mu * np.asarray(self.inv_eta, dtype=float)
            s = cm.relax_matrices(np.broadcast_to(c, (n,)))
        if isinstance(self.lam, Var) or isinstance(self.mu, Var):
            hel = ad.plane_strain(tape, self.lam, self.mu)
        else:
            hel = cm.plane_strain_matrix(self.lam, self.mu)
        if isinstance(s, Var) or isinstance(hel, Var):
            t = ad.point_matmat(tape, s, hel)
        else:
            t = s @ hel
        self._cache = (tape, dt, s, t)
        return s, t

    def coeffs(self, tape, sigma, eps, dt):
        s, t = self._relax(tape, dt)
        hist = _sub(tape, _point_mv(tape, s, sigma), _point_mv(tape, t, eps))
        return t, hist


class ElasticProvider:
    """History-free linear material with one elasticity matrix H."""

    constant_tangent = True

    def __init__(self, n_gauss, h):
        self.n_gauss = n_gauss
        self.h = h                      # (3, 3), Var or array

    def coeffs(self, tape, sigma, eps, dt):
        t = tile_matrix(tape, self.h, self.n_gauss)
        return t, np.zeros((self.n_gauss, 3))


class SpacevarElasticProvider:
    """Independent SPD elasticity matrix at every Gauss point."""

    constant_tangent = True

    def __init__(self, p):
        self.p = p                      # (n_gauss, 6), Var or array

    def coeffs(self, tape, sigma, eps, dt):
        t = spd_gauss(tape, self.p)
        n = np.asarray(value_of(self.p)).shape[0]
        return t, np.zeros((n, 3))


class StressNNProvider:
    """sigma_next = NN(sigma, eps) + H eps_next with SPD-parameterized H."""

    constant_tangent = True

    def __init__(self, n_gauss, spec, w, h_param):
        self.n_gauss = n_gauss
        self.spec = spec
        self.w = w                      # flat weights, Var or array
        self.h_param = h_param          # (6,) log-Cholesky, Var or array

    def coeffs(self, tape, sigma, eps, dt):
        if isinstance(self.h_param, Var):
            h = ad.spd(tape, self.h_param)
        else:
            h = nn.spd_from_param(np.asarray(self.h_param, float))
        t = tile_matrix(tape, h, self.n_gauss)
        if isinstance(sigma, Var) or isinstance(eps, Var):
            x = ad.concat_cols(tape, _as_var(tape, sigma), _as_var(tape, eps))
        else:
            x = np.hstack([np.asarray(sigma, float), np.asarray(eps, float)])
        if isinstance(self.w, Var) or isinstance(x, Var):
            hist = ad.mlp(tape, self.spec, self.w, x)
        else:
            hist = nn.mlp_forward(self.spec, np.asarray(self.w, float), x)
        return t, hist


class ViscosityNNProvider:
    """Maxwell update with stress-dependent viscosity eta = floor +
    softplus(NN(sigma)); the tangent varies per step."""

    constant_tangent = False

    def __init__(self, mu, lam, spec, w, floor=0.1):
        self.mu = float(mu)
        self.lam = float(lam)
        self.spec = spec
        self.w = w
        self.floor = float(floor)
        self.hel = cm.plane_strain_matrix(lam, mu)

    def _tangent(self, tape, sigma, dt):
        if isinstance(self.w, Var) or isinstance(sigma, Var):
            z = squeeze_col(tape, ad.mlp(tape, self.spec, self.w, sigma))
            eta = ad.add(tape, ad.softplus(tape, z), self.floor)
            c = ad.scale(tape, ad.reciprocal(tape, eta), dt * self.mu)
            s = ad.relax(tape, c)
            t = ad.point_matmat(tape, s, self.hel)
        else:
            z = nn.mlp_forward(self.spec, np.asarray(self.w, float),
                               np.asarray(sigma, float))[:, 0]
            eta = self.floor + np.logaddexp(0.0, z)
            s = cm.relax_matrices(dt * self.mu / eta)
            t = s @ self.hel
        return s, t

    def coeffs(self, tape, sigma, eps, dt):
        s, t = self._tangent(tape, sigma, dt)
        hist = _sub(tape, _point_mv(tape, s, sigma), _point_mv(tape, t, eps))
        return t, hist


class ViscosityLawProvider:
    """Maxwell update with a prescribed stress-dependent viscosity law
    (data generation only; not differentiable)."""

    constant_tangent = False

    def __init__(self, mu, lam, law):
        self.mu = float(mu)
        self.lam = float(lam)
        self.law = law
        self.hel = cm.plane_strain_matrix(lam, mu)

    def coeffs(self, tape, sigma, eps, dt):
        if isinstance(sigma, Var) or isinstance(eps, Var):
            raise TypeError("viscosity law provider is not differentiable")
        sigma = np.asarray(sigma, float)
        s = cm.relax_matrices(dt * self.mu / self.law(sigma))
        t = s @ self.hel
        hist = (np.einsum("nij,nj->ni", s, sigma)
                - np.einsum("nij,nj->ni", t, np.asarray(eps, float)))
        return t, hist


def _as_var(tape, x):
    return x if isinstance(x, Var) else tape.leaf(np.asarray(x, float))


# -- dynamic viscoelasticity ---------------------------------------------------

def simulate_dynamic(tape, mesh_, provider, dt, n_steps, f_ext, fixed,
                     rho=1.0, rho_inf=1.0):
    """Generalized-alpha rollout of M a + f_int(d) = f_ext(t).

    f_ext maps time to a full-dof load vector (or is None).  Initial
    state is at rest with a consistent initial acceleration.  Returns a
    dict of per-step lists: displacements "d" (full dofs), "sigma", "eps"
    at Gauss points; entry k holds the state after step k+1.
    """
    am, af, be, ga = fem.alpha_coefficients(rho_inf)
    m = fem.mass_matrix(mesh_, rho)
    free = mesh_.free_dofs(fixed)
    bmat = mesh_.B

    load = (lambda t: np.zeros(mesh_.n_dofs)) if f_ext is None else f_ext
    d = np.zeros(mesh_.n_dofs)
    v = np.zeros(mesh_.n_dofs)
    a = np.zeros(mesh_.n_dofs)
    a[free] = splu(m[free][:, free].tocsc()).solve(load(0.0)[free])
    sig = np.zeros((mesh_.n_gauss, 3))
    eps = np.zeros((mesh_.n_gauss, 3))

    out = {"d": [], "sigma": [], "eps": []}
    lu = None
    k_t = None
    for n in range(n_steps):
        t_var, hist = provider.coeffs(tape, sig, eps, dt)
        if lu is None or not provider.constant_tangent:
            k_t = fem.assemble_stiffness(mesh_, value_of(t_var))
            eff = ((1.0 - am) * m + ((1.0 - af) * be * dt * dt) * k_t).tocsr()
            lu = splu(eff[free][:, free].tocsc())
        f_mid = load(dt * (n + 1.0 - af))
        a_new = _alpha_node(tape, mesh_, m, k_t, lu, free, dt,
                            (am, af, be, ga), t_var, hist, sig, d, v, a,
                            f_mid)
        d_new = _affine(tape, [(1.0, d), (dt, v),
                               (dt * dt * (0.5 - be), a),
                               (be * dt * dt, a_new)])
        v_new = _affine(tape, [(1.0, v), (dt * (1.0 - ga), a),
                               (dt * ga, a_new)])
        eps_new = strain_op(tape, bmat, d_new)
        sig_new = _add(tape, _point_mv(tape, t_var, eps_new), hist)

        out["d"].append(d_new)
        out["sigma"].append(sig_new)
        out["eps"].append(eps_new)
        d, v, a, sig, eps = d_new, v_new, a_new, sig_new, eps_new
    return out


def _alpha_node(tape, mesh_, m, k_t, lu, free, dt, coefs, t, hist, sig,
                d, v, a, f_mid):
    """One implicit alpha solve for a_{n+1}, recorded with adjoints for
    the tangent, the history stress, and the incoming state."""
    am, af, be, ga = coefs
    dv, vv, av = value_of(d), value_of(v), value_of(a)
    hv, sv = value_of(hist), value_of(sig)
    wg = mesh_.wg

    d_pred = dv + dt * vv + dt * dt * (0.5 - be) * av
    rhs = (f_mid - am * (m @ av)
           - (1.0 - af) * (k_t @ d_pred + fem.internal_force(mesh_, hv))
           - af * fem.internal_force(mesh_, sv))
    a_new = np.zeros_like(dv)
    a_new[free] = lu.solve(rhs[free])
    eps_next = (mesh_.B @ (d_pred + be * dt * dt * a_new)).reshape(-1, 3)

    specs = [(nm, x) for nm, x in
             (("t", t), ("hist", hist), ("sig", sig),
              ("d", d), ("v", v), ("a", a)) if isinstance(x, Var)]
    if not specs:
        return a_new
    names = [nm for nm, _ in specs]
    parents = [x for _, x in specs]

    def vjp(g):
        w = np.zeros_like(a_new)
        w[free] = lu.solve(np.asarray(g, float)[free], trans="T")
        gw = (mesh_.B @ w).reshape(-1, 3) * wg[:, None]
        kw = k_t.T @ w
        pulls = {
            "t": lambda: -(1.0 - af) * np.einsum("ni,nj->nij", gw, eps_next),
            "hist": lambda: -(1.0 - af) * gw,
            "sig": lambda: -af * gw,
            "d": lambda: -(1.0 - af) * kw,
            "v": lambda: -(1.0 - af) * dt * kw,
            "a": lambda: -am * (m @ w) - (1.0 - af) * dt * dt * (0.5 - be) * kw,
        }
        return tuple(pulls[nm]() for nm in names)

    return tape.record(a_new, parents, vjp)


# -- quasi-static single-phase poroelasticity ----------------------------------

def simulate_single_phase(tape, mesh_, grid, provider, params, dt, n_steps,
                          source, fixed, p_bc):
    """Coupled momentum/mass rollout with a monolithic implicit step.

    The provider must have a constant tangent (the block factorization is
    reused across steps).  source is a per-cell rate, constant in time or
    a callable of the step index.  Returns per-step lists "u" (free
    dofs), "p", "sigma", "eps", plus the assembled system under "sys".
    """
    if not provider.constant_tangent:
        raise ValueError("coupled stepper needs a constant tangent")
    t_var, hist = provider.coeffs(tape, np.zeros((mesh_.n_gauss, 3)),
                                  np.zeros((mesh_.n_gauss, 3)), dt)
    k_full = fem.assemble_stiffness(mesh_, value_of(t_var))
    sysb = flow.SinglePhaseSystem(mesh_, grid, params, dt, k_full, fixed,
                                  p_bc)
    b_free = mesh_.B[:, sysb.free].tocsr()
    if_free = (b_free.T @ sp.diags(np.repeat(mesh_.wg, 3))).tocsr()

    u = np.zeros(sysb.n_u)
    p = np.zeros(sysb.n_p)
    sig = np.zeros((mesh_.n_gauss, 3))
    eps = np.zeros((mesh_.n_gauss, 3))
    out = {"u": [], "p": [], "sigma": [], "eps": [], "sys": sysb}
    for n in range(n_steps):
        if n > 0:
            t_var, hist = provider.coeffs(tape, sig, eps, dt)
        q = source(n) if callable(source) else source
        x_var = _poro_node(tape, mesh_, sysb, b_free, if_free, t_var, hist,
                           u, p, q)
        u_new = ad.gather(tape, x_var, np.arange(sysb.n_u))
        p_new = ad.gather(tape, x_var, sysb.n_u + np.arange(sysb.n_p))
        eps_new = strain_op(tape, b_free, u_new)
        sig_new = _add(tape, _point_mv(tape, t_var, eps_new), hist)

        out["u"].append(u_new)
        out["p"].append(p_new)
        out["sigma"].append(sig_new)
        out["eps"].append(eps_new)
        u, p, sig, eps = u_new, p_new, sig_new, eps_new
    return out


def _poro_node(tape, mesh_, sysb, b_free, if_free, t, hist, u, p, q):
    uv, pv = value_of(u), value_of(p)
    hv = value_of(hist)
    f_hist = if_free @ hv.ravel()
    x = sysb.lu.solve(sysb.rhs(uv, pv, q, None, f_hist))
    eps_next = (b_free @ x[:sysb.n_u]).reshape(-1, 3)
    bdt = sysb.params.biot_b / sysb.dt
    wg = mesh_.wg

    specs = [(nm, z) for nm, z in
             (("t", t), ("hist", hist), ("u", u), ("p", p))
             if isinstance(z, Var)]
    names = [nm for nm, _ in specs]
    parents = [z for _, z in specs]

    def vjp(g):
        w = sysb.lu.solve(np.asarray(g, float), trans="T")
        w_u, w_p = w[:sysb.n_u], w[sysb.n_u:]
        gw = (b_free @ w_u).reshape(-1, 3) * wg[:, None]
        pulls = {
            "t": lambda: -np.einsum("ni,nj->nij", gw, eps_next),
            "hist": lambda: -gw,
            "u": lambda: bdt * (sysb.q_f.T @ w_p),
            "p": lambda: sysb.acc * w_p,
        }
        return tuple(pulls[nm]() for nm in names)

    return tape.record(x, parents, vjp)


# -- sequential two-phase poromechanics ----------------------------------------

def simulate_two_phase(tape, mesh_, grid, provider, params, dt, n_steps,
                       q1, q2, bc_psi, fixed):
    """Sequential potential / transport / mechanics rollout.

    Mirrors flow.two_phase_step with every solve recorded.  Returns
    per-step lists "u" (free dofs), "s2", "psi", "sigma", "eps" and the
    free dof index under "free".
    """
    if not provider.constant_tangent:
        raise ValueError("two-phase stepper needs a constant tangent")
    free = mesh_.free_dofs(fixed)
    n_g = mesh_.n_gauss
    t_var, hist = provider.coeffs(tape, np.zeros((n_g, 3)),
                                  np.zeros((n_g, 3)), dt)
    k_full = fem.assemble_stiffness(mesh_, value_of(t_var))
    lu_solid = splu(k_full[free][:, free].tocsc())
    b_free = mesh_.B[:, free].tocsr()
    if_free = (b_free.T @ sp.diags(np.repeat(mesh_.wg, 3))).tocsr()
    qt_free = (mesh_.Q[:, free].T).tocsr()
    qv_free = (sp.diags(1.0 / grid.volumes) @ mesh_.Q[:, free]).tocsr()

    u = np.zeros(free.size)
    sig = np.zeros((n_g, 3))
    eps = np.zeros((n_g, 3))
    s2 = np.zeros(grid.n_cells)
    phi_prev = np.full(grid.n_cells, params.phi0)

    out = {"u": [], "s2": [], "psi": [], "sigma": [], "eps": [],
           "free": free}
    for n in range(n_steps):
        if n > 0:
            t_var, hist = provider.coeffs(tape, sig, eps, dt)
        eps_v = (ad.matvec(tape, qv_free, u) if isinstance(u, Var)
                 else qv_free @ u)
        phi = (ad.porosity(tape, eps_v, params.phi0)
               if isinstance(eps_v, Var)
               else flow.porosity_from_strain(params.phi0, eps_v))
        dphi = _affine(tape, [(1.0 / dt, phi), (-1.0 / dt, phi_prev)])

        psi = _potential_node(tape, grid, params, s2, dphi, q1, q2, bc_psi)
        s2_new = _saturation_node(tape, grid, params, dt, psi, s2, phi,
                                  phi_prev, q1, q2, bc_psi)

        rhs = _affine(tape, [
            (1.0, ad.matvec(tape, qt_free, psi) if isinstance(psi, Var)
             else qt_free @ value_of(psi)),
            (-1.0, ad.matvec(tape, if_free, flat_rows(tape, hist))
             if isinstance(hist, Var) else if_free @ value_of(hist).ravel()),
        ])
        u_new = _solid_node(tape, lu_solid, rhs, t_var, b_free, mesh_.wg)
        eps_new = strain_op(tape, b_free, u_new)
        sig_new = _add(tape, _point_mv(tape, t_var, eps_new), hist)

        out["u"].append(u_new)
        out["s2"].append(s2_new)
        out["psi"].append(psi)
        out["sigma"].append(sig_new)
        out["eps"].append(eps_new)
        u, sig, eps, s2, phi_prev = u_new, sig_new, eps_new, s2_new, phi
    return out


def _potential_node(tape, grid, params, s2, dphi, q1, q2, bc):
    s2v = value_of(s2)
    dphiv = np.broadcast_to(np.asarray(value_of(dphi), float),
                            (grid.n_cells,))
    a, rhs, pinned = flow.potential_system(grid, s2v, dphiv, q1, q2, params,
                                           bc=bc)
    lu = splu(a.tocsc())
    psi = lu.solve(rhs)

    specs = [(nm, z) for nm, z in (("s2", s2), ("dphi", dphi))
             if isinstance(z, Var)]
    if not specs:
        return psi
    names = [nm for nm, _ in specs]
    parents = [z for _, z in specs]

    m1, _, mt = flow.mobilities(s2v, params)
    dm1, dm2 = flow._mobility_derivs(s2v, params)
    dmt = dm1 + dm2
    psic = flow.capillary_potential(params, grid.centers[:, 1])
    bcd = dict(bc or {})

    def vjp(g):
        w = lu.solve(np.asarray(g, float), trans="T")
        wz = w.copy()
        if pinned:
            wz[0] = 0.0
        pulls = {}
        if "s2" in names:
            dw = wz[grid.fi] - wz[grid.fj]
            mtb = -dw * grid.ft * (psi[grid.fi] - psi[grid.fj])
            m1b = -dw * grid.ft * (psic[grid.fi] - psic[grid.fj])
            s2b = np.zeros(grid.n_cells)
            np.add.at(s2b, grid.fi, 0.5 * dmt[grid.fi] * mtb)
            np.add.at(s2b, grid.fj, 0.5 * dmt[grid.fj] * mtb)
            np.add.at(s2b, grid.fi, 0.5 * dm1[grid.fi] * m1b)
            np.add.at(s2b, grid.fj, 0.5 * dm1[grid.fj] * m1b)
            for side, val in bcd.items():
                cells, tb, xy = grid.boundary[side]
                psic_b = flow.capillary_potential(params, xy[:, 1])
                s2b[cells] += dmt[cells] * (-wz[cells] * tb
                                            * (psi[cells] - val))
                s2b[cells] += dm1[cells] * (-wz[cells] * tb
                                            * (psic[cells] - psic_b))
            pulls["s2"] = s2b
        if "dphi" in names:
            pulls["dphi"] = -grid.volumes * wz
        return tuple(pulls[nm] for nm in names)

    return tape.record(psi, parents, vjp)


def _saturation_node(tape, grid, params, dt, psi, s2_old, phi_new, phi_old,
                     q1, q2, bc):
    psiv = value_of(psi)
    s_oldv = value_of(s2_old)
    phi_nv = np.broadcast_to(np.asarray(value_of(phi_new), float),
                             (grid.n_cells,))
    phi_ov = np.broadcast_to(np.asarray(value_of(phi_old), float),
                             (grid.n_cells,))
    s_new, jac = flow.saturation_newton(s_oldv, dt, psiv, phi_nv, phi_ov,
                                        q1, q2, grid, params, bc=bc,
                                        return_info=True)

    specs = [(nm, z) for nm, z in
             (("psi", psi), ("s_old", s2_old),
              ("phi_new", phi_new), ("phi_old", phi_old))
             if isinstance(z, Var)]
    if not specs:
        return s_new
    names = [nm for nm, _ in specs]
    parents = [z for _, z in specs]

    lu = splu(jac.T.tocsc())
    v = grid.volumes
    _, m2, _ = flow.mobilities(s_new, params)
    up, dpsi = flow.upwind_faces(grid, psiv)
    kappa = grid.ft * m2[up]
    bcd = dict(bc or {})

    def vjp(g):
        w = lu.solve(np.asarray(g, float))
        pulls = {}
        if "psi" in names:
            dw = w[grid.fi] - w[grid.fj]
            pb = np.zeros(grid.n_cells)
            np.add.at(pb, grid.fi, -kappa * dw)
            np.add.at(pb, grid.fj, kappa * dw)
            for side, val in bcd.items():
                cells, tb, xy = grid.boundary[side]
                dps = psiv[cells] - val
                mob_b = np.where(
                    dps >= 0.0, m2[cells],
                    (params.s2_boundary ** params.corey_n2) / params.visc2)
                pb[cells] -= w[cells] * tb * mob_b
            pulls["psi"] = pb
        if "s_old" in names:
            pulls["s_old"] = w * phi_ov * v / dt
        if "phi_new" in names:
            pulls["phi_new"] = -w * s_new * v / dt
        if "phi_old" in names:
            pulls["phi_old"] = w * s_oldv * v / dt
        return tuple(pulls[nm] for nm in names)

    return tape.record(s_new, parents, vjp)


def _solid_node(tape, lu_solid, rhs, t, b_free, wg):
    if not isinstance(rhs, Var) and not isinstance(t, Var):
        return lu_solid.solve(np.asarray(rhs, float))

    def matrix_vjp(w, x):
        gw = (b_free @ w).reshape(-1, 3) * wg[:, None]
        gu = (b_free @ x).reshape(-1, 3)
        return (-np.einsum("ni,nj->nij", gw, gu),)

    extra = [t] if isinstance(t, Var) else []
    return ad.linear_solve(tape, lu_solid, rhs,
                           extra_parents=extra,
                           matrix_vjp=matrix_vjp if extra else None)


# -- plain convenience rollouts -------------------------------------------------

def run_two_phase(mesh_, grid, mx, params, dt, n_steps, q1, q2, bc_psi,
                  fixed):
    """Untaped sequential rollout (data generation); returns the same
    per-step dict layout as simulate_two_phase with plain arrays."""
    free = mesh_.free_dofs(fixed)
    c = dt * mx.mu / np.asarray(mx.eta, dtype=float)
    s_rel = cm.relax_matrices(np.broadcast_to(c, (mesh_.n_gauss,)))
    k_tan = fem.assemble_stiffness(mesh_, s_rel @ mx.hel())
    lu = splu(k_tan[free][:, free].tocsc())

    state = flow.two_phase_initial_state(mesh_, grid, params)
    out = {"u": [], "s2": [], "psi": [], "sigma": [], "eps": [],
           "free": free}
    for _ in range(n_steps):
        state, psi = flow.two_phase_step(state, dt, mesh_, grid, mx, params,
                                         q1, q2, bc_psi, fixed,
                                         lu_solid=lu, k_tan=k_tan)
        out["u"].append(state.u[free])
        out["s2"].append(state.s2)
        out["psi"].append(psi)
        out["sigma"].append(state.sigma)
        out["eps"].append(state.eps)
    return out


def values(seq):
    """Plain array list from a list of Vars/arrays."""
    return [np.asarray(value_of(x), dtype=float) for x in seq]
