"""Cell-centered finite volume flow, colocated with the FEM grid.

One flow cell per finite element.  Fluxes use two-point flux approximation
with harmonic permeability averaging on faces; phase mobilities are
arithmetically face-averaged in the potential/pressure operators and
first-order upwinded in the saturation transport equation.

The coupled steppers live here too: the monolithic single-phase
poroelastic step and the sequential two-phase step (porosity from the
lagged volumetric strain -> potential solve -> implicit saturation Newton
-> solid solve with the potential load).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import mesh as fem
from .constitutive import relax_matrices


class StepFailure(RuntimeError):
    """A time step could not be completed (e.g. Newton stalled)."""


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


class FlowGrid:
    """TPFA connectivity for a structured grid (one cell per element).

    Cells are numbered like the mesh elements (x-fastest).  perm is a
    scalar or per-cell permeability; geometric transmissibilities include
    the harmonic face permeability.
    """

    def __init__(self, mesh_, perm=1.0):
        if mesh_.nx is None:
            raise ValueError("flow grid needs a grid-built mesh")
        nx, ny = mesh_.nx, mesh_.ny
        self.mesh = mesh_
        self.nx, self.ny = nx, ny
        self.n_cells = nx * ny
        self.hx = mesh_.lx / nx
        self.hy = mesh_.ly / ny
        self.volumes = mesh_.volumes.copy()
        self.perm = np.broadcast_to(np.asarray(perm, dtype=float),
                                    (self.n_cells,)).copy()
        if np.any(self.perm <= 0.0):
            raise ValueError("permeability must be positive")

        cells = np.arange(self.n_cells).reshape(ny, nx)
        self.centers = np.column_stack([
            (np.tile(np.arange(nx), ny) + 0.5) * self.hx,
            (np.repeat(np.arange(ny), nx) + 0.5) * self.hy])

        # interior faces
        fi = np.concatenate([cells[:, :-1].ravel(), cells[:-1, :].ravel()])
        fj = np.concatenate([cells[:, 1:].ravel(), cells[1:, :].ravel()])
        geom = np.concatenate([
            np.full((nx - 1) * ny, self.hy / self.hx),
            np.full(nx * (ny - 1), self.hx / self.hy)])
        self.fi, self.fj = fi, fj
        self.ft = _harmonic(self.perm[fi], self.perm[fj]) * geom
        self.n_faces = fi.size

        # boundary faces: cell list, half-cell transmissibility, centroid
        self.boundary = {}
        for side, cc, geom_b, mid in (
                ("left", cells[:, 0], 2.0 * self.hy / self.hx,
                 lambda c: (0.0, self.centers[c, 1])),
                ("right", cells[:, -1], 2.0 * self.hy / self.hx,
                 lambda c: (mesh_.lx, self.centers[c, 1])),
                ("bottom", cells[0, :], 2.0 * self.hx / self.hy,
                 lambda c: (self.centers[c, 0], 0.0)),
                ("top", cells[-1, :], 2.0 * self.hx / self.hy,
                 lambda c: (self.centers[c, 0], mesh_.ly))):
            cc = cc.copy()
            xy = np.array([mid(c) for c in cc])
            self.boundary[side] = (cc, self.perm[cc] * geom_b, xy)

    def cell_of(self, jx, jy):
        return jy * self.nx + jx

    def cell_at(self, x, y):
        jx = min(int(x / self.hx), self.nx - 1)
        jy = min(int(y / self.hy), self.ny - 1)
        return self.cell_of(jx, jy)


def face_average(grid, cell_vals):
    """Arithmetic face average of a cell field (interior faces)."""
    v = np.asarray(cell_vals, dtype=float)
    return 0.5 * (v[grid.fi] + v[grid.fj])


def flux_matrix(grid, face_coef=1.0, bc=None, bc_coef=None):
    """Sparse operator A with (A p)_i = sum_f T_f c_f (p_i - p_j), plus
    T_b c_b p_i on Dirichlet boundary faces.

    face_coef: scalar or per-interior-face coefficients (mobilities).
    bc: dict side -> boundary value (value itself used only by
    `dirichlet_rhs`); bc_coef: dict side -> per-face coefficient.
    """
    t = grid.ft * face_coef
    rows = np.concatenate([grid.fi, grid.fj, grid.fi, grid.fj])
    cols = np.concatenate([grid.fi, grid.fj, grid.fj, grid.fi])
    vals = np.concatenate([t, t, -t, -t])
    if bc:
        for side in bc:
            cells, tb, _ = grid.boundary[side]
            cb = tb if bc_coef is None else tb * bc_coef[side]
            rows = np.concatenate([rows, cells])
            cols = np.concatenate([cols, cells])
            vals = np.concatenate([vals, cb])
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(grid.n_cells, grid.n_cells)).tocsr()


def dirichlet_rhs(grid, bc, bc_coef=None, bc_vals=None):
    """Right-hand-side lift sum_b T_b c_b psi_bc per cell.

    bc_vals overrides the scalar values in bc with per-face arrays (e.g. a
    y-dependent capillary potential evaluated at face centroids).
    """
    out = np.zeros(grid.n_cells)
    for side in bc or {}:
        cells, tb, _ = grid.boundary[side]
        cb = tb if bc_coef is None else tb * bc_coef[side]
        vals = bc[side] if bc_vals is None else bc_vals[side]
        out[cells] += cb * vals
    return out


# -- single-phase poroelasticity -------------------------------------------

@dataclass(frozen=True)
class SinglePhaseParams:
    biot_modulus: float = 1.0      # M
    biot_b: float = 1.0            # b
    fluid_visc: float = 1.0        # mu_f
    fluid_b: float = 1.0           # B_f

    def __post_init__(self):
        if self.biot_modulus <= 0.0:
            raise ValueError("Biot modulus must be positive")
        if not 0.0 <= self.biot_b <= 1.0:
            raise ValueError("Biot coefficient must lie in [0, 1]")
        if self.fluid_visc <= 0.0 or self.fluid_b <= 0.0:
            raise ValueError("fluid properties must be positive")


class SinglePhaseSystem:
    """Monolithic implicit step of quasi-static poroelasticity.

    Momentum:   K u_{n+1} - b Q^T p_{n+1} = f_ext - f_hist
    Mass:       (V/(M dt))(p_{n+1}-p_n) + (b/dt) Q (u_{n+1}-u_n)
                + L p_{n+1} = V q + dirichlet lift

    K is the solid tangent stiffness on the full dof set; fixed dofs are
    eliminated (zero Dirichlet).  The block matrix is factorized once and
    reused across steps (and for transpose solves in the adjoint).
    """

    def __init__(self, mesh_, grid, params, dt, k_full, fixed_dofs, p_bc):
        self.mesh = mesh_
        self.grid = grid
        self.params = params
        self.dt = dt
        self.p_bc = dict(p_bc or {})
        self.fixed = np.asarray(fixed_dofs, dtype=int)
        self.free = mesh_.free_dofs(self.fixed)
        self.n_u = self.free.size
        self.n_p = grid.n_cells

        kc = k_full.tocsr()
        self.k_ff = kc[self.free][:, self.free]
        self.q_f = grid_coupling(mesh_)[:, self.free].tocsr()
        mob = 1.0 / (params.fluid_b * params.fluid_visc)
        self.lap = flux_matrix(grid, mob, bc=self.p_bc,
                               bc_coef={s: mob for s in self.p_bc})
        self.dir_rhs = dirichlet_rhs(grid, self.p_bc,
                                     bc_coef={s: mob for s in self.p_bc})
        self.acc = grid.volumes / (params.biot_modulus * dt)
        b = params.biot_b
        self.block = sp.bmat(
            [[self.k_ff, -b * self.q_f.T],
             [(b / dt) * self.q_f, sp.diags(self.acc) + self.lap]],
            format="csc")
        self.lu = splu(self.block)

    def rhs(self, u_free, p, source, f_ext_free=None, f_hist_free=None):
        ru = np.zeros(self.n_u) if f_ext_free is None else f_ext_free.copy()
        if f_hist_free is not None:
            ru -= f_hist_free
        rp = (self.grid.volumes * source + self.dir_rhs
              + self.acc * p + (self.params.biot_b / self.dt) * (self.q_f @ u_free))
        return np.concatenate([ru, rp])

    def step(self, u_free, p, source, f_ext_free=None, f_hist_free=None):
        x = self.lu.solve(self.rhs(u_free, p, source, f_ext_free, f_hist_free))
        return x[:self.n_u], x[self.n_u:]

    def expand(self, u_free):
        u = np.zeros(self.mesh.n_dofs)
        u[self.free] = u_free
        return u


def grid_coupling(mesh_):
    """The volumetric-strain integral operator Q (cells x dofs)."""
    return mesh_.Q


def single_phase_coupled_step(u, p, dt, mesh_, grid, params, k_full,
                              fixed_dofs, p_bc, source,
                              f_ext=None, f_hist=None):
    """One-off monolithic step (builds and factorizes the block system).

    u is a full dof vector with zeros on fixed dofs; source is a per-cell
    density (the q in the mass balance).  Returns (u_next, p_next).
    """
    sys_ = SinglePhaseSystem(mesh_, grid, params, dt, k_full, fixed_dofs, p_bc)
    uf = u[sys_.free]
    fe = None if f_ext is None else f_ext[sys_.free]
    fh = None if f_hist is None else f_hist[sys_.free]
    uf1, p1 = sys_.step(uf, p, source, fe, fh)
    return sys_.expand(uf1), p1


# -- two-phase flow ----------------------------------------------------------

@dataclass(frozen=True)
class TwoPhaseParams:
    phi0: float = 0.25
    visc1: float = 1.0
    visc2: float = 1.0
    rho1: float = 1.0
    rho2: float = 0.8
    gravity: float = 0.0
    corey_n1: int = 2
    corey_n2: int = 2
    newton_tol: float = 1e-8
    newton_max: int = 100
    s2_boundary: float = 0.0        # saturation carried by boundary inflow

    def __post_init__(self):
        if not 0.0 < self.phi0 < 1.0:
            raise ValueError("reference porosity must lie in (0, 1)")
        if self.visc1 <= 0.0 or self.visc2 <= 0.0:
            raise ValueError("phase viscosities must be positive")
        if self.corey_n1 < 1 or self.corey_n2 < 1:
            raise ValueError("Corey exponents must be >= 1")


def porosity_from_strain(phi0, eps_v):
    """phi = 1 - (1 - phi0) exp(-eps_v)."""
    return 1.0 - (1.0 - phi0) * np.exp(-np.asarray(eps_v, dtype=float))


def mobilities(s2, params):
    """Corey mobilities (m1, m2, mt) of the phase-2 saturation."""
    s2 = np.asarray(s2, dtype=float)
    m1 = (1.0 - s2) ** params.corey_n1 / params.visc1
    m2 = s2 ** params.corey_n2 / params.visc2
    return m1, m2, m1 + m2


def _mobility_derivs(s2, params):
    """d m1/d s2 and d m2/d s2."""
    s2 = np.asarray(s2, dtype=float)
    n1, n2 = params.corey_n1, params.corey_n2
    dm1 = -n1 * (1.0 - s2) ** (n1 - 1) / params.visc1
    dm2 = n2 * s2 ** (n2 - 1) / params.visc2
    return dm1, dm2


def capillary_potential(params, y):
    """Psi_c = Psi_1 - Psi_2 = -(rho1 - rho2) g y (pressure difference
    neglected)."""
    return -(params.rho1 - params.rho2) * params.gravity * np.asarray(y, float)


def potential_system(grid, s2, dphi_dt, q1, q2, params, bc=None):
    """Matrix and right-hand side of the total-volume balance.

    sum_f T_f mt_f (psi_i - psi_j) = -div(m1 K grad Psi_c)_i
        + V_i (q1 + q2 - dphi/dt)_i     (+ Dirichlet lifts)

    bc maps side names to fixed potential values; with no Dirichlet side
    the singular all-Neumann system is regularized by pinning cell 0 to
    zero (its row is replaced), which fixes the potential datum.  Returns
    (a, rhs, pinned).
    """
    m1, _, mt = mobilities(s2, params)
    mt_face = face_average(grid, mt)
    m1_face = face_average(grid, m1)
    bc = dict(bc or {})
    bc_mt = {s: mt[grid.boundary[s][0]] for s in bc}
    bc_m1 = {s: m1[grid.boundary[s][0]] for s in bc}

    a = flux_matrix(grid, mt_face, bc=bc, bc_coef=bc_mt)
    psic = capillary_potential(params, grid.centers[:, 1])
    psic_bc = {s: capillary_potential(params, grid.boundary[s][2][:, 1])
               for s in bc}
    ac = flux_matrix(grid, m1_face, bc=bc, bc_coef=bc_m1)
    cap_div = ac @ psic - dirichlet_rhs(grid, bc, bc_coef=bc_m1,
                                        bc_vals=psic_bc)

    rhs = (grid.volumes * (np.asarray(q1, float) + np.asarray(q2, float)
                           - np.asarray(dphi_dt, float))
           - cap_div
           + dirichlet_rhs(grid, bc, bc_coef=bc_mt))

    pinned = not bc
    if pinned:
        a = a.tolil()
        a[0, :] = 0.0
        a[0, 0] = 1.0
        a = a.tocsr()
        rhs[0] = 0.0
    return a, rhs, pinned


def potential_solve(grid, s2, dphi_dt, q1, q2, params, bc=None):
    """Phase-2 potential from the total-volume balance (see
    potential_system for the discrete equations)."""
    a, rhs, _ = potential_system(grid, s2, dphi_dt, q1, q2, params, bc=bc)
    return splu(a.tocsc()).solve(rhs)


def upwind_faces(grid, psi):
    """Upstream cell per interior face by the sign of psi_i - psi_j."""
    dpsi = psi[grid.fi] - psi[grid.fj]
    return np.where(dpsi >= 0.0, grid.fi, grid.fj), dpsi


def _check_injection_term(s2, q1, params):
    m1, m2, _ = mobilities(s2, params)
    active = np.asarray(q1) != 0.0
    if np.any(active & (m1 <= 0.0)):
        raise ValueError("q1 m2/m1 injection term is singular: m1 = 0 at an "
                         "active q1 cell")
    ratio = np.zeros_like(m2)
    ratio[active] = m2[active] / m1[active]
    return ratio


def saturation_residual(s_new, s_old, dt, psi, phi_new, phi_old,
                        q1, q2, grid, params, bc=None):
    """Residual and Jacobian of the implicit phase-2 transport step.

    Conservative accumulation (phi_new s_new - phi_old s_old) V/dt, upwind
    mobilities on faces, and the appendix source closure q2 + q1 m2/m1.
    """
    v = grid.volumes
    m1, m2, _ = mobilities(s_new, params)
    _, dm2 = _mobility_derivs(s_new, params)
    ratio = _check_injection_term(s_new, q1, params)
    dm1, _ = _mobility_derivs(s_new, params)

    r = (v * (phi_new * s_new - phi_old * s_old) / dt
         - v * np.asarray(q2, float) - v * np.asarray(q1, float) * ratio)
    jr = v * phi_new / dt
    active = np.asarray(q1) != 0.0
    # d(m2/m1)/ds = (dm2 m1 - m2 dm1)/m1^2
    jr = jr - np.where(active,
                       v * np.asarray(q1, float)
                       * (dm2 * m1 - m2 * dm1) / np.maximum(m1, 1e-300) ** 2,
                       0.0)

    up, dpsi = upwind_faces(grid, psi)
    flux = grid.ft * m2[up] * dpsi
    np.add.at(r, grid.fi, flux)
    np.add.at(r, grid.fj, -flux)

    rows = [grid.fi, grid.fj, np.arange(grid.n_cells)]
    cols = [up, up, np.arange(grid.n_cells)]
    vals = [grid.ft * dm2[up] * dpsi, -grid.ft * dm2[up] * dpsi, jr]

    for side in bc or {}:
        cells, tb, xy = grid.boundary[side]
        dps = psi[cells] - (bc or {})[side]
        outflow = dps >= 0.0
        mob_b = np.where(outflow, m2[cells],
                         (params.s2_boundary ** params.corey_n2) / params.visc2)
        np.add.at(r, cells, tb * mob_b * dps)
        rows.append(cells[outflow])
        cols.append(cells[outflow])
        vals.append((tb * dm2[cells] * dps)[outflow])

    jac = sp.coo_matrix((np.concatenate(vals),
                         (np.concatenate(rows), np.concatenate(cols))),
                        shape=(grid.n_cells, grid.n_cells)).tocsr()
    return r, jac


def saturation_newton(s_old, dt, psi, phi_new, phi_old, q1, q2, grid,
                      params, bc=None, return_info=False):
    """Implicit saturation update by Newton's method.

    Iterates until the residual infinity norm drops below
    params.newton_tol (at most newton_max iterations; StepFailure
    otherwise).  Saturations are checked against [0, 1] with 1e-9 slack
    and clipped exactly.
    """
    s = np.asarray(s_old, dtype=float).copy()
    jac = None
    for _ in range(params.newton_max):
        r, jac = saturation_residual(s, s_old, dt, psi, phi_new, phi_old,
                                     q1, q2, grid, params, bc=bc)
        if np.max(np.abs(r)) < params.newton_tol:
            break
        s = s - splu(jac.tocsc()).solve(r)
    else:
        raise StepFailure("saturation Newton did not converge")

    if np.min(s) < -1e-9 or np.max(s) > 1.0 + 1e-9:
        raise StepFailure("saturation left [0, 1]")
    s = np.clip(s, 0.0, 1.0)
    if return_info:
        # refresh the Jacobian at the accepted state for the adjoint
        _, jac = saturation_residual(s, s_old, dt, psi, phi_new, phi_old,
                                     q1, q2, grid, params, bc=bc)
        return s, jac
    return s


# -- sequential two-phase poromechanics --------------------------------------

@dataclass
class TwoPhaseState:
    u: np.ndarray          # full displacement dofs
    sigma: np.ndarray      # (n_gauss, 3) effective stress
    eps: np.ndarray        # (n_gauss, 3) strain
    s2: np.ndarray         # (n_cells,) phase-2 saturation
    phi_prev: np.ndarray   # porosity at the previous mechanics state


def two_phase_initial_state(mesh_, grid, params, s2_init=0.0):
    s2 = np.broadcast_to(np.asarray(s2_init, float), (grid.n_cells,)).copy()
    return TwoPhaseState(u=np.zeros(mesh_.n_dofs),
                         sigma=np.zeros((mesh_.n_gauss, 3)),
                         eps=np.zeros((mesh_.n_gauss, 3)),
                         s2=s2,
                         phi_prev=np.full(grid.n_cells, params.phi0))


def two_phase_step(state, dt, mesh_, grid, mx, params, q1, q2, bc_psi,
                   fixed_dofs, lu_solid=None, k_tan=None):
    """One sequential step of the coupled two-phase problem.

    mx is a constitutive.MaxwellParams for the effective stress.  Pass a
    prefactorized (k_tan, lu_solid) pair to reuse the solid matrix across
    steps.  Returns (new_state, psi2).
    """
    free = mesh_.free_dofs(fixed_dofs)
    eps_v = (mesh_.Q @ state.u) / grid.volumes
    phi_new = porosity_from_strain(params.phi0, eps_v)
    dphi_dt = (phi_new - state.phi_prev) / dt

    psi = potential_solve(grid, state.s2, dphi_dt, q1, q2, params, bc=bc_psi)
    s2_new = saturation_newton(state.s2, dt, psi, phi_new, state.phi_prev,
                               q1, q2, grid, params, bc=bc_psi)

    c = dt * mx.mu / np.asarray(mx.eta, dtype=float)
    s_rel = relax_matrices(np.broadcast_to(c, (mesh_.n_gauss,)))
    t_rel = s_rel @ mx.hel()
    if k_tan is None:
        k_tan = fem.assemble_stiffness(mesh_, t_rel)
        lu_solid = splu(k_tan[free][:, free].tocsc())

    hist = (np.einsum("nij,nj->ni", s_rel, state.sigma)
            - np.einsum("nij,nj->ni", t_rel, state.eps))
    f = mesh_.Q.T @ psi - fem.internal_force(mesh_, hist)
    u_new = np.zeros(mesh_.n_dofs)
    u_new[free] = lu_solid.solve(f[free])

    eps_new = fem.strain_at_gauss(mesh_, u_new)
    sigma_new = (np.einsum("nij,nj->ni", s_rel, state.sigma)
                 + np.einsum("nij,nj->ni", t_rel, eps_new - state.eps))
    new_state = TwoPhaseState(u=u_new, sigma=sigma_new, eps=eps_new,
                              s2=s2_new, phi_prev=phi_new)
    return new_state, psi
