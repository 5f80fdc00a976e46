"""Structured 2-D finite element kernel.

Bilinear quadrilateral elements on a rectangular grid, plane-strain Voigt
convention (eps_xx, eps_yy, gamma_xy) with engineering shear
gamma_xy = 2 eps_xy, 2x2 Gauss quadrature.  Displacement dofs are ordered
all u_x by node index, then all u_y.

The mesh precomputes three sparse operators that the rest of the package
leans on:

* ``B``  -- (3*n_gauss, n_dofs) strain operator, eps = B u per Gauss point
* ``Q``  -- (n_elems, n_dofs) volumetric-strain integral, (Q u)_e = int_e div u
* ``Ms`` -- (n_nodes, n_nodes) scalar consistent mass, M = rho * blockdiag(Ms, Ms)
"""

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, spsolve

_G = 1.0 / np.sqrt(3.0)
# reference-element Gauss points, counter-clockwise, weights all 1
GAUSS_POINTS = np.array([(-_G, -_G), (_G, -_G), (_G, _G), (-_G, _G)])

# local node coordinates on the reference square, counter-clockwise
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])

# edge -> (local node, local node), counter-clockwise
EDGES = {0: (0, 1), 1: (1, 2), 2: (2, 3), 3: (3, 0)}


def shape_functions(xi, eta):
    """Bilinear shape values N (4,) and reference gradients dN (4, 2)."""
    n = 0.25 * (1.0 + _XI * xi) * (1.0 + _ETA * eta)
    dn = np.empty((4, 2))
    dn[:, 0] = 0.25 * _XI * (1.0 + _ETA * eta)
    dn[:, 1] = 0.25 * _ETA * (1.0 + _XI * xi)
    return n, dn


class Mesh:
    """Quadrilateral mesh with precomputed quadrature and operators.

    Parameters
    ----------
    nodes : (n_nodes, 2) array
        Node coordinates.
    elems : (n_elems, 4) int array
        Node indices per element, counter-clockwise.
    nx, ny : int, optional
        Grid dimensions when the mesh came from `build_grid`; some helpers
        (edge sets, cell indexing for the flow grid) need them.
    """

    def __init__(self, nodes, elems, nx=None, ny=None, lx=None, ly=None):
        self.nodes = np.asarray(nodes, dtype=float)
        self.elems = np.asarray(elems, dtype=int)
        self.nx, self.ny, self.lx, self.ly = nx, ny, lx, ly
        self.n_nodes = self.nodes.shape[0]
        self.n_elems = self.elems.shape[0]
        self.n_dofs = 2 * self.n_nodes
        self.n_gauss = 4 * self.n_elems
        self._build_operators()

    # -- dof bookkeeping -------------------------------------------------

    def dof_x(self, nodes):
        return np.asarray(nodes, dtype=int)

    def dof_y(self, nodes):
        return self.n_nodes + np.asarray(nodes, dtype=int)

    def element_dofs(self, e):
        n = self.elems[e]
        return np.concatenate([self.dof_x(n), self.dof_y(n)])

    # -- quadrature-level operators --------------------------------------

    def _build_operators(self):
        coords = self.nodes[self.elems]          # (ne, 4, 2)
        ne = self.n_elems

        wg = np.empty(self.n_gauss)
        gauss_xy = np.empty((self.n_gauss, 2))
        b_rows, b_cols, b_vals = [], [], []
        q_rows, q_cols, q_vals = [], [], []
        m_rows, m_cols, m_vals = [], [], []
        elem_ids = np.arange(ne)

        dofx = self.elems                         # (ne, 4)
        dofy = self.elems + self.n_nodes

        for g, (xi, eta) in enumerate(GAUSS_POINTS):
            n_sh, dn = shape_functions(xi, eta)
            jac = np.einsum("eai,aj->eij", coords, dn)      # (ne, 2, 2)
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            if np.any(det <= 0.0):
                raise ValueError("non-positive Jacobian: inverted element")
            inv = np.empty_like(jac)
            inv[:, 0, 0] = jac[:, 1, 1]
            inv[:, 0, 1] = -jac[:, 0, 1]
            inv[:, 1, 0] = -jac[:, 1, 0]
            inv[:, 1, 1] = jac[:, 0, 0]
            inv /= det[:, None, None]
            dndx = np.einsum("aj,ejk->eak", dn, inv)        # (ne, 4, 2)

            gi = elem_ids * 4 + g
            wg[gi] = det
            gauss_xy[gi] = np.einsum("a,eai->ei", n_sh, coords)

            row0 = 3 * gi                                    # eps_xx row
            for a in range(4):
                b_rows += [row0, row0 + 1, row0 + 2, row0 + 2]
                b_cols += [dofx[:, a], dofy[:, a], dofx[:, a], dofy[:, a]]
                b_vals += [dndx[:, a, 0], dndx[:, a, 1],
                           dndx[:, a, 1], dndx[:, a, 0]]

                q_rows += [elem_ids, elem_ids]
                q_cols += [dofx[:, a], dofy[:, a]]
                q_vals += [det * dndx[:, a, 0], det * dndx[:, a, 1]]

            for a in range(4):
                for b in range(4):
                    m_rows.append(self.elems[:, a])
                    m_cols.append(self.elems[:, b])
                    m_vals.append(det * n_sh[a] * n_sh[b])

        def _coo(rows, cols, vals, shape):
            return sp.coo_matrix(
                (np.concatenate(vals),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=shape).tocsr()

        self.wg = wg
        self.gauss_xy = gauss_xy
        self.B = _coo(b_rows, b_cols, b_vals, (3 * self.n_gauss, self.n_dofs))
        self.Q = _coo(q_rows, q_cols, q_vals, (self.n_elems, self.n_dofs))
        self.Ms = _coo(m_rows, m_cols, m_vals, (self.n_nodes, self.n_nodes))
        self.volumes = np.add.reduceat(wg, np.arange(0, self.n_gauss, 4))

    # -- named boundary sets ---------------------------------------------

    def _require_grid(self):
        if self.nx is None:
            raise ValueError("named edge sets need a grid-built mesh")

    def edge_nodes(self, side):
        """Node ids on a named side, ordered along the edge."""
        self._require_grid()
        nx, ny = self.nx, self.ny
        if side == "bottom":
            return np.arange(nx + 1)
        if side == "top":
            return ny * (nx + 1) + np.arange(nx + 1)
        if side == "left":
            return (nx + 1) * np.arange(ny + 1)
        if side == "right":
            return (nx + 1) * np.arange(ny + 1) + nx
        raise ValueError(f"unknown side {side!r}")

    def edge_elements(self, side):
        """(element, local edge) pairs on a named side."""
        self._require_grid()
        nx, ny = self.nx, self.ny
        if side == "bottom":
            return [(jx, 0) for jx in range(nx)]
        if side == "right":
            return [(jy * nx + nx - 1, 1) for jy in range(ny)]
        if side == "top":
            return [((ny - 1) * nx + jx, 2) for jx in range(nx)]
        if side == "left":
            return [(jy * nx, 3) for jy in range(ny)]
        raise ValueError(f"unknown side {side!r}")

    def dirichlet_dofs(self, sides, comps="xy"):
        """Constrained dof ids for zero displacement on the given sides."""
        dofs = []
        for side in sides:
            nodes = self.edge_nodes(side)
            if "x" in comps:
                dofs.append(self.dof_x(nodes))
            if "y" in comps:
                dofs.append(self.dof_y(nodes))
        return np.unique(np.concatenate(dofs)) if dofs else np.empty(0, int)

    def free_dofs(self, fixed):
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[fixed] = False
        return np.flatnonzero(mask)


def build_grid(nx, ny, lx, ly):
    """Uniform nx-by-ny quadrilateral grid on [0, lx] x [0, ly].

    Nodes are numbered x-fastest (node = iy*(nx+1) + ix); elements
    y-major the same way.  Element nodes run counter-clockwise from the
    lower-left corner.
    """
    if nx < 1 or ny < 1:
        raise ValueError("grid needs at least one element per direction")
    if lx <= 0.0 or ly <= 0.0:
        raise ValueError("domain lengths must be positive")
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    xg, yg = np.meshgrid(xs, ys)
    nodes = np.column_stack([xg.ravel(), yg.ravel()])
    elems = np.empty((nx * ny, 4), dtype=int)
    for jy in range(ny):
        for jx in range(nx):
            n0 = jy * (nx + 1) + jx
            elems[jy * nx + jx] = (n0, n0 + 1,
                                   n0 + nx + 2, n0 + nx + 1)
    return Mesh(nodes, elems, nx=nx, ny=ny, lx=lx, ly=ly)


# -- strain / stress utilities -------------------------------------------

def strain_at_gauss(mesh, u):
    """Voigt strain (n_gauss, 3) at every Gauss point for displacement u."""
    return (mesh.B @ np.asarray(u, dtype=float)).reshape(-1, 3)


def gauss_block_weights(mesh, h):
    """Blocks w_g * H_g as a (n_gauss, 3, 3) array.

    h may be a single (3, 3) matrix or one per Gauss point.
    """
    h = np.asarray(h, dtype=float)
    if h.shape == (3, 3):
        return mesh.wg[:, None, None] * h[None, :, :]
    if h.shape == (mesh.n_gauss, 3, 3):
        return mesh.wg[:, None, None] * h
    raise ValueError("h must be (3,3) or (n_gauss,3,3)")


def assemble_stiffness(mesh, h):
    """K = B^T diag(w_g H_g) B, exactly symmetric.

    h is the 3x3 stress-strain matrix, either shared or per Gauss point.
    """
    blocks = gauss_block_weights(mesh, h)
    d = sp.bsr_matrix((blocks, np.arange(mesh.n_gauss),
                       np.arange(mesh.n_gauss + 1)),
                      shape=(3 * mesh.n_gauss, 3 * mesh.n_gauss))
    k = (mesh.B.T @ (d @ mesh.B)).tocsr()
    return 0.5 * (k + k.T)


def internal_force(mesh, sigma):
    """f_int = B^T (w_g sigma_g) for a (n_gauss, 3) Voigt stress field."""
    s = np.asarray(sigma, dtype=float).reshape(mesh.n_gauss, 3)
    return mesh.B.T @ (mesh.wg[:, None] * s).ravel()


def mass_matrix(mesh, rho=1.0):
    """Consistent mass matrix rho * int N^T N, acting on both components."""
    z = sp.csr_matrix((mesh.n_nodes, mesh.n_nodes))
    return rho * sp.bmat([[mesh.Ms, z], [z, mesh.Ms]], format="csr")


def body_force(mesh, rho, g):
    """Load vector of a uniform body force rho * g, g = (gx, gy)."""
    f = np.zeros(mesh.n_dofs)
    ones = np.ones(mesh.n_nodes)
    per_node = mesh.Ms @ ones          # int N_a over the domain
    f[:mesh.n_nodes] = rho * g[0] * per_node
    f[mesh.n_nodes:] = rho * g[1] * per_node
    return f


def traction_load(mesh, side, t):
    """Load vector of a constant traction t = (tx, ty) on a named side.

    Uses 2-point Gauss quadrature along each boundary edge; for constant
    traction this puts half the edge resultant on each edge node.
    """
    f = np.zeros(mesh.n_dofs)
    t = np.asarray(t, dtype=float)
    for elem, edge in mesh.edge_elements(side):
        a, b = EDGES[edge]
        na, nb = mesh.elems[elem, a], mesh.elems[elem, b]
        xa, xb = mesh.nodes[na], mesh.nodes[nb]
        half_len = 0.5 * np.linalg.norm(xb - xa)
        for s in (-_G, _G):
            sha, shb = 0.5 * (1.0 - s), 0.5 * (1.0 + s)
            f[mesh.dof_x(na)] += sha * t[0] * half_len
            f[mesh.dof_y(na)] += sha * t[1] * half_len
            f[mesh.dof_x(nb)] += shb * t[0] * half_len
            f[mesh.dof_y(nb)] += shb * t[1] * half_len
    return f


def loads(mesh, rho=0.0, gravity=(0.0, 0.0), tractions=None):
    """Total external load: body force plus named-side tractions."""
    f = body_force(mesh, rho, gravity) if rho != 0.0 else np.zeros(mesh.n_dofs)
    for side, t in (tractions or {}).items():
        f += traction_load(mesh, side, t)
    return f


def solve_static(k, f, fixed, fixed_vals=None):
    """Solve K u = f with Dirichlet dofs eliminated.

    fixed_vals defaults to zeros; nonzero values are lifted into the
    right-hand side of the free block.
    """
    n = k.shape[0]
    fixed = np.asarray(fixed, dtype=int)
    vals = np.zeros(len(fixed)) if fixed_vals is None else np.asarray(fixed_vals, float)
    mask = np.ones(n, dtype=bool)
    mask[fixed] = False
    free = np.flatnonzero(mask)
    u = np.zeros(n)
    u[fixed] = vals
    kc = k.tocsr()
    rhs = f[free] - kc[free][:, fixed] @ vals
    u[free] = spsolve(kc[free][:, free].tocsc(), rhs)
    return u


def von_mises(sigma):
    """Plane-stress-style von Mises measure of a Voigt stress.

    sqrt(sxx^2 - sxx*syy + syy^2 + 3*sxy^2), elementwise over the
    leading axis when sigma is a field.
    """
    s = np.asarray(sigma, dtype=float)
    sxx, syy, sxy = s[..., 0], s[..., 1], s[..., 2]
    return np.sqrt(sxx ** 2 - sxx * syy + syy ** 2 + 3.0 * sxy ** 2)


def observe_surface(mesh, u, component="x", nodes=None):
    """Sample a displacement component at the top-edge nodes.

    u may be a single (n_dofs,) vector or a (n_steps, n_dofs) series.
    Sensor nodes default to the whole top edge, ordered by x.
    """
    if nodes is None:
        nodes = mesh.edge_nodes("top")
    dofs = mesh.dof_x(nodes) if component == "x" else mesh.dof_y(nodes)
    return np.asarray(u)[..., dofs]


# -- generalized-alpha time stepping -------------------------------------

def alpha_coefficients(rho_inf):
    """Spectral-radius parametrization of the generalized-alpha scheme."""
    if not 0.0 <= rho_inf <= 1.0:
        raise ValueError("rho_inf must lie in [0, 1]")
    am = (2.0 * rho_inf - 1.0) / (rho_inf + 1.0)
    af = rho_inf / (rho_inf + 1.0)
    beta = 0.25 * (1.0 - am + af) ** 2
    gamma = 0.5 - am + af
    return am, af, beta, gamma


class DynState:
    """(d, v, a) triple carried by the alpha scheme."""

    def __init__(self, d, v, a):
        self.d = np.asarray(d, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.a = np.asarray(a, dtype=float)


def alpha_effective_matrix(m, k_tan, dt, rho_inf=1.0):
    """(1-am) M + (1-af) beta dt^2 K, the matrix acting on a_{n+1}."""
    am, af, beta, _ = alpha_coefficients(rho_inf)
    return (1.0 - am) * m + ((1.0 - af) * beta * dt * dt) * k_tan


def alpha_step(state, dt, m, k_tan, f_aff, f_int_prev, f_ext_mid,
               rho_inf=1.0, fixed=None, lu=None):
    """One generalized-alpha step of M a + f_int(d) = f_ext.

    The internal force must be affine in the end-of-step displacement:
    f_int(d_{n+1}) = K_tan d_{n+1} + f_aff, while f_int_prev is the actual
    internal force at the previous step.  f_ext_mid is the external load
    already evaluated at t_{n+1-af}.  Constrained dofs (zero Dirichlet)
    are eliminated; pass a prefactorized `lu` of the reduced effective
    matrix to reuse across steps.
    """
    am, af, beta, gamma = alpha_coefficients(rho_inf)
    d, v, a = state.d, state.v, state.a
    d_pred = d + dt * v + dt * dt * (0.5 - beta) * a

    rhs = (f_ext_mid - am * (m @ a)
           - (1.0 - af) * (k_tan @ d_pred + f_aff)
           - af * f_int_prev)

    n = d.shape[0]
    if fixed is None or len(fixed) == 0:
        free = np.arange(n)
    else:
        mask = np.ones(n, dtype=bool)
        mask[np.asarray(fixed, int)] = False
        free = np.flatnonzero(mask)

    a_new = np.zeros(n)
    if lu is None:
        eff = alpha_effective_matrix(m, k_tan, dt, rho_inf).tocsr()
        lu = splu(eff[free][:, free].tocsc())
    a_new[free] = lu.solve(rhs[free])

    d_new = d_pred + beta * dt * dt * a_new
    v_new = v + dt * ((1.0 - gamma) * a + gamma * a_new)
    return DynState(d_new, v_new, a_new)
