"""Tests for the bilinear-quad FEM layer.

Analytical anchors:
- uniform stretch / rigid rotation reproduced exactly by the strain operator
- plane-strain patch test on a distorted mesh (linear field exact)
- stiffness matrix symmetric with a 3-dimensional rigid-body null space
- generalized-alpha: energy conservation at rho_inf = 1, second-order accuracy
"""

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from viscoinv import mesh as fem
from viscoinv import constitutive as cm


def unit_square(nx=4, ny=4):
    return fem.build_grid(nx, ny, 1.0, 1.0)


def material(e=1.0, nu=0.35):
    lp = cm.lame_from_E_nu(e, nu)
    return cm.plane_strain_matrix(lp.lam, lp.mu)


# ---------------------------------------------------------------------------
# grid construction
# ---------------------------------------------------------------------------

class TestBuildGrid:
    def test_counts(self):
        m = fem.build_grid(20, 10, 2.0, 1.0)
        assert m.n_nodes == 21 * 11
        assert m.n_elems == 200
        assert m.n_dofs == 2 * m.n_nodes
        assert m.n_gauss == 4 * m.n_elems

    def test_single_element(self):
        m = fem.build_grid(1, 1, 1.0, 1.0)
        assert m.n_nodes == 4
        np.testing.assert_allclose(sorted(m.nodes[:, 0]), [0, 0, 1, 1])

    def test_node_ordering_x_fastest(self):
        m = fem.build_grid(2, 1, 2.0, 1.0)
        np.testing.assert_allclose(m.nodes[0], [0.0, 0.0])
        np.testing.assert_allclose(m.nodes[1], [1.0, 0.0])
        np.testing.assert_allclose(m.nodes[3], [0.0, 1.0])

    def test_element_connectivity_ccw(self):
        m = fem.build_grid(2, 2, 1.0, 1.0)
        quad = m.nodes[m.elems[0]]
        # shoelace area of the first element must be positive
        x, y = quad[:, 0], quad[:, 1]
        area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
        assert area == pytest.approx(0.25)

    def test_volumes_sum_to_area(self):
        m = fem.build_grid(7, 3, 2.0, 1.5)
        assert m.volumes.sum() == pytest.approx(3.0, rel=1e-13)
        assert m.wg.sum() == pytest.approx(3.0, rel=1e-13)


class TestShapeFunctions:
    def test_partition_of_unity(self):
        n, dn = fem.shape_functions(0.3, -0.7)
        assert n.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(dn.sum(axis=0), 0.0, atol=1e-15)

    def test_corner_cardinality(self):
        n, _ = fem.shape_functions(-1.0, -1.0)
        np.testing.assert_allclose(n, [1, 0, 0, 0], atol=1e-15)
        n, _ = fem.shape_functions(1.0, 1.0)
        np.testing.assert_allclose(n, [0, 0, 1, 0], atol=1e-15)


class TestDofsAndEdges:
    def test_dof_layout(self):
        m = unit_square(2, 2)
        nodes = np.arange(m.n_nodes)
        np.testing.assert_array_equal(m.dof_x(nodes), nodes)
        np.testing.assert_array_equal(m.dof_y(nodes), nodes + m.n_nodes)

    def test_edge_nodes(self):
        m = fem.build_grid(3, 2, 3.0, 2.0)
        top = m.edge_nodes("top")
        assert len(top) == 4
        np.testing.assert_allclose(m.nodes[top][:, 1], 2.0)
        left = m.edge_nodes("left")
        np.testing.assert_allclose(m.nodes[left][:, 0], 0.0)

    def test_dirichlet_dofs_components(self):
        m = unit_square(2, 2)
        both = m.dirichlet_dofs(["bottom"])
        xonly = m.dirichlet_dofs(["bottom"], comps="x")
        assert len(both) == 2 * len(xonly)
        free = m.free_dofs(both)
        assert len(free) + len(both) == m.n_dofs
        assert np.intersect1d(free, both).size == 0


# ---------------------------------------------------------------------------
# strain operator and assembly
# ---------------------------------------------------------------------------

class TestStrainOperator:
    def test_uniform_stretch(self):
        m = unit_square(3, 3)
        u = np.zeros(m.n_dofs)
        u[m.dof_x(np.arange(m.n_nodes))] = 0.01 * m.nodes[:, 0]
        eps = fem.strain_at_gauss(m, u)
        np.testing.assert_allclose(eps[:, 0], 0.01, atol=1e-16)
        np.testing.assert_allclose(eps[:, 1:], 0.0, atol=1e-16)

    def test_simple_shear(self):
        m = unit_square(3, 3)
        u = np.zeros(m.n_dofs)
        u[m.dof_x(np.arange(m.n_nodes))] = 0.02 * m.nodes[:, 1]
        eps = fem.strain_at_gauss(m, u)
        # engineering shear gamma_xy = du_x/dy
        np.testing.assert_allclose(eps[:, 2], 0.02, atol=1e-16)

    def test_rigid_rotation_strain_free(self):
        m = unit_square(4, 4)
        theta = 1e-3
        u = np.zeros(m.n_dofs)
        u[m.dof_x(np.arange(m.n_nodes))] = -theta * m.nodes[:, 1]
        u[m.dof_y(np.arange(m.n_nodes))] = theta * m.nodes[:, 0]
        eps = fem.strain_at_gauss(m, u)
        np.testing.assert_allclose(eps, 0.0, atol=1e-15)

    def test_volumetric_integral(self):
        m = fem.build_grid(3, 2, 3.0, 2.0)
        u = np.zeros(m.n_dofs)
        u[m.dof_x(np.arange(m.n_nodes))] = 0.01 * m.nodes[:, 0]
        u[m.dof_y(np.arange(m.n_nodes))] = 0.02 * m.nodes[:, 1]
        ev = m.Q @ u
        np.testing.assert_allclose(ev, 0.03 * m.volumes, rtol=1e-13)


class TestStiffness:
    def test_exact_symmetry(self):
        m = unit_square(4, 4)
        k = fem.assemble_stiffness(m, material())
        d = (k - k.T).tocoo()
        assert d.nnz == 0 or np.max(np.abs(d.data)) == 0.0

    def test_rigid_body_null_space(self):
        m = unit_square(4, 4)
        k = fem.assemble_stiffness(m, material())
        nodes = np.arange(m.n_nodes)
        modes = np.zeros((3, m.n_dofs))
        modes[0, m.dof_x(nodes)] = 1.0
        modes[1, m.dof_y(nodes)] = 1.0
        modes[2, m.dof_x(nodes)] = -m.nodes[:, 1]
        modes[2, m.dof_y(nodes)] = m.nodes[:, 0]
        for v in modes:
            assert np.max(np.abs(k @ v)) < 1e-13

    def test_constrained_spd(self):
        m = unit_square(3, 3)
        k = fem.assemble_stiffness(m, material())
        free = m.free_dofs(m.dirichlet_dofs(["bottom"]))
        kff = k[free][:, free].toarray()
        w = np.linalg.eigvalsh(kff)
        assert w.min() > 0.0

    def test_internal_force_consistency(self):
        """internal_force(sigma(u)) equals K u for a linear material."""
        m = unit_square(3, 3)
        h = material()
        k = fem.assemble_stiffness(m, h)
        rng = np.random.default_rng(3)
        u = rng.standard_normal(m.n_dofs)
        sigma = fem.strain_at_gauss(m, u) @ h.T
        np.testing.assert_allclose(fem.internal_force(m, sigma), k @ u,
                                   rtol=1e-12, atol=1e-13)


class TestPatchTest:
    def test_distorted_mesh_linear_field(self):
        """A linear displacement field is exact on a distorted mesh."""
        m = unit_square(3, 3)
        nodes = m.nodes.copy()
        interior = np.flatnonzero(
            (nodes[:, 0] > 0) & (nodes[:, 0] < 1)
            & (nodes[:, 1] > 0) & (nodes[:, 1] < 1))
        rng = np.random.default_rng(7)
        nodes[interior] += rng.uniform(-0.08, 0.08, (len(interior), 2))
        md = fem.Mesh(nodes, m.elems, m.nx, m.ny, m.lx, m.ly)

        a, b, c, d = 2e-3, -1e-3, 5e-4, 1.5e-3
        exact = np.zeros(md.n_dofs)
        exact[md.dof_x(np.arange(md.n_nodes))] = a * nodes[:, 0] + b * nodes[:, 1]
        exact[md.dof_y(np.arange(md.n_nodes))] = c * nodes[:, 0] + d * nodes[:, 1]

        k = fem.assemble_stiffness(md, material())
        boundary = np.setdiff1d(np.arange(md.n_nodes), interior)
        fixed = np.concatenate([md.dof_x(boundary), md.dof_y(boundary)])
        u = fem.solve_static(k, np.zeros(md.n_dofs), fixed, exact[fixed])
        np.testing.assert_allclose(u, exact, atol=1e-15)


class TestMassAndLoads:
    def test_total_mass(self):
        m = fem.build_grid(4, 4, 2.0, 1.0)
        ms = fem.mass_matrix(m, rho=3.0)
        ones = np.ones(m.n_dofs)
        # sum over x-dofs only counts the area once
        assert ones @ (ms @ ones) == pytest.approx(2 * 3.0 * 2.0, rel=1e-12)

    def test_gravity_resultant(self):
        m = fem.build_grid(4, 4, 2.0, 1.0)
        f = fem.body_force(m, rho=2.0, g=np.array([0.0, -9.81]))
        nodes = np.arange(m.n_nodes)
        assert f[m.dof_y(nodes)].sum() == pytest.approx(-2.0 * 9.81 * 2.0,
                                                        rel=1e-12)
        assert np.abs(f[m.dof_x(nodes)]).max() == 0.0

    def test_traction_resultant(self):
        m = fem.build_grid(3, 5, 1.0, 2.0)
        f = fem.traction_load(m, "right", np.array([-0.4, 0.0]))
        nodes = np.arange(m.n_nodes)
        assert f[m.dof_x(nodes)].sum() == pytest.approx(-0.4 * 2.0, rel=1e-12)
        edge = m.edge_nodes("left")
        assert np.abs(f[m.dof_x(edge)]).max() == 0.0


class TestStaticSolve:
    def test_uniaxial_column(self):
        """Stretched column: compare against the constrained-modulus answer."""
        m = fem.build_grid(2, 8, 0.5, 2.0)
        lp = cm.lame_from_E_nu(1.0, 0.3)
        h = cm.plane_strain_matrix(lp.lam, lp.mu)
        k = fem.assemble_stiffness(m, h)
        t = 0.01
        f = fem.traction_load(m, "top", np.array([0.0, t]))
        fixed = np.concatenate([
            m.dirichlet_dofs(["bottom"], comps="y"),
            m.dirichlet_dofs(["left", "right"], comps="x")])
        u = fem.solve_static(k, f, np.unique(fixed), None)
        # laterally confined: u_y(top) = t * H / (lambda + 2 mu)
        expect = t * 2.0 / (lp.lam + 2 * lp.mu)
        top = m.edge_nodes("top")
        np.testing.assert_allclose(u[m.dof_y(top)], expect, rtol=1e-10)


# ---------------------------------------------------------------------------
# generalized-alpha time stepping
# ---------------------------------------------------------------------------

class TestAlphaCoefficients:
    def test_no_dissipation_limit(self):
        am, af, beta, gamma = fem.alpha_coefficients(1.0)
        assert am == pytest.approx(0.5)
        assert af == pytest.approx(0.5)
        assert gamma == pytest.approx(0.5)
        assert beta == pytest.approx(0.25)

    def test_full_dissipation_limit(self):
        am, af, beta, gamma = fem.alpha_coefficients(0.0)
        assert am == pytest.approx(-1.0)
        assert af == pytest.approx(0.0)
        assert gamma == pytest.approx(1.5)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            fem.alpha_coefficients(1.5)


def oscillator_setup():
    """Unit mass and stiffness on a single dof: u'' + u = 0."""
    import scipy.sparse as sp
    m = sp.identity(1, format="csr")
    k = sp.identity(1, format="csr")
    return m, k


class TestAlphaStep:
    def test_energy_conservation(self):
        m, k = oscillator_setup()
        dt = 0.1
        state = fem.DynState(d=np.array([1.0]), v=np.zeros(1), a=np.array([-1.0]))
        e0 = 0.5 * (state.v @ state.v + state.d @ state.d)
        for _ in range(1000):
            state = fem.alpha_step(state, dt, m, k, np.zeros(1), k @ state.d,
                                   np.zeros(1), rho_inf=1.0)
        e1 = 0.5 * (state.v @ state.v + state.d @ state.d)
        assert abs(e1 - e0) < 1e-12

    def test_second_order_accuracy(self):
        m, k = oscillator_setup()
        t_end, errs = 2.0, []
        for dt in (0.02, 0.01):
            n = int(round(t_end / dt))
            state = fem.DynState(d=np.array([1.0]), v=np.zeros(1),
                                 a=np.array([-1.0]))
            worst = 0.0
            for i in range(n):
                state = fem.alpha_step(state, dt, m, k, np.zeros(1),
                                       k @ state.d, np.zeros(1), rho_inf=1.0)
                worst = max(worst, abs(state.d[0] - np.cos((i + 1) * dt)))
            errs.append(worst)
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)

    def test_numerical_damping(self):
        """rho_inf < 1 kills modes that are unresolved by the step size."""
        m, k = oscillator_setup()
        state = fem.DynState(d=np.array([1.0]), v=np.zeros(1), a=np.array([-1.0]))
        for _ in range(200):
            state = fem.alpha_step(state, 5.0, m, k, np.zeros(1), k @ state.d,
                                   np.zeros(1), rho_inf=0.5)
        assert 0.5 * (state.v @ state.v + state.d @ state.d) < 1e-10

    def test_zero_state_stays_zero(self):
        m, k = oscillator_setup()
        state = fem.DynState(d=np.zeros(1), v=np.zeros(1), a=np.zeros(1))
        state = fem.alpha_step(state, 0.1, m, k, np.zeros(1), np.zeros(1),
                               np.zeros(1))
        assert np.all(state.d == 0) and np.all(state.v == 0)

    def test_free_fall(self):
        """Constant force, no stiffness: exact quadratic is reproduced."""
        import scipy.sparse as sp
        m = sp.identity(1, format="csr")
        k = sp.csr_matrix((1, 1))
        g = np.array([-2.0])
        dt, n = 0.05, 40
        state = fem.DynState(d=np.zeros(1), v=np.zeros(1), a=g.copy())
        for _ in range(n):
            state = fem.alpha_step(state, dt, m, k, np.zeros(1), np.zeros(1),
                                   g, rho_inf=1.0)
        t = n * dt
        assert state.d[0] == pytest.approx(0.5 * g[0] * t * t, rel=1e-12)


class TestObservation:
    def test_surface_observation_default_top(self):
        m = unit_square(3, 3)
        u = np.zeros(m.n_dofs)
        top = m.edge_nodes("top")
        u[m.dof_x(top)] = 7.0
        np.testing.assert_allclose(fem.observe_surface(m, u), 7.0)

    def test_series_and_component(self):
        m = unit_square(2, 2)
        series = np.zeros((3, m.n_dofs))
        top = m.edge_nodes("top")
        for i in range(3):
            series[i, m.dof_y(top)] = float(i)
        out = fem.observe_surface(m, series, component="y")
        assert out.shape == (3, len(top))
        np.testing.assert_allclose(out[2], 2.0)


class TestVonMises:
    def test_uniaxial(self):
        s = np.array([[1.0, 0.0, 0.0]])
        assert fem.von_mises(s)[0] == pytest.approx(1.0)

    def test_pure_shear(self):
        s = np.array([[0.0, 0.0, 1.0]])
        assert fem.von_mises(s)[0] == pytest.approx(np.sqrt(3.0))
