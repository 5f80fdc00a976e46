"""Tests for the taped simulators.

The load-bearing checks are (a) taped rollouts reproduce the plain
steppers exactly, and (b) adjoint gradients of a least-squares loss match
central finite differences for every provider family.
"""

import numpy as np
import pytest

from viscoinv import autodiff as ad
from viscoinv import constitutive as cm
from viscoinv import flow
from viscoinv import mesh as fem
from viscoinv import nn
from viscoinv import simulate as sim


def sum_obs_loss(tape, states, sel):
    loss = None
    for s in states:
        term = ad.sum_squares(tape, ad.gather(tape, s, sel))
        loss = term if loss is None else ad.add(tape, loss, term)
    return loss


# ---------------------------------------------------------------------------
# taped helper nodes
# ---------------------------------------------------------------------------

class TestHelpers:
    def test_tile_scalar(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([2.5]))
        t = sim.tile_scalar(tape, x, 4)
        np.testing.assert_array_equal(t.value, 2.5)
        g = tape.backward(ad.sum_squares(tape, t)).of(x)
        np.testing.assert_allclose(g, [4 * 2 * 2.5])

    def test_tile_matrix(self):
        tape = ad.Tape()
        h = tape.leaf(np.arange(9.0).reshape(3, 3))
        t = sim.tile_matrix(tape, h, 5)
        assert t.value.shape == (5, 3, 3)
        seed = np.ones((5, 3, 3))
        loss = tape.record(np.sum(t.value), [t], lambda g: (g * seed,))
        g = tape.backward(loss).of(h)
        np.testing.assert_array_equal(g, np.full((3, 3), 5.0))

    def test_spd_gauss_matches_single(self):
        rng = np.random.default_rng(0)
        p = rng.standard_normal((7, 6)) * 0.4
        tape = ad.Tape()
        out = sim.spd_gauss(tape, tape.leaf(p))
        for i in range(7):
            np.testing.assert_allclose(out.value[i], nn.spd_from_param(p[i]),
                                       atol=1e-14)

    def test_spd_gauss_gradient(self):
        rng = np.random.default_rng(1)
        p = rng.standard_normal((3, 6)) * 0.3
        w = rng.standard_normal((3, 3, 3))

        def f(pf):
            tape = ad.Tape()
            h = sim.spd_gauss(tape, tape.leaf(pf.reshape(3, 6)))
            return float(np.sum(w * h.value))

        tape = ad.Tape()
        pv = tape.leaf(p)
        h = sim.spd_gauss(tape, pv)
        loss = tape.record(np.sum(w * h.value), [h], lambda g: (g * w,))
        grad = tape.backward(loss).of(pv).ravel()
        rep = ad.gradient_check(lambda t: f(t), p.ravel(), grad)
        assert rep["max_rel_err"] < 1e-8

    def test_strain_op_roundtrip(self):
        m = fem.build_grid(2, 2, 1.0, 1.0)
        u = np.random.default_rng(2).standard_normal(m.n_dofs)
        tape = ad.Tape()
        uv = tape.leaf(u)
        e = sim.strain_op(tape, m.B, uv)
        np.testing.assert_allclose(e.value, fem.strain_at_gauss(m, u))
        seed = np.random.default_rng(3).standard_normal(e.value.shape)
        loss = tape.record(np.sum(seed * e.value), [e], lambda g: (g * seed,))
        g = tape.backward(loss).of(uv)
        np.testing.assert_allclose(g, m.B.T @ seed.ravel(), atol=1e-14)

    def test_free_positions(self):
        m = fem.build_grid(3, 3, 1.0, 1.0)
        fixed = m.dirichlet_dofs(["left"])
        free = m.free_dofs(fixed)
        sel = sim.free_positions(m, fixed, free[[0, 5, 7]])
        np.testing.assert_array_equal(sel, [0, 5, 7])
        with pytest.raises(ValueError):
            sim.free_positions(m, fixed, [fixed[0]])


# ---------------------------------------------------------------------------
# dynamic viscoelasticity
# ---------------------------------------------------------------------------

def dyn_setup():
    m = fem.build_grid(3, 2, 1.5, 1.0)
    fixed = m.dirichlet_dofs(["bottom"])
    dt, n_steps = 0.1, 3
    pulse = fem.traction_load(m, "right", (-1.0, 0.0))
    t_end = dt * n_steps

    def f_ext(t):
        return pulse * np.sin(np.pi * t / t_end)

    top = m.edge_nodes("top")
    obs = np.concatenate([m.dof_x(top), m.dof_y(top)])
    return m, fixed, dt, n_steps, f_ext, obs


class TestDynamicSim:
    def test_elastic_matches_alpha_step_oracle(self):
        """History-free provider must reproduce the generic alpha stepper."""
        m, fixed, dt, n_steps, f_ext, _ = dyn_setup()
        lp = cm.lame_from_E_nu(1.0, 0.35)
        h = cm.plane_strain_matrix(lp.lam, lp.mu)
        prov = sim.ElasticProvider(m.n_gauss, h)
        tape = ad.Tape()
        out = sim.simulate_dynamic(tape, m, prov, dt, n_steps, f_ext, fixed,
                                   rho_inf=0.8)

        from scipy.sparse.linalg import splu
        mass = fem.mass_matrix(m)
        k = fem.assemble_stiffness(m, h)
        free = m.free_dofs(fixed)
        a0 = np.zeros(m.n_dofs)
        a0[free] = splu(mass[free][:, free].tocsc()).solve(f_ext(0.0)[free])
        state = fem.DynState(np.zeros(m.n_dofs), np.zeros(m.n_dofs), a0)
        _, af, _, _ = fem.alpha_coefficients(0.8)
        for n in range(n_steps):
            f_mid = f_ext(dt * (n + 1.0 - af))
            state = fem.alpha_step(state, dt, mass, k, np.zeros(m.n_dofs),
                                   k @ state.d, f_mid, rho_inf=0.8,
                                   fixed=fixed)
            np.testing.assert_allclose(ad.value_of(out["d"][n]), state.d,
                                       atol=1e-13)

    def test_taped_values_match_plain_provider(self):
        m, fixed, dt, n_steps, f_ext, _ = dyn_setup()
        plain = sim.simulate_dynamic(
            ad.Tape(), m, sim.MaxwellProvider(m.n_gauss, 0.4, 0.9, 1.3),
            dt, n_steps, f_ext, fixed)
        tape = ad.Tape()
        th = tape.leaf(np.array([0.4, 0.9, 1.3]))
        prov = sim.MaxwellProvider(m.n_gauss, ad.gather(tape, th, [0]),
                                   ad.gather(tape, th, [1]),
                                   ad.gather(tape, th, [2]))
        taped = sim.simulate_dynamic(tape, m, prov, dt, n_steps, f_ext, fixed)
        for k in range(n_steps):
            np.testing.assert_allclose(ad.value_of(taped["d"][k]),
                                       ad.value_of(plain["d"][k]), atol=1e-14)
            np.testing.assert_allclose(ad.value_of(taped["sigma"][k]),
                                       ad.value_of(plain["sigma"][k]),
                                       atol=1e-14)

    def test_maxwell_scalar_gradient(self):
        m, fixed, dt, n_steps, f_ext, obs = dyn_setup()
        rng = np.random.default_rng(0)
        target = [1e-3 * rng.standard_normal(obs.size) for _ in range(n_steps)]

        def fg(theta):
            tape = ad.Tape()
            th = tape.leaf(theta)
            prov = sim.MaxwellProvider(m.n_gauss, ad.gather(tape, th, [0]),
                                       ad.gather(tape, th, [1]),
                                       ad.gather(tape, th, [2]))
            out = sim.simulate_dynamic(tape, m, prov, dt, n_steps, f_ext,
                                       fixed)
            loss = None
            for k, d in enumerate(out["d"]):
                r = ad.sub(tape, ad.gather(tape, d, obs), target[k])
                term = ad.sum_squares(tape, r)
                loss = term if loss is None else ad.add(tape, loss, term)
            return float(ad.value_of(loss)), tape.backward(loss).of(th)

        theta = np.array([0.4, 0.9, 1.3])
        _, g = fg(theta)
        rep = ad.gradient_check(lambda t: fg(t)[0], theta, g)
        assert rep["max_rel_err"] < 1e-7

    def test_eta_field_gradient(self):
        m, fixed, dt, n_steps, f_ext, obs = dyn_setup()

        def fg(theta):
            tape = ad.Tape()
            inv_eta = tape.leaf(theta)
            prov = sim.MaxwellProvider(m.n_gauss, 0.37, 0.86, inv_eta)
            out = sim.simulate_dynamic(tape, m, prov, dt, n_steps, f_ext,
                                       fixed)
            loss = sum_obs_loss(tape, out["d"], obs)
            return float(ad.value_of(loss)), tape.backward(loss).of(inv_eta)

        theta = 1.0 + 0.3 * np.random.default_rng(1).random(m.n_gauss)
        _, g = fg(theta)
        rep = ad.gradient_check(lambda t: fg(t)[0], theta, g,
                                components=range(0, m.n_gauss, 5))
        assert rep["max_rel_err"] < 1e-5

    def test_viscosity_nn_gradient(self):
        m, fixed, dt, n_steps, f_ext, obs = dyn_setup()
        spec = nn.default_mlp(3, 1, width=6, depth=2)
        w0 = nn.glorot_init(spec, seed=5) * 0.5

        def fg(theta):
            tape = ad.Tape()
            w = tape.leaf(theta)
            prov = sim.ViscosityNNProvider(1.85, 4.33, spec, w)
            out = sim.simulate_dynamic(tape, m, prov, dt, n_steps, f_ext,
                                       fixed)
            loss = sum_obs_loss(tape, out["d"], obs)
            return float(ad.value_of(loss)), tape.backward(loss).of(w)

        _, g = fg(w0)
        rep = ad.gradient_check(lambda t: fg(t)[0], w0, g,
                                n_directions=6, seed=1)
        assert rep["max_rel_err"] < 1e-7

    def test_viscosity_law_provider_not_differentiable(self):
        prov = sim.ViscosityLawProvider(1.0, 1.0, cm.viscosity_law_smooth)
        tape = ad.Tape()
        sig = tape.leaf(np.zeros((4, 3)))
        with pytest.raises(TypeError):
            prov.coeffs(tape, sig, np.zeros((4, 3)), 0.1)


# ---------------------------------------------------------------------------
# quasi-static single-phase poroelasticity
# ---------------------------------------------------------------------------

def poro_setup():
    m = fem.build_grid(4, 4, 1.0, 1.0)
    g = flow.FlowGrid(m)
    par = flow.SinglePhaseParams()
    fixed = m.dirichlet_dofs(["left", "right"])
    src = np.zeros(16)
    src[g.cell_at(0.25, 0.5)] = 2.0
    src[g.cell_at(0.75, 0.5)] = -2.0
    top = m.edge_nodes("top")
    obs_full = np.concatenate([m.dof_x(top)[1:-1], m.dof_y(top)[1:-1]])
    sel = sim.free_positions(m, fixed, obs_full)
    return m, g, par, fixed, src, sel


class TestSinglePhaseSim:
    def test_matches_plain_block_stepper(self):
        m, g, par, fixed, src, _ = poro_setup()
        lp = cm.lame_from_E_nu(1.0, 0.35)
        h = cm.plane_strain_matrix(lp.lam, lp.mu)
        tape = ad.Tape()
        out = sim.simulate_single_phase(tape, m, g, sim.ElasticProvider(
            m.n_gauss, h), par, 0.1, 4, src, fixed, {"top": 0.0})

        k = fem.assemble_stiffness(m, h)
        sysb = flow.SinglePhaseSystem(m, g, par, 0.1, k, fixed, {"top": 0.0})
        u, p = np.zeros(sysb.n_u), np.zeros(16)
        for n in range(4):
            u, p = sysb.step(u, p, src)
            np.testing.assert_allclose(ad.value_of(out["u"][n]), u,
                                       atol=1e-16)
            np.testing.assert_allclose(ad.value_of(out["p"][n]), p,
                                       atol=1e-16)

    def test_spd_h_gradient(self):
        m, g, par, fixed, src, sel = poro_setup()
        p0 = nn.spd_param_from_matrix(np.array([[1.6, 0.86, 0.0],
                                                [0.86, 1.6, 0.0],
                                                [0.0, 0.0, 0.37]]))

        def fg(p6):
            tape = ad.Tape()
            pv = tape.leaf(p6)
            prov = sim.ElasticProvider(m.n_gauss, ad.spd(tape, pv))
            out = sim.simulate_single_phase(tape, m, g, prov, par, 0.1, 3,
                                            src, fixed, {"top": 0.0})
            loss = sum_obs_loss(tape, out["u"], sel)
            return float(ad.value_of(loss)), tape.backward(loss).of(pv)

        _, grad = fg(p0)
        rep = ad.gradient_check(lambda t: fg(t)[0], p0, grad)
        assert rep["max_rel_err"] < 1e-7

    def test_stress_nn_gradient(self):
        m, g, par, fixed, src, sel = poro_setup()
        spec = nn.default_mlp(6, 3, width=8, depth=2)
        pack = ad.Packing([("w", spec.n_params), ("h", 6)])
        theta0 = pack.pack({
            "w": nn.glorot_init(spec, seed=3) * 0.3,
            "h": nn.spd_param_from_matrix(np.diag([1.5, 1.5, 0.4]))})

        def fg(theta):
            tape = ad.Tape()
            th = tape.leaf(theta)
            prov = sim.StressNNProvider(m.n_gauss, spec,
                                        ad.gather(tape, th,
                                                  pack.slice_of("w")),
                                        ad.gather(tape, th,
                                                  pack.slice_of("h")))
            out = sim.simulate_single_phase(tape, m, g, prov, par, 0.1, 3,
                                            src, fixed, {"top": 0.0})
            loss = sum_obs_loss(tape, out["u"], sel)
            return float(ad.value_of(loss)), tape.backward(loss).of(th)

        _, grad = fg(theta0)
        rep = ad.gradient_check(lambda t: fg(t)[0], theta0, grad,
                                n_directions=6, seed=0)
        assert rep["max_rel_err"] < 1e-7

    def test_spacevar_h_gradient(self):
        m, g, par, fixed, src, sel = poro_setup()
        base = nn.spd_param_from_matrix(np.diag([1.5, 1.5, 0.4]))
        p0 = np.tile(base, (m.n_gauss, 1))

        def fg(pflat):
            tape = ad.Tape()
            pv = tape.leaf(pflat)
            prov = sim.SpacevarElasticProvider(
                tape.record(pv.value.reshape(m.n_gauss, 6), [pv],
                            lambda gr: (gr.ravel(),)))
            out = sim.simulate_single_phase(tape, m, g, prov, par, 0.1, 3,
                                            src, fixed, {"top": 0.0})
            loss = sum_obs_loss(tape, out["u"], sel)
            return float(ad.value_of(loss)), tape.backward(loss).of(pv)

        _, grad = fg(p0.ravel())
        rep = ad.gradient_check(lambda t: fg(t)[0], p0.ravel(), grad,
                                components=range(0, p0.size, 37))
        assert rep["max_rel_err"] < 1e-5

    def test_requires_constant_tangent(self):
        m, g, par, fixed, src, _ = poro_setup()
        spec = nn.default_mlp(3, 1, width=4, depth=1)
        prov = sim.ViscosityNNProvider(1.0, 1.0, spec,
                                       nn.glorot_init(spec, seed=0))
        with pytest.raises(ValueError):
            sim.simulate_single_phase(ad.Tape(), m, g, prov, par, 0.1, 2,
                                      src, fixed, {"top": 0.0})


# ---------------------------------------------------------------------------
# sequential two-phase poromechanics
# ---------------------------------------------------------------------------

def two_phase_setup():
    m = fem.build_grid(6, 6, 1.0, 1.0)
    g = flow.FlowGrid(m, perm=4.0)
    fixed = m.dirichlet_dofs(["left", "right"])
    q2 = np.zeros(g.n_cells); q2[g.cell_at(0.25, 0.5)] = 1.2
    q1 = np.zeros(g.n_cells); q1[g.cell_at(0.75, 0.5)] = -1.2
    top = m.edge_nodes("top")
    obs_full = np.concatenate([m.dof_x(top)[1:-1], m.dof_y(top)[1:-1]])
    sel = sim.free_positions(m, fixed, obs_full)
    return m, g, fixed, q1, q2, sel


def maxwell_var_provider(tape, theta, n_gauss):
    th = tape.leaf(theta)
    return sim.MaxwellProvider(
        n_gauss, ad.gather(tape, th, [0]), ad.gather(tape, th, [1]),
        ad.reciprocal(tape, ad.gather(tape, th, [2]))), th


class TestTwoPhaseSim:
    def test_matches_plain_stepper(self):
        m, g, fixed, q1, q2, _ = two_phase_setup()
        par = flow.TwoPhaseParams(gravity=0.1)
        truth = (5.0, 5.0, 2.0)
        plain = sim.run_two_phase(m, g, cm.MaxwellParams(*truth), par, 0.1,
                                  5, q1, q2, {"top": 0.0}, fixed)
        tape = ad.Tape()
        prov, _ = maxwell_var_provider(tape, np.array(truth), m.n_gauss)
        taped = sim.simulate_two_phase(tape, m, g, prov, par, 0.1, 5, q1, q2,
                                       {"top": 0.0}, fixed)
        for k in range(5):
            for key in ("u", "s2", "psi", "sigma"):
                np.testing.assert_allclose(ad.value_of(taped[key][k]),
                                           ad.value_of(plain[key][k]),
                                           atol=5e-14)

    def test_gradient_with_gravity_and_dirichlet(self):
        m, g, fixed, q1, q2, sel = two_phase_setup()
        par = flow.TwoPhaseParams(gravity=0.1)

        def fg(theta):
            tape = ad.Tape()
            prov, th = maxwell_var_provider(tape, theta, m.n_gauss)
            out = sim.simulate_two_phase(tape, m, g, prov, par, 0.1, 5,
                                         q1, q2, {"top": 0.0}, fixed)
            loss = sum_obs_loss(tape, out["u"], sel)
            return float(ad.value_of(loss)), tape.backward(loss).of(th)

        theta = np.array([7.0, 6.0, 3.0])
        _, grad = fg(theta)
        rep = ad.gradient_check(lambda t: fg(t)[0], theta, grad)
        assert rep["max_rel_err"] < 1e-7

    def test_gradient_all_neumann_no_gravity(self):
        m, g, fixed, q1, q2, sel = two_phase_setup()
        par = flow.TwoPhaseParams(gravity=0.0)

        def fg(theta):
            tape = ad.Tape()
            prov, th = maxwell_var_provider(tape, theta, m.n_gauss)
            out = sim.simulate_two_phase(tape, m, g, prov, par, 0.1, 5,
                                         q1, q2, None, fixed)
            loss = sum_obs_loss(tape, out["u"], sel)
            return float(ad.value_of(loss)), tape.backward(loss).of(th)

        theta = np.array([7.0, 6.0, 3.0])
        _, grad = fg(theta)
        rep = ad.gradient_check(lambda t: fg(t)[0], theta, grad)
        assert rep["max_rel_err"] < 1e-7

    def test_loss_at_truth_is_zero(self):
        m, g, fixed, q1, q2, sel = two_phase_setup()
        par = flow.TwoPhaseParams(gravity=0.1)
        truth = np.array([5.0, 5.0, 2.0])
        plain = sim.run_two_phase(m, g, cm.MaxwellParams(*truth), par, 0.1,
                                  5, q1, q2, {"top": 0.0}, fixed)
        target = [u[sel] for u in plain["u"]]

        tape = ad.Tape()
        prov, _ = maxwell_var_provider(tape, truth, m.n_gauss)
        out = sim.simulate_two_phase(tape, m, g, prov, par, 0.1, 5, q1, q2,
                                     {"top": 0.0}, fixed)
        loss = None
        for k, u in enumerate(out["u"]):
            r = ad.sub(tape, ad.gather(tape, u, sel), target[k])
            term = ad.sum_squares(tape, r)
            loss = term if loss is None else ad.add(tape, loss, term)
        assert float(ad.value_of(loss)) < 1e-28
