"""The six inverse-modeling studies and their assessment drivers.

Each scenario couples one forward model with one unknown-recovery task:

* ``eta_depth``      — dynamic viscoelasticity, per-Gauss-point 1/eta field
                       recovered from horizontal surface displacements.
* ``elastic_H_poro`` — coupled single-phase poroelasticity, 3x3 elasticity
                       matrix (log-Cholesky parameterized) from surface data.
* ``eta_nn``         — dynamic viscoelasticity, stress-dependent viscosity
                       eta(sigma) represented by a neural network; assessed
                       by reproducing held-out point histories.
* ``kv_1d``          — material-point trajectories from a Kelvin-Voigt law;
                       compares pair-supervised vs recurrent NN training.
* ``nn_coupled``     — single-phase poroelasticity with a Maxwell truth;
                       NN constitutive model vs space-varying-H baseline,
                       assessed on a held-out source scale.
* ``two_phase``      — two-phase poromechanics, Maxwell (mu, lambda, eta)
                       recovered from surface displacements.

`default_spec` returns the calibrated configuration for each scenario;
`run_experiment` executes one and returns an `AssessmentReport`.  The
`build_problem` hook exposes the taped loss of every scenario in a uniform
(fg, theta0, bounds, segments) shape for gradient checking and the CLI.
"""

import time

import numpy as np
from dataclasses import dataclass, field

from . import autodiff as ad
from . import constitutive as cm
from . import flow
from . import inverse as inv
from . import mesh as fem
from . import nn
from . import optim
from . import simulate as sim

SCENARIOS = ("eta_depth", "elastic_H_poro", "eta_nn", "kv_1d",
             "nn_coupled", "two_phase")


@dataclass
class ExperimentSpec:
    scenario: str
    nx: int
    ny: int
    lx: float
    ly: float
    dt: float
    n_steps: int
    truth: dict
    noise: float = 0.0
    seed: int = 0
    assessment: str = "direct"
    optimizer: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ValueError("unknown scenario %r (expected one of %s)"
                             % (self.scenario, ", ".join(SCENARIOS)))
        if self.dt <= 0.0 or self.n_steps < 1:
            raise ValueError("need dt > 0 and n_steps >= 1")
        if self.noise < 0.0:
            raise ValueError("noise must be >= 0")
        required = _REQUIRED_TRUTH[self.scenario]
        missing = sorted(set(required) - set(self.truth))
        if missing:
            raise ValueError("scenario %s is missing truth keys: %s"
                             % (self.scenario, ", ".join(missing)))
        return self


@dataclass
class AssessmentReport:
    scenario: str
    assessment: str
    metrics: dict
    recovered: dict
    history: list
    status: str
    seconds: float


_REQUIRED_TRUTH = {
    "eta_depth": ("E", "nu"),
    "elastic_H_poro": ("E", "nu"),
    "eta_nn": ("E", "nu", "law"),
    "kv_1d": ("g_store", "g_loss_over_omega"),
    "nn_coupled": ("mu", "lam", "eta"),
    "two_phase": ("mu", "lam", "eta"),
}


def default_spec(scenario, **overrides):
    """Calibrated defaults for each study (see README for rationale)."""
    base = {
        "eta_depth": dict(
            nx=10, ny=5, lx=2.0, ly=1.0, dt=0.05, n_steps=100,
            truth=dict(E=1.0, nu=0.35),
            assessment="direct",
            optimizer=dict(max_iter=1500, memory=30, grad_tol=0.0,
                           f_rel_tol=0.0),
            options=dict(load=0.1, pulse_T=0.5, rho_inf=1.0,
                         init_inv_eta=2.0, inv_eta_lo=1e-6, inv_eta_hi=1e3)),
        "elastic_H_poro": dict(
            nx=10, ny=10, lx=1.0, ly=1.0, dt=0.1, n_steps=10,
            truth=dict(E=1.0, nu=0.35),
            assessment="direct",
            optimizer=dict(max_iter=300, grad_tol=1e-14, f_rel_tol=0.0),
            options=dict(source=2.0, init_scale=2.0)),
        "eta_nn": dict(
            nx=10, ny=5, lx=2.0, ly=1.0, dt=0.1, n_steps=20,
            truth=dict(E=5.0, nu=0.35, law="smooth"),
            assessment="reproduction",
            optimizer=dict(max_iter=200, grad_tol=0.0, f_rel_tol=0.0),
            options=dict(load=0.1, rho_inf=1.0, width=20, depth=3,
                         activation="tanh", eta_floor=0.1, init_scale=0.1)),
        "kv_1d": dict(
            nx=1, ny=1, lx=1.0, ly=1.0, dt=0.02, n_steps=500,
            truth=dict(g_store=1.0, g_loss_over_omega=0.3),
            assessment="train_test",
            optimizer=dict(max_iter=500, grad_tol=1e-12, f_rel_tol=1e-16),
            options=dict(eps0=0.1, amplitudes=(1.0, 0.8, 1.2, 0.9, 1.1),
                         train_frac=0.2, width=20, depth=3,
                         activation="tanh", init_scale=0.1)),
        "nn_coupled": dict(
            nx=8, ny=8, lx=1.0, ly=1.0, dt=0.05, n_steps=20,
            truth=dict(mu=1.0, lam=1.0, eta=1.0),
            assessment="train_test",
            optimizer=dict(max_iter=500, memory=30, grad_tol=0.0,
                           f_rel_tol=0.0),
            options=dict(source=50.0, train_scales=(0.5, 0.75, 1.0, 1.25, 1.5),
                         test_scale=1.1, width=20, depth=3,
                         activation="tanh", init_scale=0.1)),
        "two_phase": dict(
            nx=10, ny=10, lx=1.0, ly=1.0, dt=0.1, n_steps=8,
            truth=dict(mu=5.0, lam=5.0, eta=2.0),
            assessment="direct",
            optimizer=dict(max_iter=200, grad_tol=1e-12, f_rel_tol=0.0),
            options=dict(source=1.2, perm=4.0, gravity=0.1, phi0=0.25,
                         rho1=1.0, rho2=0.8, init_scale=2.0,
                         bounds=((2.0, 40.0), (2.0, 40.0), (0.8, 16.0)))),
    }
    if scenario not in base:
        raise ValueError("unknown scenario %r" % (scenario,))
    kw = base[scenario]
    for key, val in overrides.items():
        if key in ("options", "optimizer", "truth"):
            merged = dict(kw[key])
            merged.update(val)
            kw[key] = merged
        else:
            kw[key] = val
    return ExperimentSpec(scenario=scenario, **kw).validate()


def _config_from(spec):
    return optim.LbfgsConfig(**spec.optimizer)


# ---------------------------------------------------------------------------
# shared scenario plumbing
# ---------------------------------------------------------------------------

def depth_inv_eta(y):
    """True 1/eta(y) profile: a compliant layer at mid depth."""
    return 1.0 + 3.0 * np.exp(-((y - 0.4) / 0.3) ** 2)


def _dynamic_setup(spec):
    """Mesh, supports, half-sine traction pulse, and surface u_x sensors."""
    m = fem.build_grid(spec.nx, spec.ny, spec.lx, spec.ly)
    fixed = m.dirichlet_dofs(["bottom"])
    pulse = fem.traction_load(m, "right", (-spec.options["load"], 0.0))
    # a pulse shorter than the simulated window leaves a free ring-down
    # phase whose wave field probes the viscosity at depth
    t_pulse = spec.options.get("pulse_T", spec.dt * spec.n_steps)

    def f_ext(t):
        return pulse * (np.sin(np.pi * t / t_pulse) if t < t_pulse else 0.0)

    sensors = m.dof_x(m.edge_nodes("top"))
    return m, fixed, f_ext, sensors


def _poro_setup(spec):
    """Mesh, flow grid, +/- volumetric sources, and surface u sensors."""
    m = fem.build_grid(spec.nx, spec.ny, spec.lx, spec.ly)
    g = flow.FlowGrid(m, perm=spec.options.get("perm", 1.0))
    fixed = m.dirichlet_dofs(["left", "right"])
    q = np.zeros(g.n_cells)
    q[g.cell_at(0.25 * spec.lx, 0.5 * spec.ly)] = spec.options["source"]
    q[g.cell_at(0.75 * spec.lx, 0.5 * spec.ly)] = -spec.options["source"]
    top = m.edge_nodes("top")[1:-1]
    sensors = sim.free_positions(
        m, fixed, np.concatenate([m.dof_x(top), m.dof_y(top)]))
    return m, g, fixed, q, sensors


def _observe_noisy(states, sensors, spec, provenance):
    obs = inv.ObservationSet(sensors, np.arange(len(states)),
                             inv.observe(states, sensors),
                             provenance)
    return inv.add_noise(obs, spec.noise, spec.seed)


def _maxwell_lame(spec):
    lp = cm.lame_from_E_nu(spec.truth["E"], spec.truth["nu"])
    return lp.mu, lp.lam


# ---------------------------------------------------------------------------
# problem builders: taped loss in a uniform shape
# ---------------------------------------------------------------------------

@dataclass
class Problem:
    fg: object                    # theta -> (loss, grad)
    theta0: np.ndarray
    bounds: object
    segments: list                # [(name, slice)] into theta
    obs: object                   # ObservationSet (or None for kv_1d)
    aux: dict


def build_problem(spec, obs=None):
    """Taped loss for one scenario; `obs` overrides the synthetic data."""
    spec.validate()
    if obs is not None and spec.scenario in ("kv_1d", "nn_coupled"):
        raise ValueError("scenario %s builds its own training data and "
                         "cannot invert external observations"
                         % (spec.scenario,))
    return _BUILDERS[spec.scenario](spec, obs)


def _build_eta_depth(spec, obs=None):
    m, fixed, f_ext, sensors = _dynamic_setup(spec)
    mu, lam = _maxwell_lame(spec)
    opt = spec.options
    inv_eta_true = depth_inv_eta(m.gauss_xy[:, 1])

    truth = None
    if obs is None:
        truth = sim.simulate_dynamic(
            ad.Tape(), m,
            sim.MaxwellProvider(m.n_gauss, mu, lam, inv_eta_true),
            spec.dt, spec.n_steps, f_ext, fixed, rho_inf=opt["rho_inf"])
        obs = _observe_noisy(truth["d"], sensors, spec,
                             dict(scenario=spec.scenario,
                                  truth="depth profile"))

    def fg(theta):
        tape = ad.Tape()
        th = tape.leaf(theta)
        prov = sim.MaxwellProvider(m.n_gauss, mu, lam, th)
        out = sim.simulate_dynamic(tape, m, prov, spec.dt, spec.n_steps,
                                   f_ext, fixed, rho_inf=opt["rho_inf"])
        loss = inv.loss_on_tape(tape, out["d"], obs)
        return float(ad.value_of(loss)), tape.backward(loss).of(th)

    theta0 = np.full(m.n_gauss, opt["init_inv_eta"])
    bounds = [(opt["inv_eta_lo"], opt["inv_eta_hi"])] * m.n_gauss
    return Problem(fg, theta0, bounds, [("inv_eta", slice(0, m.n_gauss))],
                   obs, dict(mesh=m, inv_eta_true=inv_eta_true,
                             truth_out=truth))


def _build_elastic_h(spec, obs=None):
    m, g, fixed, q, sensors = _poro_setup(spec)
    mu, lam = _maxwell_lame(spec)
    h_true = cm.plane_strain_matrix(lam, mu)
    par = flow.SinglePhaseParams()

    truth = None
    if obs is None:
        truth = sim.simulate_single_phase(
            ad.Tape(), m, g, sim.ElasticProvider(m.n_gauss, h_true), par,
            spec.dt, spec.n_steps, q, fixed, {"top": 0.0})
        obs = _observe_noisy(truth["u"], sensors, spec,
                             dict(scenario=spec.scenario,
                                  h_true=h_true.tolist()))

    def fg(theta):
        tape = ad.Tape()
        th = tape.leaf(theta)
        prov = sim.ElasticProvider(m.n_gauss, ad.spd(tape, th))
        out = sim.simulate_single_phase(tape, m, g, prov, par, spec.dt,
                                        spec.n_steps, q, fixed, {"top": 0.0})
        loss = inv.loss_on_tape(tape, out["u"], obs)
        return float(ad.value_of(loss)), tape.backward(loss).of(th)

    theta0 = nn.spd_param_from_matrix(spec.options["init_scale"] * h_true)
    return Problem(fg, theta0, None, [("h_chol", slice(0, 6))], obs,
                   dict(mesh=m, grid=g, h_true=h_true, truth_out=truth))


def _viscosity_law(name):
    laws = {"smooth": cm.viscosity_law_smooth,
            "kinked": cm.viscosity_law_kinked}
    if name not in laws:
        raise ValueError("unknown viscosity law %r" % (name,))
    return laws[name]


def _build_eta_nn(spec, obs=None):
    m, fixed, f_ext, sensors = _dynamic_setup(spec)
    mu, lam = _maxwell_lame(spec)
    opt = spec.options
    law = _viscosity_law(spec.truth["law"])

    truth = sim.simulate_dynamic(
        ad.Tape(), m, sim.ViscosityLawProvider(mu, lam, law),
        spec.dt, spec.n_steps, f_ext, fixed, rho_inf=opt["rho_inf"])
    if obs is None:
        obs = _observe_noisy(truth["d"], sensors, spec,
                             dict(scenario=spec.scenario,
                                  law=spec.truth["law"]))

    net = nn.default_mlp(3, 1, width=opt["width"], depth=opt["depth"],
                         activation=opt["activation"])

    def fg(theta):
        tape = ad.Tape()
        th = tape.leaf(theta)
        prov = sim.ViscosityNNProvider(mu, lam, net, th,
                                       floor=opt["eta_floor"])
        out = sim.simulate_dynamic(tape, m, prov, spec.dt, spec.n_steps,
                                   f_ext, fixed, rho_inf=opt["rho_inf"])
        loss = inv.loss_on_tape(tape, out["d"], obs)
        return float(ad.value_of(loss)), tape.backward(loss).of(th)

    theta0 = opt["init_scale"] * nn.glorot_init(net, seed=spec.seed)
    return Problem(fg, theta0, None, [("nn_w", slice(0, net.n_params))], obs,
                   dict(mesh=m, fixed=fixed, f_ext=f_ext, net=net,
                        truth_out=truth, mu=mu, lam=lam))


def kv_strain_program(t, t_end):
    """Creep/recovery strain history: ramp, hold, unload, recover."""
    s = t / t_end
    up = np.clip(s / 0.3, 0.0, 1.0)
    down = np.clip((s - 0.6) / 0.2, 0.0, 1.0)
    return up - down


def kv_trajectories(spec):
    """Strain/stress trajectories of the Kelvin-Voigt truth model."""
    opt = spec.options
    t = spec.dt * np.arange(spec.n_steps + 1)
    amps = opt["eps0"] * np.asarray(opt["amplitudes"])
    eps = amps[:, None] * kv_strain_program(t, t[-1])[None, :]
    gp, gv = spec.truth["g_store"], spec.truth["g_loss_over_omega"]
    deps = np.empty_like(eps)
    deps[:, 0] = 0.0
    deps[:, 1:] = np.diff(eps, axis=1) / spec.dt
    sigma = gp * eps + gv * deps
    return eps[:, :, None], sigma[:, :, None]


def _kv_train_slice(spec, eps, sigma):
    n_train = max(2, int(round(spec.options["train_frac"] * spec.n_steps)))
    return eps[:, :n_train + 1], sigma[:, :n_train + 1], n_train


def _build_kv_1d(spec, obs=None):
    opt = spec.options
    eps, sigma = kv_trajectories(spec)
    if spec.noise > 0.0:
        noisy = inv.add_noise(
            inv.ObservationSet(np.arange(sigma.shape[0]),
                               np.arange(sigma.shape[1]),
                               sigma[:, :, 0].T, {}),
            spec.noise, spec.seed)
        sigma = noisy.values.T[:, :, None]
    eps_tr, sig_tr, n_train = _kv_train_slice(spec, eps, sigma)
    net = nn.default_mlp(2, 1, width=opt["width"], depth=opt["depth"],
                         activation=opt["activation"])
    theta0 = np.concatenate([
        opt["init_scale"] * nn.glorot_init(net, seed=spec.seed), [0.0]])

    def fg(theta):
        tape = ad.Tape()
        loss, th = inv.rollout_loss_on_tape(tape, theta, net, eps_tr, sig_tr)
        return float(ad.value_of(loss)), tape.backward(loss).of(th)

    segments = [("nn_w", slice(0, net.n_params)),
                ("h_chol", slice(net.n_params, net.n_params + 1))]
    return Problem(fg, theta0, None, segments, None,
                   dict(eps=eps, sigma=sigma, eps_tr=eps_tr, sig_tr=sig_tr,
                        n_train=n_train, net=net))


def _coupled_sources(spec, g):
    q = np.zeros(g.n_cells)
    q[g.cell_at(0.25 * spec.lx, 0.5 * spec.ly)] = spec.options["source"]
    q[g.cell_at(0.75 * spec.lx, 0.5 * spec.ly)] = -spec.options["source"]
    return q


def _build_nn_coupled(spec, obs=None):
    m, g, fixed, q, sensors = _poro_setup(spec)
    opt = spec.options
    par = flow.SinglePhaseParams()
    tr = spec.truth
    prov_true = sim.MaxwellProvider(m.n_gauss, tr["mu"], tr["lam"],
                                    1.0 / tr["eta"])

    def truth_run(scale):
        return sim.simulate_single_phase(
            ad.Tape(), m, g, prov_true, par, spec.dt, spec.n_steps,
            scale * q, fixed, {"top": 0.0})

    obs_train = []
    for k, s in enumerate(opt["train_scales"]):
        states = truth_run(s)["u"]
        o = inv.ObservationSet(sensors, np.arange(len(states)),
                               inv.observe(states, sensors),
                               dict(scenario=spec.scenario, scale=s))
        obs_train.append(inv.add_noise(o, spec.noise, spec.seed + k))

    net = nn.default_mlp(6, 3, width=opt["width"], depth=opt["depth"],
                         activation=opt["activation"])
    pack = ad.Packing([("w", net.n_params), ("h", 6)])

    def fg(theta):
        tape = ad.Tape()
        th = tape.leaf(theta)
        w = ad.gather(tape, th, pack.slice_of("w"))
        hp = ad.gather(tape, th, pack.slice_of("h"))
        loss = None
        for o, s in zip(obs_train, opt["train_scales"]):
            prov = sim.StressNNProvider(m.n_gauss, net, w, hp)
            out = sim.simulate_single_phase(tape, m, g, prov, par, spec.dt,
                                            spec.n_steps, s * q, fixed,
                                            {"top": 0.0})
            term = inv.loss_on_tape(tape, out["u"], o)
            loss = term if loss is None else ad.add(tape, loss, term)
        return float(ad.value_of(loss)), tape.backward(loss).of(th)

    h_el = cm.plane_strain_matrix(tr["lam"], tr["mu"])
    theta0 = pack.pack({
        "w": opt["init_scale"] * nn.glorot_init(net, seed=spec.seed),
        "h": nn.spd_param_from_matrix(h_el)})
    segments = [("nn_w", pack.slice_of("w")), ("h_chol", pack.slice_of("h"))]
    return Problem(fg, theta0, None, segments, obs_train[0],
                   dict(mesh=m, grid=g, fixed=fixed, q=q, par=par, net=net,
                        pack=pack, obs_train=obs_train, sensors=sensors,
                        truth_run=truth_run, h_el=h_el))


def _build_two_phase(spec, obs=None):
    m, g, fixed, _, sensors = _poro_setup(spec)
    opt = spec.options
    q2 = np.zeros(g.n_cells)
    q2[g.cell_at(0.25 * spec.lx, 0.5 * spec.ly)] = opt["source"]
    q1 = np.zeros(g.n_cells)
    q1[g.cell_at(0.75 * spec.lx, 0.5 * spec.ly)] = -opt["source"]
    par = flow.TwoPhaseParams(phi0=opt["phi0"], rho1=opt["rho1"],
                              rho2=opt["rho2"], gravity=opt["gravity"])
    bc = {"top": 0.0}
    tr = spec.truth
    truth = np.array([tr["mu"], tr["lam"], tr["eta"]])

    plain = None
    if obs is None:
        plain = sim.run_two_phase(m, g, cm.MaxwellParams(*truth), par,
                                  spec.dt, spec.n_steps, q1, q2, bc, fixed)
        obs = _observe_noisy(plain["u"], sensors, spec,
                             dict(scenario=spec.scenario,
                                  truth=truth.tolist()))

    def fg(theta):
        tape = ad.Tape()
        th = tape.leaf(theta)
        prov = sim.MaxwellProvider(
            m.n_gauss, ad.gather(tape, th, [0]), ad.gather(tape, th, [1]),
            ad.reciprocal(tape, ad.gather(tape, th, [2])))
        out = sim.simulate_two_phase(tape, m, g, prov, par, spec.dt,
                                     spec.n_steps, q1, q2, bc, fixed)
        loss = inv.loss_on_tape(tape, out["u"], obs)
        return float(ad.value_of(loss)), tape.backward(loss).of(th)

    theta0 = opt["init_scale"] * truth
    segments = [("mu", slice(0, 1)), ("lam", slice(1, 2)),
                ("eta", slice(2, 3))]
    return Problem(fg, theta0, list(opt["bounds"]), segments, obs,
                   dict(mesh=m, grid=g, truth=truth, truth_out=plain))


_BUILDERS = {
    "eta_depth": _build_eta_depth,
    "elastic_H_poro": _build_elastic_h,
    "eta_nn": _build_eta_nn,
    "kv_1d": _build_kv_1d,
    "nn_coupled": _build_nn_coupled,
    "two_phase": _build_two_phase,
}


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def run_experiment(spec):
    spec.validate()
    t0 = time.perf_counter()
    if spec.scenario == "kv_1d":
        report = _run_kv_1d(spec)
    elif spec.scenario == "nn_coupled":
        report = _run_nn_coupled(spec)
    elif spec.scenario == "eta_nn":
        report = _run_eta_nn(spec)
    else:
        report = _run_direct(spec)
    report.seconds = time.perf_counter() - t0
    return report


def _run_direct(spec):
    """Scenarios assessed by comparing recovered parameters with truth."""
    prob = build_problem(spec)
    res = optim.minimize(prob.fg, prob.theta0, bounds=prob.bounds,
                         config=_config_from(spec))
    if spec.scenario == "eta_depth":
        true_field = prob.aux["inv_eta_true"]
        metrics = dict(loss=res.f,
                       rel_l2_inv_eta=inv.rel_l2(res.x, true_field))
        recovered = dict(inv_eta=res.x)
    elif spec.scenario == "elastic_H_poro":
        h_rec = nn.spd_from_param(res.x)
        metrics = dict(loss=res.f, error_H=inv.error_H(h_rec,
                                                       prob.aux["h_true"]))
        recovered = dict(h=h_rec, h_chol=res.x)
    else:                                   # two_phase
        errs = inv.error_params(res.x, prob.aux["truth"])
        metrics = dict(loss=res.f, E_mu=errs[0], E_lambda=errs[1],
                       E_eta=errs[2])
        recovered = dict(mu=res.x[0], lam=res.x[1], eta=res.x[2])
    return AssessmentReport(spec.scenario, spec.assessment, metrics,
                            recovered, res.history, res.status, 0.0)


def _upper_left_probe(m, fixed):
    """Held-out probe: u_y dof of the leftmost unconstrained top node and
    the nearest Gauss point (for stress histories)."""
    fixed_set = set(int(d) for d in fixed)
    for node in m.edge_nodes("top"):
        dof = int(m.dof_y([node])[0])
        if dof not in fixed_set:
            gp = int(np.argmin(np.sum((m.gauss_xy - m.nodes[node]) ** 2,
                                      axis=1)))
            return dof, gp
    raise ValueError("every top-edge u_y dof is constrained")


def _point_histories(out, dof, gp):
    uy = np.array([ad.value_of(d)[dof] for d in out["d"]])
    sig = np.array([ad.value_of(s)[gp] for s in out["sigma"]])
    return uy, sig


def _run_eta_nn(spec):
    """Train the NN viscosity, then reproduce held-out point histories."""
    prob = build_problem(spec)
    aux = prob.aux
    m, fixed = aux["mesh"], aux["fixed"]
    dof, gp = _upper_left_probe(m, fixed)
    uy_true, sig_true = _point_histories(aux["truth_out"], dof, gp)

    def reproduce(theta):
        prov = sim.ViscosityNNProvider(aux["mu"], aux["lam"], aux["net"],
                                       theta,
                                       floor=spec.options["eta_floor"])
        out = sim.simulate_dynamic(ad.Tape(), m, prov, spec.dt, spec.n_steps,
                                   aux["f_ext"], fixed,
                                   rho_inf=spec.options["rho_inf"])
        uy, sig = _point_histories(out, dof, gp)
        return inv.rel_l2(uy, uy_true), inv.rel_l2(sig, sig_true)

    init_uy, init_sig = reproduce(prob.theta0)
    res = optim.minimize(prob.fg, prob.theta0, bounds=prob.bounds,
                         config=_config_from(spec))
    rec_uy, rec_sig = reproduce(res.x)
    metrics = dict(loss=res.f, repro_uy=rec_uy, repro_stress=rec_sig,
                   repro_uy_init=init_uy, repro_stress_init=init_sig)
    return AssessmentReport(spec.scenario, spec.assessment, metrics,
                            dict(nn_w=res.x), res.history, res.status, 0.0)


def _run_kv_1d(spec):
    """Pair-supervised vs recurrent training of the 1-D stress model."""
    prob = build_problem(spec)
    aux = prob.aux
    eps, sigma, net = aux["eps"], aux["sigma"], aux["net"]
    n_train = aux["n_train"]
    cfg = _config_from(spec)

    th_sup, res_sup = inv.train_supervised(aux["eps_tr"], aux["sig_tr"],
                                           net, prob.theta0, config=cfg)
    th_rec, res_rec = inv.train_recurrent(aux["eps_tr"], aux["sig_tr"],
                                          net, prob.theta0, config=cfg)

    def heldout_error(theta):
        pred = inv.rollout(theta, net, eps, sigma[:, 0])
        return inv.rel_l2(pred[:, n_train:], sigma[:, n_train:])

    metrics = dict(train_loss_supervised=res_sup.f,
                   train_loss_recurrent=res_rec.f,
                   err_supervised=heldout_error(th_sup),
                   err_recurrent=heldout_error(th_rec))
    recovered = dict(theta_supervised=th_sup, theta_recurrent=th_rec)
    return AssessmentReport(spec.scenario, spec.assessment, metrics,
                            recovered, res_rec.history, res_rec.status, 0.0)


def _run_nn_coupled(spec):
    """NN constitutive model vs space-varying elasticity baseline."""
    prob = build_problem(spec)
    aux = prob.aux
    m, g, fixed, q, par = (aux["mesh"], aux["grid"], aux["fixed"], aux["q"],
                           aux["par"])
    opt = spec.options
    cfg = _config_from(spec)
    sensors = aux["sensors"]

    res_nn = optim.minimize(prob.fg, prob.theta0, config=cfg)

    # baseline: an independent elasticity matrix at every Gauss point
    base0 = np.tile(nn.spd_param_from_matrix(aux["h_el"]), (m.n_gauss, 1))

    def fg_base(theta):
        tape = ad.Tape()
        th = tape.leaf(theta)
        p = tape.record(th.value.reshape(m.n_gauss, 6), [th],
                        lambda gr: (gr.ravel(),))
        loss = None
        for o, s in zip(aux["obs_train"], opt["train_scales"]):
            prov = sim.SpacevarElasticProvider(p)
            out = sim.simulate_single_phase(tape, m, g, prov, par, spec.dt,
                                            spec.n_steps, s * q, fixed,
                                            {"top": 0.0})
            term = inv.loss_on_tape(tape, out["u"], o)
            loss = term if loss is None else ad.add(tape, loss, term)
        return float(ad.value_of(loss)), tape.backward(loss).of(th)

    res_base = optim.minimize(fg_base, base0.ravel(), config=cfg)

    # held-out: simulate the unseen source scale and compare the vertical
    # displacement field and the full stress field, neither of which was
    # observed during training
    test_out = aux["truth_run"](opt["test_scale"])
    fixed_set = set(int(d) for d in fixed)
    uy_free = [int(d) for d in m.dof_y(np.arange(m.n_nodes))
               if int(d) not in fixed_set]
    uy_sel = sim.free_positions(m, fixed, uy_free)
    uy_true = np.array([ad.value_of(u)[uy_sel] for u in test_out["u"]])
    sig_true = np.array([ad.value_of(s) for s in test_out["sigma"]])

    def test_error(make_provider):
        out = sim.simulate_single_phase(
            ad.Tape(), m, g, make_provider(), par, spec.dt, spec.n_steps,
            opt["test_scale"] * q, fixed, {"top": 0.0})
        uy = np.array([ad.value_of(u)[uy_sel] for u in out["u"]])
        sig = np.array([ad.value_of(s) for s in out["sigma"]])
        e_uy, e_sig = inv.rel_l2(uy, uy_true), inv.rel_l2(sig, sig_true)
        return e_uy, e_sig, 0.5 * (e_uy + e_sig)

    pack, net = aux["pack"], aux["net"]
    w_nn = res_nn.x[pack.slice_of("w")]
    h_nn = res_nn.x[pack.slice_of("h")]
    nn_uy, nn_sig, nn_err = test_error(
        lambda: sim.StressNNProvider(m.n_gauss, net, w_nn, h_nn))
    p_base = res_base.x.reshape(m.n_gauss, 6)
    b_uy, b_sig, b_err = test_error(
        lambda: sim.SpacevarElasticProvider(p_base))

    metrics = dict(train_loss_nn=res_nn.f, train_loss_spacevar=res_base.f,
                   test_err_nn=nn_err, test_err_spacevar=b_err,
                   test_uy_nn=nn_uy, test_uy_spacevar=b_uy,
                   test_stress_nn=nn_sig, test_stress_spacevar=b_sig)
    recovered = dict(theta_nn=res_nn.x, h_nn=nn.spd_from_param(h_nn))
    return AssessmentReport(spec.scenario, spec.assessment, metrics,
                            recovered, res_nn.history, res_nn.status, 0.0)


# ---------------------------------------------------------------------------
# sweeps and gradient checking
# ---------------------------------------------------------------------------

def scenario_error(report):
    """The scalar error a noise sweep tracks, per scenario."""
    m = report.metrics
    if "error_H" in m:
        return m["error_H"]
    if "E_mu" in m:
        return (m["E_mu"] + m["E_lambda"] + m["E_eta"]) / 3.0
    if "rel_l2_inv_eta" in m:
        return m["rel_l2_inv_eta"]
    raise ValueError("scenario %s has no sweep error metric"
                     % (report.scenario,))


def noise_sweep(spec, sigmas, seeds):
    """Run (sigma, seed) grid; returns per-run rows and per-sigma medians."""
    rows = []
    for s in sigmas:
        for sd in seeds:
            member = default_spec(spec.scenario, truth=spec.truth,
                                  noise=float(s), seed=int(sd),
                                  optimizer=spec.optimizer,
                                  options=spec.options)
            rep = run_experiment(member)
            rows.append(dict(sigma=float(s), seed=int(sd),
                             error=scenario_error(rep),
                             loss=rep.metrics.get("loss", np.nan),
                             status=rep.status, seconds=rep.seconds))
    med = [dict(sigma=float(s),
                median_error=float(np.median([r["error"] for r in rows
                                              if r["sigma"] == s])),
                std_error=float(np.std([r["error"] for r in rows
                                        if r["sigma"] == s])))
           for s in sigmas]
    return rows, med


def gradcheck_problem(spec, h=1e-5, n_directions=4, seed=0, corrupt=False):
    """FD-vs-adjoint table for one scenario, one row per theta segment.

    `corrupt` deliberately damages the adjoint gradient before checking —
    a debug aid proving the checker catches a broken implementation.
    """
    prob = build_problem(spec)
    rng = np.random.default_rng(seed)
    theta = prob.theta0 * (1.0 + 0.05 * rng.random(prob.theta0.size))
    _, grad = prob.fg(theta)
    if corrupt:
        grad = grad * 1.5 + 0.1 * float(np.max(np.abs(grad)))

    rows = []
    for name, sl in prob.segments:
        idx = np.arange(theta.size)[sl]
        if idx.size > n_directions + 2:
            comp = rng.choice(idx, size=n_directions + 2, replace=False)
        else:
            comp = idx
        rep = ad.gradient_check(lambda t: prob.fg(t)[0], theta, grad,
                                h=h, components=comp)
        rows.append(dict(segment=name, n_params=int(idx.size),
                         max_rel_err=rep["max_rel_err"]))
    return rows
