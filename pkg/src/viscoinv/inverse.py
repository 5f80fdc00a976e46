"""Observations, noise, error metrics, and constitutive-model training.

The inversion drivers in `experiments` consume three groups of utilities
from here:

* `ObservationSet` / `observe` / `add_noise` / `loss_ls` — synthetic sensor
  data and the least-squares misfit, both as plain floats (reporting) and
  as taped graphs (`loss_on_tape`) whose gradient the optimizer consumes.
* `error_H` / `error_params` / `rel_l2` — the error metrics the studies
  report: spectral-norm ratio for elasticity matrices, per-parameter
  relative errors, and field/trajectory relative L2 norms.
* `train_supervised` / `train_recurrent` — the two ways of fitting the
  incremental stress model sigma^{n+1} = NN(sigma^n, eps^n) + H eps^{n+1}
  to strain-stress trajectories: decoupled input-output pairs versus a
  rollout that feeds predictions back in (the recurrent scheme), plus the
  plain `rollout` used to evaluate a trained model on held-out data.
"""

import numpy as np
from dataclasses import dataclass, field

from . import autodiff as ad
from . import nn
from . import optim


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

@dataclass
class ObservationSet:
    """Sensor readings u[(time k, sensor i)] with their provenance.

    `sensors` are positions into the state vectors the simulator returns
    (free-dof positions for mechanics, cell ids for flow), `times` are
    0-based step indices into the state list, `values` is (n_times,
    n_sensors).
    """

    sensors: np.ndarray
    times: np.ndarray
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sensors = np.asarray(self.sensors, dtype=int)
        self.times = np.asarray(self.times, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.times.size, self.sensors.size):
            raise ValueError("values must be (n_times, n_sensors), got %s"
                             % (self.values.shape,))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observation values must be finite")


def observe(states, sensors, times=None):
    """Extract an (n_times, n_sensors) value table from simulator output."""
    if times is None:
        times = np.arange(len(states))
    return np.array([ad.value_of(states[k])[sensors] for k in times])


def add_noise(obs, sigma_noise, seed):
    """Multiplicative Gaussian noise u <- u (1 + sigma eps), eps iid N(0,1)."""
    if sigma_noise < 0.0:
        raise ValueError("sigma_noise must be >= 0")
    eps = np.random.default_rng(seed).standard_normal(obs.values.shape)
    prov = dict(obs.provenance)
    prov.update(noise_sigma=sigma_noise, noise_seed=seed)
    return ObservationSet(obs.sensors, obs.times,
                          obs.values * (1.0 + sigma_noise * eps), prov)


def loss_ls(predicted, observed):
    """Sum of squared residuals over all (sensor, time) pairs."""
    pred = np.asarray(predicted, dtype=float)
    obsv = np.asarray(observed, dtype=float)
    if pred.shape != obsv.shape:
        raise ValueError("prediction/observation shape mismatch: %s vs %s"
                         % (pred.shape, obsv.shape))
    return float(np.sum((pred - obsv) ** 2))


def loss_on_tape(tape, states, obs):
    """Taped least-squares misfit of simulated states against `obs`."""
    loss = None
    for k, t in enumerate(obs.times):
        r = ad.sub(tape, ad.gather(tape, states[t], obs.sensors),
                   obs.values[k])
        term = ad.sum_squares(tape, r)
        loss = term if loss is None else ad.add(tape, loss, term)
    if loss is None:
        raise ValueError("observation set selects no time steps")
    return loss


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

def error_H(h_est, h_true):
    """Spectral-norm relative error ||H_est - H*||_2 / ||H*||_2."""
    h_est = np.asarray(h_est, dtype=float)
    h_true = np.asarray(h_true, dtype=float)
    if h_est.shape != h_true.shape:
        raise ValueError("shape mismatch")
    denom = np.linalg.norm(h_true, 2)
    if denom == 0.0:
        raise ValueError("H_true must be nonzero")
    return float(np.linalg.norm(h_est - h_true, 2) / denom)


def error_params(est, true):
    """Per-parameter relative errors |p - p*| / |p*|."""
    est = np.asarray(est, dtype=float)
    true = np.asarray(true, dtype=float)
    if est.shape != true.shape:
        raise ValueError("shape mismatch")
    if np.any(true == 0.0):
        raise ValueError("true parameters must be nonzero")
    return np.abs(est - true) / np.abs(true)


def rel_l2(est, true):
    """Relative L2 error ||est - true|| / ||true|| of a field or series."""
    est = np.asarray(est, dtype=float)
    true = np.asarray(true, dtype=float)
    denom = np.linalg.norm(true.ravel())
    if denom == 0.0:
        raise ValueError("reference must be nonzero")
    return float(np.linalg.norm((est - true).ravel()) / denom)


# ---------------------------------------------------------------------------
# incremental stress-model training
# ---------------------------------------------------------------------------

def apply_rows(tape, h, e):
    """Taped row-wise product e @ H^T for plain rows e and (possibly) Var H."""
    val = e @ ad.value_of(h).T
    if not isinstance(h, ad.Var):
        return val
    return tape.record(val, [h], lambda g: (g.T @ e,))


def _check_trajs(eps, sigma):
    eps = np.asarray(eps, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if eps.ndim == 2:                       # single trajectory
        eps, sigma = eps[None], sigma[None]
    if eps.shape != sigma.shape or eps.ndim != 3:
        raise ValueError("trajectories must be (n_traj, n_steps+1, d)")
    if eps.shape[1] < 2:
        raise ValueError("need at least one transition per trajectory")
    return eps, sigma


def _model_dim(eps):
    d = eps.shape[2]
    return d, d * (d + 1) // 2


def _pair_loss(tape, theta, spec, x, e1, y, d):
    """sum ||NN(x) + H e1 - y||^2 with (w, h) packed in theta."""
    th = tape.leaf(theta)
    n_h = d * (d + 1) // 2
    if spec is not None:
        w = ad.gather(tape, th, slice(0, spec.n_params))
        hp = ad.gather(tape, th, slice(spec.n_params, spec.n_params + n_h))
        pred = ad.add(tape, ad.mlp(tape, spec, w, x),
                      apply_rows(tape, ad.spd(tape, hp, n=d), e1))
    else:
        hp = ad.gather(tape, th, slice(0, n_h))
        pred = apply_rows(tape, ad.spd(tape, hp, n=d), e1)
    loss = ad.sum_squares(tape, ad.sub(tape, pred, y))
    return loss, th


def _train_config(config):
    return config or optim.LbfgsConfig(max_iter=500, grad_tol=1e-12,
                                       f_rel_tol=1e-16)


def train_supervised(eps, sigma, spec, theta0, config=None):
    """Fit the stress model to decoupled (sigma^n, eps^n, eps^{n+1}) pairs.

    eps, sigma: (n_traj, n_steps+1, d) trajectories sampled at constant dt.
    theta0 packs the network weights (if `spec` is not None) followed by
    the log-Cholesky parameters of H.  Returns (theta, result).
    """
    eps, sigma = _check_trajs(eps, sigma)
    d, _ = _model_dim(eps)
    x = np.concatenate([sigma[:, :-1].reshape(-1, d),
                        eps[:, :-1].reshape(-1, d)], axis=1)
    e1 = eps[:, 1:].reshape(-1, d)
    y = sigma[:, 1:].reshape(-1, d)

    def fg(theta):
        tape = ad.Tape()
        loss, th = _pair_loss(tape, theta, spec, x, e1, y, d)
        return float(ad.value_of(loss)), tape.backward(loss).of(th)

    res = optim.minimize(fg, np.asarray(theta0, dtype=float),
                         config=_train_config(config))
    return res.x, res


def rollout_loss_on_tape(tape, theta, spec, eps, sigma):
    """Taped rollout misfit: feed predicted stresses back into the model."""
    eps, sigma = _check_trajs(eps, sigma)
    d, n_h = _model_dim(eps)
    th = theta if isinstance(theta, ad.Var) else tape.leaf(theta)
    if spec is not None:
        w = ad.gather(tape, th, slice(0, spec.n_params))
        hp = ad.gather(tape, th, slice(spec.n_params, spec.n_params + n_h))
    else:
        w, hp = None, ad.gather(tape, th, slice(0, n_h))
    h = ad.spd(tape, hp, n=d)

    sig = sigma[:, 0]                       # rollout starts from the data
    loss = None
    for n in range(eps.shape[1] - 1):
        pred = apply_rows(tape, h, eps[:, n + 1])
        if spec is not None:
            if isinstance(sig, ad.Var):
                x = ad.concat_cols(tape, sig, tape.leaf(eps[:, n]))
            else:
                x = np.hstack([sig, eps[:, n]])
            pred = ad.add(tape, ad.mlp(tape, spec, w, x), pred)
        sig = pred
        term = ad.sum_squares(tape, ad.sub(tape, sig, sigma[:, n + 1]))
        loss = term if loss is None else ad.add(tape, loss, term)
    return loss, th


def train_recurrent(eps, sigma, spec, theta0, config=None):
    """Fit the stress model through its own rollout (recurrent scheme)."""
    eps, sigma = _check_trajs(eps, sigma)

    def fg(theta):
        tape = ad.Tape()
        loss, th = rollout_loss_on_tape(tape, theta, spec, eps, sigma)
        return float(ad.value_of(loss)), tape.backward(loss).of(th)

    res = optim.minimize(fg, np.asarray(theta0, dtype=float),
                         config=_train_config(config))
    return res.x, res


def rollout(theta, spec, eps, sig0):
    """Plain-number rollout of the trained model over strain history `eps`.

    eps: (n_steps+1, d) or (n_traj, n_steps+1, d); sig0 matches eps[..., 0, :].
    Returns the predicted stress trajectory with sig0 in slot 0.
    """
    eps = np.asarray(eps, dtype=float)
    single = eps.ndim == 2
    if single:
        eps = eps[None]
    d, n_h = _model_dim(eps)
    if spec is not None:
        w, hp = theta[:spec.n_params], theta[spec.n_params:spec.n_params + n_h]
    else:
        w, hp = None, theta[:n_h]
    h = nn.spd_from_param(hp, n=d)
    sig = np.empty_like(eps)
    sig[:, 0] = sig0
    for n in range(eps.shape[1] - 1):
        pred = eps[:, n + 1] @ h.T
        if spec is not None:
            x = np.concatenate([sig[:, n], eps[:, n]], axis=1)
            pred = pred + nn.mlp_forward(spec, w, x)
        sig[:, n + 1] = pred
    return sig[0] if single else sig
