"""Constitutive relations in plane-strain Voigt form.

Stress and strain live at Gauss points as (n, 3) arrays (xx, yy, xy) with
engineering shear.  The Maxwell update is the implicit one-step
discretization of

    d sigma/dt + (mu/eta) (sigma - tr(sigma)/3 I) = H_el d eps/dt

which per point reduces to solving (I + dt*mu/eta * P) sigma_{n+1} =
sigma_n + H_el (eps_{n+1} - eps_n); the 2-D trace convention is
tr(sigma) = sigma_xx + sigma_yy.
"""

from dataclasses import dataclass

import numpy as np

# Deviatoric-projection matrix of the relaxation term under the 2-D trace
# convention.  Eigenvalues 1/3 (on the trace direction (1,1,0)) and 1
# (on (1,-1,0) and shear), so the trace relaxes 3x slower than the
# deviatoric parts rather than being conserved.
P_RELAX = np.array([[2.0 / 3.0, -1.0 / 3.0, 0.0],
                    [-1.0 / 3.0, 2.0 / 3.0, 0.0],
                    [0.0, 0.0, 1.0]])

# spectral projectors of P_RELAX
_E_TRACE = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 0.0]])
_E_DEV = np.eye(3) - _E_TRACE


@dataclass(frozen=True)
class LameParams:
    lam: float
    mu: float

    def __post_init__(self):
        if self.mu <= 0.0:
            raise ValueError("shear modulus must be positive")
        if self.lam + 2.0 * self.mu / 3.0 <= 0.0:
            raise ValueError("bulk modulus must be positive")


def lame_from_E_nu(e, nu):
    """Lamé constants from Young's modulus and Poisson ratio."""
    if e <= 0.0:
        raise ValueError("Young's modulus must be positive")
    if not -1.0 < nu < 0.5:
        raise ValueError("Poisson ratio must lie in (-1, 0.5)")
    lam = nu * e / ((1.0 - 2.0 * nu) * (1.0 + nu))
    mu = e / (2.0 * (1.0 + nu))
    return LameParams(lam=lam, mu=mu)


def plane_strain_matrix(lam, mu):
    """Plane-strain elasticity matrix for engineering-shear Voigt strain."""
    return np.array([[lam + 2.0 * mu, lam, 0.0],
                     [lam, lam + 2.0 * mu, 0.0],
                     [0.0, 0.0, mu]])


@dataclass(frozen=True)
class MaxwellParams:
    mu: float
    lam: float
    eta: object  # scalar or per-point array

    def hel(self):
        return plane_strain_matrix(self.lam, self.mu)


def relax_matrices(c):
    """S = (I + c P)^{-1} for an array of relaxation numbers c = dt*mu/eta.

    Returns (n, 3, 3).  Uses the spectral form of P, so the inverse is
    exact and cheap: S = E_trace/(1 + c/3) + E_dev/(1 + c).
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    s = (_E_TRACE[None, :, :] / (1.0 + c / 3.0)[:, None, None]
         + _E_DEV[None, :, :] / (1.0 + c)[:, None, None])
    return s


def maxwell_update(sigma, eps, eps_next, dt, params):
    """Advance the Maxwell stress one implicit step.

    Parameters
    ----------
    sigma, eps : (n, 3) arrays
        Stress and strain at the start of the step.
    eps_next : (n, 3) array
        Strain at the end of the step.
    dt : float
    params : MaxwellParams
        eta may be a scalar or an (n,) array for space-varying viscosity.

    Returns
    -------
    sigma_next : (n, 3)
    tangent : (n, 3, 3)
        d sigma_next / d eps_next = (I + c P)^{-1} H_el; the update is
        affine in eps_next.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    eps_next = np.atleast_2d(np.asarray(eps_next, dtype=float))
    eta = np.asarray(params.eta, dtype=float)
    if np.any(eta <= 0.0):
        raise ValueError("viscosity must be positive")

    c = np.broadcast_to(dt * params.mu / eta, sigma.shape[:1])
    s = relax_matrices(c)
    tangent = s @ params.hel()
    sigma_next = (np.einsum("nij,nj->ni", s, sigma)
                  + np.einsum("nij,nj->ni", tangent, eps_next - eps))
    return sigma_next, tangent


# -- benchmark stress-dependent viscosity laws ----------------------------

def viscosity_law_smooth(sigma):
    """eta = 10 + 5 / (1 + 1000 (sxx^2 + syy^2)); smooth everywhere."""
    s = np.atleast_2d(np.asarray(sigma, dtype=float))
    r = s[:, 0] ** 2 + s[:, 1] ** 2
    return 10.0 + 5.0 / (1.0 + 1000.0 * r)


def viscosity_law_kinked(sigma):
    """eta = 10 + max(50 / (1 + 1000 r) - 10, 0); kink at r = 0.004."""
    s = np.atleast_2d(np.asarray(sigma, dtype=float))
    r = s[:, 0] ** 2 + s[:, 1] ** 2
    return 10.0 + np.maximum(50.0 / (1.0 + 1000.0 * r) - 10.0, 0.0)


# -- one-dimensional Kelvin-Voigt ------------------------------------------

def kelvin_voigt_stress(eps, eps_rate, g_storage, g_loss, omega):
    """sigma = G' eps + (G''/omega) d eps/dt, elementwise over series."""
    if omega <= 0.0:
        raise ValueError("omega must be positive")
    eps = np.asarray(eps, dtype=float)
    eps_rate = np.asarray(eps_rate, dtype=float)
    return g_storage * eps + (g_loss / omega) * eps_rate


# -- incremental neural-network form ---------------------------------------

def nn_incremental_update(sigma, eps, eps_next, nn_fn, h):
    """sigma_{n+1} = sigma_n + NN*(sigma_n, eps_n) + H (eps_{n+1} - eps_n).

    nn_fn maps an (n, 2k) batch of [sigma, eps] rows to (n, k) stress
    increments; pass `None` for a pure linear update.  H is a (k, k) SPD
    matrix, so the strain tangent of the update is exactly H.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    eps_next = np.atleast_2d(np.asarray(eps_next, dtype=float))
    h = np.atleast_2d(np.asarray(h, dtype=float))
    out = sigma + (eps_next - eps) @ h.T
    if nn_fn is not None:
        out = out + nn_fn(np.hstack([sigma, eps]))
    return out
