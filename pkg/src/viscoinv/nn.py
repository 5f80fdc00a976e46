"""Small dense networks with hand-written reverse-mode rules.

Weights live in a single flat vector: per layer, the (fan_out, fan_in)
matrix row-major, then the bias.  The final layer is always linear.
"""

from dataclasses import dataclass

import numpy as np

_SELU_ALPHA = 1.6732632423543772
_SELU_LAMBDA = 1.0507009873554805

ACTIVATIONS = ("tanh", "relu", "elu", "selu")


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "selu":
        return _SELU_LAMBDA * np.where(z > 0.0, z,
                                       _SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))
    raise ValueError(f"unknown activation {name!r}")


def _act_deriv(name, z):
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "relu":
        return (z > 0.0).astype(float)
    if name == "elu":
        return np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))
    if name == "selu":
        return _SELU_LAMBDA * np.where(z > 0.0, 1.0,
                                       _SELU_ALPHA * np.exp(np.minimum(z, 0.0)))
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError("widths must list input, hidden..., output sizes >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def n_params(self):
        return sum((fi + 1) * fo
                   for fi, fo in zip(self.widths[:-1], self.widths[1:]))


def default_mlp(in_dim, out_dim, width=20, depth=3, activation="tanh"):
    """The default architecture: `depth` hidden layers of `width` neurons."""
    return MLPSpec(widths=(in_dim,) + (width,) * depth + (out_dim,),
                   activation=activation)


def unpack(spec, w):
    """Flat vector -> list of (W, b) per layer."""
    w = np.asarray(w, dtype=float)
    if w.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} weights, got {w.shape}")
    layers, k = [], 0
    for fi, fo in zip(spec.widths[:-1], spec.widths[1:]):
        mat = w[k:k + fi * fo].reshape(fo, fi)
        k += fi * fo
        bias = w[k:k + fo]
        k += fo
        layers.append((mat, bias))
    return layers


def pack(layers):
    return np.concatenate([np.concatenate([m.ravel(), b]) for m, b in layers])


def glorot_init(spec, seed):
    """Glorot-uniform weights (+/- sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fi, fo in zip(spec.widths[:-1], spec.widths[1:]):
        bound = np.sqrt(6.0 / (fi + fo))
        layers.append((rng.uniform(-bound, bound, size=(fo, fi)),
                       np.zeros(fo)))
    return pack(layers)


def mlp_forward(spec, w, x, cache=None):
    """Evaluate the network on an (n, in_dim) batch.

    When `cache` is a list it is filled with the per-layer inputs and
    pre-activations needed by mlp_vjp.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    layers = unpack(spec, w)
    h = x
    for i, (mat, bias) in enumerate(layers):
        z = h @ mat.T + bias
        if cache is not None:
            cache.append((h, z))
        h = z if i == len(layers) - 1 else _act(spec.activation, z)
    return h


def mlp_vjp(spec, w, cache, y_bar):
    """Cotangents (x_bar, w_bar) of mlp_forward given d loss / d output."""
    layers = unpack(spec, w)
    y_bar = np.atleast_2d(np.asarray(y_bar, dtype=float))
    grads = [None] * len(layers)
    g = y_bar
    for i in range(len(layers) - 1, -1, -1):
        mat, _ = layers[i]
        h, z = cache[i]
        if i != len(layers) - 1:
            g = g * _act_deriv(spec.activation, z)
        grads[i] = (g.T @ h, g.sum(axis=0))
        g = g @ mat
    return g, pack(grads)


# -- SPD matrices from unconstrained parameters ----------------------------

def spd_from_param(p, n=3):
    """H = L L^T from n(n+1)/2 free reals.

    p fills the lower triangle of L row-major; diagonal entries are stored
    as logs, so H is symmetric positive definite for every p.
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (n * (n + 1) // 2,):
        raise ValueError(f"expected {n*(n+1)//2} parameters for n={n}")
    ell = np.zeros((n, n))
    rows, cols = np.tril_indices(n)
    ell[rows, cols] = p
    ell[np.diag_indices(n)] = np.exp(np.diag(ell))
    return ell @ ell.T


def spd_from_param_vjp(p, h_bar, n=3):
    """Cotangent of spd_from_param."""
    p = np.asarray(p, dtype=float)
    h_bar = np.asarray(h_bar, dtype=float)
    ell = np.zeros((n, n))
    rows, cols = np.tril_indices(n)
    ell[rows, cols] = p
    diag = np.exp(np.diag(ell).copy())
    ell[np.diag_indices(n)] = diag
    lbar = (h_bar + h_bar.T) @ ell
    lbar[np.diag_indices(n)] *= diag      # chain through exp on the diagonal
    return lbar[rows, cols]


def spd_param_from_matrix(h, n=3):
    """Inverse of spd_from_param via Cholesky (for initialization)."""
    ell = np.linalg.cholesky(np.asarray(h, dtype=float))
    ell = ell.copy()
    ell[np.diag_indices(n)] = np.log(np.diag(ell))
    rows, cols = np.tril_indices(n)
    return ell[rows, cols]


# -- weight serialization ---------------------------------------------------

def save_weights(path, spec, w):
    """Write weights as text with a schema header line."""
    w = np.asarray(w, dtype=float)
    header = ("mlp widths=" + ",".join(str(d) for d in spec.widths)
              + " activation=" + spec.activation)
    np.savetxt(path, w, fmt="%.17g", header=header)


def load_weights(path):
    """Read weights written by save_weights; returns (spec, w)."""
    with open(path) as fh:
        header = fh.readline()
    if "mlp widths=" not in header:
        raise ValueError(f"{path}: not a weight file")
    fields = header.replace("#", "").split()
    widths = tuple(int(d) for d in fields[1].split("=")[1].split(","))
    activation = fields[2].split("=")[1]
    spec = MLPSpec(widths=widths, activation=activation)
    w = np.loadtxt(path).ravel()
    if w.shape != (spec.n_params,):
        raise ValueError(f"{path}: weight count does not match header")
    return spec, w
