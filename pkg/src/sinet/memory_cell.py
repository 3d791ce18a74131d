"""Gated recurrent memory cell, forward and hand-derived backward.

The cell fuses one incoming message x into a node state h_t:

    r      = sigmoid(W_r [x, h_t])
    z      = sigmoid(W_z [x, h_t])
    h~     = tanh(W x + U (r * h_t))
    h_next = z * h_t + (1 - z) * h~

[x, h_t] is concatenation with x first; there are no bias terms. x and h_t
share the dimension d, so W_r and W_z are (d, 2d) while W and U are (d, d).
The same cell drives both the scene bank and the edge bank.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, affine, init_param, seed_for, sigmoid, tanh

PARAM_FIELDS = ("W_r", "W_z", "W", "U")


@dataclass
class GruParams:
    """The four learned maps, as Param entries of a ParamStore."""

    w_r: object
    w_z: object
    w: object
    u: object

    @property
    def dim(self):
        return self.w.value.shape[0]

    def entries(self):
        return (self.w_r, self.w_z, self.w, self.u)


def create_gru_params(store, prefix, d, seed):
    """Register W_r, W_z (d x 2d) and W, U (d x d) under `prefix/` and return
    the typed view. Init is keyed by (seed, full name), not creation order."""
    shapes = {"W_r": (d, 2 * d), "W_z": (d, 2 * d), "W": (d, d), "U": (d, d)}
    made = {}
    for field in PARAM_FIELDS:
        name = f"{prefix}/{field}"
        made[field] = store.create(name, init_param(shapes[field], seed_for(seed, name)))
    return GruParams(w_r=made["W_r"], w_z=made["W_z"], w=made["W"], u=made["U"])


def gru_params_from_store(store, prefix):
    return GruParams(*(store[f"{prefix}/{f}"] for f in PARAM_FIELDS))


@dataclass
class GruCache:
    """Forward intermediates needed by the backward pass."""

    x: np.ndarray
    h_t: np.ndarray
    r: np.ndarray
    z: np.ndarray
    h_tilde: np.ndarray


def _check_dims(p, x, h_t):
    d = p.dim
    if x.shape != (d,) or h_t.shape != (d,):
        raise ShapeError(f"gru: expected x and h_t of dim {d}, got {x.shape} and {h_t.shape}")
    if p.w_r.value.shape != (d, 2 * d) or p.w_z.value.shape != (d, 2 * d) \
            or p.u.value.shape != (d, d):
        raise ShapeError("gru: inconsistent parameter shapes")


def gru_forward(p, x, h_t):
    """One cell application. Returns (h_next, cache)."""
    x = np.asarray(x, dtype=np.float64)
    h_t = np.asarray(h_t, dtype=np.float64)
    _check_dims(p, x, h_t)
    xh = np.concatenate([x, h_t])
    r = sigmoid(affine(p.w_r.value, xh))
    z = sigmoid(affine(p.w_z.value, xh))
    h_tilde = tanh(affine(p.w.value, x) + affine(p.u.value, r * h_t))
    h_next = z * h_t + (1.0 - z) * h_tilde
    return h_next, GruCache(x=x, h_t=h_t, r=r, z=z, h_tilde=h_tilde)


def gru_backward(p, cache, dh_next):
    """Exact gradients of h_next contracted with dh_next.

    Parameter gradients are accumulated additively into the Param buffers;
    returns (dx, dh_t).
    """
    dh_next = np.asarray(dh_next, dtype=np.float64)
    d = p.dim
    if dh_next.shape != (d,):
        raise ShapeError(f"gru_backward: dh_next has shape {dh_next.shape}, expected ({d},)")
    x, h_t, r, z, h_tilde = cache.x, cache.h_t, cache.r, cache.z, cache.h_tilde
    xh = np.concatenate([x, h_t])

    dz = dh_next * (h_t - h_tilde)
    dh_t = dh_next * z
    dh_tilde = dh_next * (1.0 - z)

    # through tanh(W x + U (r*h_t))
    da_h = dh_tilde * (1.0 - h_tilde * h_tilde)
    p.w.grad += np.outer(da_h, x)
    dx = p.w.value.T @ da_h
    drh = p.u.value.T @ da_h
    p.u.grad += np.outer(da_h, r * h_t)
    dr = drh * h_t
    dh_t = dh_t + drh * r

    # through the two sigmoid gates on [x, h_t]
    da_r = dr * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    p.w_r.grad += np.outer(da_r, xh)
    p.w_z.grad += np.outer(da_z, xh)
    dxh = p.w_r.value.T @ da_r + p.w_z.value.T @ da_z

    dx = dx + dxh[:d]
    dh_t = dh_t + dxh[d:]
    return dx, dh_t
