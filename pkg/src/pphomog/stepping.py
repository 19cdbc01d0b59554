"""Nodewise time stepping of the relaxation ODE d/dt u + L u = G v.

Shared by the fine-scale and the upscaled solver: the ODE acts pointwise in
space, so one step amounts to a batched N x N solve per node.
"""

from __future__ import annotations

import numpy as np

from .errors import StepError

SCHEMES = ("implicit-euler", "crank-nicolson")


def _as_node_matrices(mat, shape):
    """(N, N, *shape) -> (*shape, N, N) suitable for batched linalg."""
    full = np.broadcast_to(mat[..., None], mat.shape + (1,)) if mat.ndim == 2 else mat
    if full.ndim == 2:
        full = full[..., None]
    moved = np.moveaxis(full.reshape(mat.shape[:2] + shape), (0, 1), (-2, -1))
    return np.ascontiguousarray(moved)


def _batched_solve(mats, rhs, dt):
    # rhs is a stack of vectors; numpy >= 2 needs the explicit column shape
    try:
        return np.linalg.solve(mats, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        dets = np.abs(np.linalg.det(mats))
        node = np.unravel_index(int(np.argmin(dets)), dets.shape)
        raise StepError(f"singular step matrix I + dt*L at node {node} (dt={dt})") from None


def relaxation_step(l_next, g_next, u_n, v_next, dt, scheme="implicit-euler",
                    l_curr=None, g_curr=None, v_curr=None):
    """Advance u by one step of the chosen scheme.

    Arguments are nodal tensors: l_next, g_next (and the *_curr companions
    for Crank-Nicolson) have shape (N, N, *grid), u and v have (N, *grid).
    implicit-euler solves (I + dt L) u1 = u0 + dt G v1; crank-nicolson uses
    the trapezoid average of both time levels.
    """
    if scheme not in SCHEMES:
        raise StepError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    nn = u_n.shape[0]
    shape = u_n.shape[1:]
    eye = np.eye(nn)
    ln = _as_node_matrices(np.ascontiguousarray(l_next), shape)
    gn = _as_node_matrices(np.ascontiguousarray(g_next), shape)
    u0 = np.moveaxis(u_n, 0, -1)
    v1 = np.moveaxis(v_next, 0, -1)

    if scheme == "implicit-euler":
        mats = eye + dt * ln
        rhs = u0 + dt * np.einsum("...ab,...b->...a", gn, v1)
    else:
        if l_curr is None or g_curr is None or v_curr is None:
            raise StepError("crank-nicolson needs the current-level L, G and v")
        lc = _as_node_matrices(np.ascontiguousarray(l_curr), shape)
        gc = _as_node_matrices(np.ascontiguousarray(g_curr), shape)
        v0 = np.moveaxis(v_curr, 0, -1)
        mats = eye + 0.5 * dt * ln
        rhs = (np.einsum("...ab,...b->...a", eye - 0.5 * dt * lc, u0)
               + 0.5 * dt * (np.einsum("...ab,...b->...a", gn, v1)
                             + np.einsum("...ab,...b->...a", gc, v0)))
    u1 = _batched_solve(mats, rhs, dt)
    return np.ascontiguousarray(np.moveaxis(u1, -1, 0))
