"""Uniform grids, conservative finite-volume assembly and linear solvers.

The macro domain Omega = (0,1)^d carries a node-centered grid with Dirichlet
faces; the periodicity cell Y = (0,1)^d carries a wrapped grid without a
duplicated endpoint.  Face k (along one axis) sits between node k and node
k+1 at the half-spacing midpoint.  All assembly paths are vectorized and
deterministic for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, DomainError, SolverError

__all__ = [
    "MacroGrid",
    "CellGrid",
    "SparseSystem",
    "assemble_div_flux",
    "solve_linear",
    "fd_gradient",
    "integrate_field",
]


@dataclass(frozen=True)
class MacroGrid:
    """Uniform grid on the unit box with Dirichlet boundary nodes."""

    d: int
    n: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise DomainError(f"macro grid dimension {self.d} unsupported")
        if self.n < 3:
            raise DomainError(f"macro grid needs n >= 3 points per axis, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def n_nodes(self) -> int:
        return self.n**self.d

    def axis_coords(self):
        return np.linspace(0.0, 1.0, self.n)

    def nodes(self):
        """Node coordinates, shape (*shape, d)."""
        mesh = np.meshgrid(*[self.axis_coords()] * self.d, indexing="ij")
        return np.stack(mesh, axis=-1)

    def face_coords(self, axis: int):
        """Flux-midpoint coordinates of the faces along one axis."""
        pts = self.nodes()
        sl = [slice(None)] * self.d
        sl[axis] = slice(0, self.n - 1)
        mid = pts[tuple(sl)].copy()
        mid[..., axis] += 0.5 * self.h
        return mid

    def boundary_mask(self):
        mask = np.zeros(self.shape, dtype=bool)
        for ax in range(self.d):
            sl = [slice(None)] * self.d
            sl[ax] = 0
            mask[tuple(sl)] = True
            sl[ax] = -1
            mask[tuple(sl)] = True
        return mask

    def interior_mask(self):
        return ~self.boundary_mask()

    def quadrature_weights(self):
        """Trapezoid weights; they sum to |Omega| = 1."""
        w1 = np.full(self.n, self.h)
        w1[0] = w1[-1] = 0.5 * self.h
        w = w1
        for _ in range(self.d - 1):
            w = np.multiply.outer(w, w1)
        return w


@dataclass(frozen=True)
class CellGrid:
    """Uniform periodic grid on the unit cell, no duplicated endpoint."""

    d: int
    n_y: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise DomainError(f"cell grid dimension {self.d} unsupported")
        if self.n_y < 4:
            raise DomainError(f"cell grid needs n_y >= 4 points per axis, got {self.n_y}")

    @property
    def h(self) -> float:
        return 1.0 / self.n_y

    @property
    def shape(self):
        return (self.n_y,) * self.d

    @property
    def n_nodes(self) -> int:
        return self.n_y**self.d

    def axis_coords(self):
        return np.arange(self.n_y) / self.n_y

    def nodes(self):
        mesh = np.meshgrid(*[self.axis_coords()] * self.d, indexing="ij")
        return np.stack(mesh, axis=-1)

    def face_coords(self, axis: int):
        """Face k along `axis` sits between node k and node (k+1) mod n_y."""
        mid = self.nodes().copy()
        mid[..., axis] += 0.5 * self.h
        return mid

    def quadrature_weights(self):
        """Rectangle weights; they sum to |Y| = 1."""
        return np.full(self.shape, self.h**self.d)


@dataclass
class SparseSystem:
    """Assembled linear system A x = b with stacked component-major dofs."""

    n_dof: int
    matrix: sp.csr_matrix
    rhs: np.ndarray

    def __post_init__(self):
        if self.matrix.shape != (self.n_dof, self.n_dof):
            raise AssemblyError("matrix shape inconsistent with n_dof")
        if self.rhs.shape != (self.n_dof,):
            raise AssemblyError("rhs length inconsistent with n_dof")


def _neighbor_pairs(grid, axis):
    """Flat (left, right) node index pairs for the faces along one axis."""
    flat = np.arange(grid.n_nodes).reshape(grid.shape)
    if isinstance(grid, CellGrid):
        return flat.ravel(), np.roll(flat, -1, axis=axis).ravel()
    sl = [slice(None)] * grid.d
    sl[axis] = slice(0, -1)
    left = flat[tuple(sl)].ravel()
    sl[axis] = slice(1, None)
    right = flat[tuple(sl)].ravel()
    return left, right


def assemble_div_flux(grid, a_faces, b_faces=None, bc=None, n_comp=None):
    """Second-order conservative stencil for -div(a.grad w + b w).

    a_faces[i] holds the diagonal diffusion entry a_ii sampled at the flux
    midpoints along axis i (strictly positive); b_faces[i], when given, holds
    the (N, N, *face_shape) drift block coupling the components of w.  For
    Dirichlet grids boundary rows are identity and boundary columns are
    cleared (homogeneous data); periodic grids wrap.  Returns the csr stencil
    acting on component-major stacked vectors of length n_comp * n_nodes.
    """
    periodic = isinstance(grid, CellGrid)
    if bc is None:
        bc = "periodic" if periodic else "dirichlet"
    if bc not in ("dirichlet", "periodic"):
        raise AssemblyError(f"unknown boundary treatment {bc!r}")
    if (bc == "periodic") != periodic:
        raise AssemblyError(f"bc={bc!r} incompatible with grid type {type(grid).__name__}")
    if n_comp is None:
        n_comp = b_faces[0].shape[0] if b_faces is not None else 1

    n_nodes = grid.n_nodes
    h = grid.h
    rows, cols, vals = [], [], []

    for ax in range(grid.d):
        a = np.asarray(a_faces[ax], dtype=float).ravel()
        if np.any(a <= 0.0):
            bad_flat = int(np.argmax(a <= 0.0))
            bad = tuple(int(i) for i in np.unravel_index(bad_flat, np.asarray(a_faces[ax]).shape))
            raise AssemblyError(
                f"non-positive diffusion sample a[{ax}]{bad} = {float(a[bad_flat])} at a flux midpoint")
        left, right = _neighbor_pairs(grid, ax)
        diff = a / h**2
        for comp in range(n_comp):
            off = comp * n_nodes
            rows.extend((left + off, left + off, right + off, right + off))
            cols.extend((left + off, right + off, right + off, left + off))
            vals.extend((diff, -diff, diff, -diff))
        if b_faces is not None:
            bblk = np.asarray(b_faces[ax], dtype=float)
            nc = bblk.shape[0]
            for al in range(nc):
                for be in range(nc):
                    bv = bblk[al, be].ravel() / (2.0 * h)
                    if not np.any(bv):
                        continue
                    ra, ca = al * n_nodes, be * n_nodes
                    rows.extend((left + ra, left + ra, right + ra, right + ra))
                    cols.extend((left + ca, right + ca, left + ca, right + ca))
                    vals.extend((-bv, -bv, bv, bv))

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)

    if bc == "dirichlet":
        bnd = grid.boundary_mask().ravel()
        is_bnd = np.tile(bnd, n_comp)
        keep = ~(is_bnd[rows] | is_bnd[cols])
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        bdofs = np.flatnonzero(is_bnd)
        rows = np.concatenate([rows, bdofs])
        cols = np.concatenate([cols, bdofs])
        vals = np.concatenate([vals, np.ones(len(bdofs))])

    n_dof = n_comp * n_nodes
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n_dof, n_dof)).tocsr()
    mat.sum_duplicates()
    return mat


def solve_linear(system: SparseSystem, method: str = "direct", tol: float = 1e-12,
                 pin_mean: bool = False, mean_weights=None, maxiter: int = None):
    """Solve A x = b to a relative residual of tol.

    pin_mean augments the (singular, periodic) system with one Lagrange row
    enforcing a zero weighted mean, which fixes the additive-constant gauge;
    gauged solves always go through the direct factorization.  Iterative
    methods raise SolverError with the residual history on non-convergence.
    """
    a, b = system.matrix, system.rhs
    bnorm = float(np.linalg.norm(b))

    if pin_mean:
        w = np.asarray(mean_weights, dtype=float) if mean_weights is not None \
            else np.full(system.n_dof, 1.0 / system.n_dof)
        aug = sp.bmat([[a, w[:, None]], [sp.csr_matrix(w[None, :]), None]], format="csc")
        sol = spla.spsolve(aug, np.concatenate([b, [0.0]]))
        x = sol[:-1]
        res = float(np.linalg.norm(a @ x + sol[-1] * w - b))
        if not np.isfinite(x).all() or res > max(tol * max(bnorm, 1.0), 1e-9):
            raise SolverError(f"gauged direct solve failed, residual {res:.3e}", [res])
        return x

    if method == "direct":
        x = spla.spsolve(a.tocsc(), b)
        res = float(np.linalg.norm(a @ x - b))
        if not np.isfinite(x).all() or res > max(tol * max(bnorm, 1.0), 1e-9):
            raise SolverError(f"direct solve failed, residual {res:.3e}", [res])
        return x

    if method in ("cg", "bicgstab"):
        history = []

        def callback(arg):
            # cg passes xk, bicgstab passes xk as well under scipy >= 1.12
            history.append(float(np.linalg.norm(a @ np.asarray(arg) - b)))

        fn = spla.cg if method == "cg" else spla.bicgstab
        x, info = fn(a, b, rtol=tol, atol=0.0, maxiter=maxiter, callback=callback)
        if info != 0:
            raise SolverError(
                f"{method} failed to converge (info={info}) after {len(history)} iterations",
                history)
        return x

    raise SolverError(f"unknown linear solver method {method!r}")


def fd_gradient(field, grid):
    """Nodal gradient, shape (d,) + field.shape.

    Central differences inside; second-order one-sided stencils on the
    Dirichlet boundary; wrapped central differences on periodic grids.  The
    grid axes are the trailing d axes of `field`, leading axes are batch.
    """
    field = np.asarray(field, dtype=float)
    d = grid.d
    grads = []
    for ax in range(d):
        axis = field.ndim - d + ax
        if isinstance(grid, CellGrid):
            g = (np.roll(field, -1, axis=axis) - np.roll(field, 1, axis=axis)) / (2.0 * grid.h)
        else:
            g = np.gradient(field, grid.h, axis=axis, edge_order=2)
        grads.append(g)
    return np.stack(grads, axis=0)


def integrate_field(field, grid, norm: str = "l2"):
    """Discrete integral functionals over the trailing grid axes.

    norm="l2" returns the discrete L2 norm, norm="mean" the domain average
    (trapezoid rule on macro grids, rectangle rule on periodic cells).
    Leading axes of `field` are treated as a batch.
    """
    field = np.asarray(field, dtype=float)
    w = grid.quadrature_weights()
    axes = tuple(range(field.ndim - grid.d, field.ndim))
    if norm == "l2":
        return np.sqrt(np.sum(w * field**2, axis=axes))
    if norm == "mean":
        return np.sum(w * field, axis=axes)
    raise DomainError(f"unknown norm {norm!r}")
