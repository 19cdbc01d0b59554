"""Periodic cell problems, effective tensors and corrector tensors.

At a slow sample point (t, x) the fast profile of the diffusion diagonal
E and the drift tensor D determine

  * corrector fields W_i solving  div_y(E (e_i + grad_y W_i)) = 0,
  * drift correctors delta_ab solving  div_y(E grad_y delta_ab) = -div_y D_.ab,

both periodic with zero mean (the additive constant is pinned by one
Lagrange row), and the cell averages

  * E*_ij = <[E (e_i + grad_y W_i)]_j>      (flux of problem i),
  * D*_iab = <D_iab + E_i d/dy_i delta_ab>  (flux of the delta problem),

evaluated at face midpoints, where the discrete fluxes are exactly
divergence free.  The corrector tensors feeding the upscaled memory ODE are
nodal gradients contracted with G: dtilde = G . grad_y delta and
wtilde = grad_y W (x) G.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import CoefficientSet, Separable, TensorCoefficient
from .discretization import CellGrid, MacroGrid, assemble_div_flux, fd_gradient
from .errors import SolverError

__all__ = [
    "CellSolution",
    "cell_face_samples",
    "solve_cell_W",
    "solve_cell_delta",
    "effective_tensors",
    "corrector_tensors",
    "solve_cell_at",
    "CellTable",
    "cell_sweep",
]


@dataclass
class CellSolution:
    """Correctors and averaged tensors at one slow sample point."""

    t: float
    x: np.ndarray
    W: np.ndarray             # (d, *cell)
    delta: np.ndarray         # (N, N, *cell)
    E_star: np.ndarray        # (d, d)
    D_star: np.ndarray        # (d, N, N)
    delta_tilde: np.ndarray   # (d, N, N, *cell)
    omega_tilde: np.ndarray   # (d, d, N, N, *cell)


class _GaugedCellSolver:
    """Factorized periodic operator with the zero-mean Lagrange row."""

    def __init__(self, cell: CellGrid, e_faces, context: str = ""):
        self.cell = cell
        self.context = context
        stencil = assemble_div_flux(cell, e_faces, None, bc="periodic", n_comp=1)
        w = np.full(cell.n_nodes, 1.0 / cell.n_nodes)
        aug = sp.bmat([[stencil, w[:, None]], [sp.csr_matrix(w[None, :]), None]], format="csc")
        self._stencil = stencil
        self._lu = spla.splu(aug)

    def solve(self, rhs):
        b = np.concatenate([rhs.ravel(), [0.0]])
        sol = self._lu.solve(b)
        x = sol[:-1]
        res = float(np.linalg.norm(self._stencil @ x - rhs.ravel()))
        if not np.isfinite(x).all() or res > max(1e-10 * max(np.linalg.norm(rhs), 1.0), 1e-9):
            raise SolverError(
                f"cell solve residual {res:.3e} above tolerance [{self.context}]", [res])
        return x.reshape(self.cell.shape)


def cell_face_samples(cs: CoefficientSet, t: float, x, cell: CellGrid,
                      e_tensor: Optional[TensorCoefficient] = None,
                      d_tensor: Optional[TensorCoefficient] = None):
    """Sample E (diagonal) and D at the cell face midpoints for fixed (t, x)."""
    e_tensor = e_tensor if e_tensor is not None else cs.e
    d_tensor = d_tensor if d_tensor is not None else cs.D
    x = np.asarray(x, dtype=float)
    e_faces, d_faces = [], []
    for ax in range(cs.d):
        yf = cell.face_coords(ax)
        xb = np.broadcast_to(x, yf.shape)
        e_faces.append(np.asarray(e_tensor.eval_entry((ax,), t, xb, yf)))
        blk = np.empty((cs.N, cs.N) + cell.shape)
        for al in range(cs.N):
            for be in range(cs.N):
                blk[al, be] = d_tensor.eval_entry((ax, al, be), t, xb, yf)
        d_faces.append(blk)
    return e_faces, d_faces


def _face_divergence(face_vals, axis, h):
    """Discrete divergence contribution (f at right face - f at left face)/h."""
    return (face_vals - np.roll(face_vals, 1, axis=axis)) / h


def solve_cell_W(e_faces, cell: CellGrid, solver: Optional[_GaugedCellSolver] = None):
    """Solve the d corrector problems; returns W of shape (d, *cell), zero mean."""
    solver = solver or _GaugedCellSolver(cell, e_faces)
    out = np.empty((cell.d,) + cell.shape)
    for i in range(cell.d):
        ndim_off = e_faces[i].ndim - cell.d
        rhs = _face_divergence(e_faces[i], ndim_off + i, cell.h)
        out[i] = solver.solve(rhs)
    return out


def solve_cell_delta(e_faces, d_faces, cell: CellGrid, n_comp: Optional[int] = None,
                     solver: Optional[_GaugedCellSolver] = None):
    """Solve the drift corrector problems; returns delta (N, N, *cell), zero mean."""
    solver = solver or _GaugedCellSolver(cell, e_faces)
    nn = n_comp if n_comp is not None else d_faces[0].shape[0]
    out = np.empty((nn, nn) + cell.shape)
    for al in range(nn):
        for be in range(nn):
            rhs = np.zeros(cell.shape)
            for j in range(cell.d):
                rhs += _face_divergence(d_faces[j][al, be], j, cell.h)
            if np.any(rhs):
                out[al, be] = solver.solve(rhs)
            else:
                out[al, be] = 0.0
    return out


def effective_tensors(e_faces, d_faces, W, delta, cell: CellGrid):
    """Cell averages of the corrector fluxes: (E_star (d,d), D_star (d,N,N)).

    Quadrature runs over face midpoints, where the discrete fluxes of the
    cell problems are constant along their axis in 1D; the rule is exact for
    resolved trigonometric profiles and second order otherwise.
    """
    d = cell.d
    h = cell.h
    e_star = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            dw = (np.roll(W[i], -1, axis=j) - W[i]) / h
            e_star[i, j] = float(np.mean(e_faces[j] * ((1.0 if i == j else 0.0) + dw)))
    nn = delta.shape[0]
    d_star = np.empty((d, nn, nn))
    for i in range(d):
        for al in range(nn):
            for be in range(nn):
                dd = (np.roll(delta[al, be], -1, axis=i) - delta[al, be]) / h
                d_star[i, al, be] = float(np.mean(d_faces[i][al, be] + e_faces[i] * dd))
    sym = 0.5 * (e_star + e_star.T)
    if float(np.linalg.eigvalsh(sym).min()) <= 0.0:
        raise SolverError(f"effective diffusion lost positive definiteness: {e_star!r}")
    return e_star, d_star


def corrector_tensors(g_mat, W, delta, cell: CellGrid):
    """Nodal corrector tensors (delta_tilde, omega_tilde) for a given G.

    delta_tilde[j, a, b] = sum_g G[a, g] d/dy_j delta[g, b]  (G carries no
    fast dependence, so the gradient passes through G), and
    omega_tilde[j, i, a, b] = (d/dy_j W_i) G[a, b].
    """
    g_mat = np.asarray(g_mat, dtype=float)
    grad_w = fd_gradient(W, cell)           # (j, i, *cell)
    grad_delta = fd_gradient(delta, cell)   # (j, g, b, *cell)
    delta_tilde = np.einsum("ag,jgb...->jab...", g_mat, grad_delta)
    omega_tilde = np.einsum("ji...,ab->jiab...", grad_w, g_mat)
    return delta_tilde, omega_tilde


def solve_cell_at(cs: CoefficientSet, t: float, x, cell: CellGrid) -> CellSolution:
    """Full cell solve at one (t, x): correctors plus all derived tensors."""
    e_f, d_f = cell_face_samples(cs, t, x, cell)
    solver = _GaugedCellSolver(cell, e_f, context=f"t={t:.6g}, x={np.asarray(x)}")
    w = solve_cell_W(e_f, cell, solver=solver)
    delta = solve_cell_delta(e_f, d_f, cell, n_comp=cs.N, solver=solver)
    e_star, d_star = effective_tensors(e_f, d_f, w, delta, cell)
    g_mat = cs.G.eval(t, np.asarray(x, dtype=float), None)
    dt_t, om_t = corrector_tensors(g_mat, w, delta, cell)
    return CellSolution(t=t, x=np.asarray(x, dtype=float), W=w, delta=delta,
                        E_star=e_star, D_star=d_star, delta_tilde=dt_t, omega_tilde=om_t)


class _CellBase:
    """Reusable slow-independent part of a cell solution."""

    def __init__(self, W, delta, E_star, D_star, cell):
        self.W = W
        self.delta = delta
        self.E_star = E_star
        self.D_star = D_star
        self.grad_W = fd_gradient(W, cell)
        self.grad_delta = fd_gradient(delta, cell)


class CellTable:
    """Cell solutions indexed by (time, macro node), with reuse shortcuts.

    Three regimes, detected from the coefficient structure:

    * "const": E and D carry no slow dependence; one base solve serves every
      sample.
    * "separable": every slow-varying entry factors through shared slow
      factors f_E, f_D; the base solve on the fast profiles is rescaled
      analytically (W is invariant, delta scales by f_D/f_E, E* by f_E and
      D* by f_D).
    * "general": each requested (t, x) sample is solved on demand and
      memoized.
    """

    def __init__(self, cs: CoefficientSet, macro: MacroGrid, cell: CellGrid):
        self.cs = cs
        self.macro = macro
        self.cell = cell
        self.mode = cs.cell_dependency()
        self._nodes = macro.nodes()
        self._cache = {}
        self._base = None
        self._factors = None
        if self.mode == "const":
            x0 = self._nodes[(0,) * macro.d]
            e_f, d_f = cell_face_samples(cs, 0.0, x0, cell)
            self._base = self._solve_base(e_f, d_f)
        elif self.mode == "separable":
            f_e, f_d = cs.separable_factors()
            self._factors = (f_e, f_d)
            e_hat = TensorCoefficient(np.array(
                [f.y if isinstance(f, Separable) else f for f in cs.e.entries.flat],
                dtype=object).reshape(cs.e.shape))
            d_hat = TensorCoefficient(np.array(
                [f.y if isinstance(f, Separable) else f for f in cs.D.entries.flat],
                dtype=object).reshape(cs.D.shape))
            x0 = self._nodes[(0,) * macro.d]
            e_f, d_f = cell_face_samples(cs, 0.0, x0, cell, e_tensor=e_hat, d_tensor=d_hat)
            self._base = self._solve_base(e_f, d_f)

    def _solve_base(self, e_f, d_f):
        solver = _GaugedCellSolver(self.cell, e_f)
        w = solve_cell_W(e_f, self.cell, solver=solver)
        delta = solve_cell_delta(e_f, d_f, self.cell, n_comp=self.cs.N, solver=solver)
        e_star, d_star = effective_tensors(e_f, d_f, w, delta, self.cell)
        return _CellBase(w, delta, e_star, d_star, self.cell)

    def _from_base(self, base: _CellBase, t, x, fe=1.0, fd=1.0):
        ratio = fd / fe
        g_mat = self.cs.G.eval(t, np.asarray(x, dtype=float), None)
        delta = base.delta * ratio
        delta_tilde = np.einsum("ag,jgb...->jab...", g_mat, base.grad_delta) * ratio
        omega_tilde = np.einsum("ji...,ab->jiab...", base.grad_W, g_mat)
        return CellSolution(t=t, x=np.asarray(x, dtype=float), W=base.W, delta=delta,
                            E_star=base.E_star * fe, D_star=base.D_star * fd,
                            delta_tilde=delta_tilde, omega_tilde=omega_tilde)

    def at(self, t: float, node) -> CellSolution:
        """Cell solution for macro node index tuple `node` at time t."""
        node = tuple(np.atleast_1d(node))
        x = self._nodes[node]
        if self.mode == "const":
            return self._from_base(self._base, t, x)
        if self.mode == "separable":
            f_e, f_d = self._factors
            fe = float(f_e(t, x[None, :], None)[0]) if (f_e.depends_t or f_e.depends_x) else float(f_e(t, None, None))
            fd = float(f_d(t, x[None, :], None)[0]) if (f_d.depends_t or f_d.depends_x) else float(f_d(t, None, None))
            if fe <= 0.0:
                raise SolverError(f"separable diffusion factor non-positive at (t={t}, x={x}): {fe}")
            return self._from_base(self._base, t, x, fe=fe, fd=fd)
        key = (round(float(t), 12), node)
        if key not in self._cache:
            self._cache[key] = solve_cell_at(self.cs, t, x, self.cell)
        return self._cache[key]

    def nodes_e_star(self, t: float):
        """E* stacked over macro nodes, shape (*macro.shape, d, d)."""
        out = np.empty(self.macro.shape + (self.cs.d, self.cs.d))
        for node in np.ndindex(self.macro.shape):
            out[node] = self.at(t, node).E_star
        return out

    def nodes_d_star(self, t: float):
        out = np.empty(self.macro.shape + (self.cs.d, self.cs.N, self.cs.N))
        for node in np.ndindex(self.macro.shape):
            out[node] = self.at(t, node).D_star
        return out


def cell_sweep(cs: CoefficientSet, macro: MacroGrid, times, cell: CellGrid) -> List[CellSolution]:
    """Solve (or reuse) the cell problems at every (t, macro node) sample.

    The sweep is assembled in deterministic index order (times outer, node
    index tuples inner); per-sample failures are aggregated into one error
    listing every offending (t, node).
    """
    table = CellTable(cs, macro, cell)
    sols = []
    failures = []
    for t in times:
        for node in np.ndindex(macro.shape):
            try:
                sols.append(table.at(float(t), node))
            except SolverError as exc:
                failures.append(f"(t={t}, node={node}): {exc}")
    if failures:
        raise SolverError("cell sweep failed at " + str(len(failures)) + " samples:\n  "
                          + "\n  ".join(failures))
    return sols
