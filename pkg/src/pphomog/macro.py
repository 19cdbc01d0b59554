"""Upscaled solver: effective elliptic stage, relaxation ODE and corrector.

The limit system couples the cell-averaged elliptic equation

    Mbar v - div(E* grad v + D* v)
        = Hbar + Kbar u + Jbar . grad u + <J . grad_y script_U>_Y,

the macroscopic ODE du/dt + L u = G v, and a fast-profile evolution for the
corrector gradient g = grad_y script_U living on the cell grid per macro
node:

    dg/dt + L g = dtilde v + wtilde . grad v,     g(0) = 0.

Two interchangeable realizations of g are provided: a stepped implicit
Euler march (works for any L), and, for constant L, the memory
(convolution) form g(t) = int_0^t exp(-L (t-s)) source(s) ds evaluated by
trapezoid quadrature with a precomputed kernel.  Both agree to O(dt).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.linalg

from .cell import CellTable
from .coefficients import CoefficientSet, TensorCoefficient
from .discretization import CellGrid, MacroGrid, fd_gradient
from .errors import ConfigurationError, DomainError, PicardError, StepError
from .micro import _EllipticOperator
from .stepping import relaxation_step

__all__ = [
    "MacroState",
    "MacroTrajectory",
    "MemoryKernel",
    "matrix_exponential",
    "build_memory_kernel",
    "solve_macro_v",
    "step_macro_u",
    "corrector_source",
    "step_corrector",
    "nonlocal_corrector",
    "run_macro",
]

MAX_EXP_DIM = 8


@dataclass
class MacroState:
    """Upscaled fields at one instant; gradU_y is None when the memory
    coupling is inactive, else (n_macro_nodes, d, N, n_cell_nodes)."""

    t: float
    u: np.ndarray
    v: np.ndarray
    gradU_y: Optional[np.ndarray] = None


@dataclass
class MacroTrajectory:
    grid: MacroGrid
    cell: CellGrid
    dt: float
    scheme: str
    mode: str
    states: List[MacroState]

    @property
    def times(self):
        return np.array([s.t for s in self.states])

    def stack_u(self):
        return np.stack([s.u for s in self.states])

    def stack_v(self):
        return np.stack([s.v for s in self.states])


def matrix_exponential(a, s: float):
    """exp(a * s) for a small square matrix (scaling-and-squaring Pade)."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"matrix_exponential needs a square matrix, got shape {a.shape}")
    if a.shape[0] > MAX_EXP_DIM:
        raise DomainError(f"matrix_exponential limited to N <= {MAX_EXP_DIM}, got {a.shape[0]}")
    return scipy.linalg.expm(a * float(s))


@dataclass
class MemoryKernel:
    """Precomputed semigroup samples exp(-L k dt), k = 0..n_steps."""

    dt: float
    mats: np.ndarray  # (n_steps + 1, N, N)

    def __post_init__(self):
        if not np.allclose(self.mats[0], np.eye(self.mats.shape[1])):
            raise ConfigurationError("memory kernel must start at the identity (s = 0)")


def build_memory_kernel(l_mat, dt: float, n_steps: int) -> MemoryKernel:
    l_mat = np.asarray(l_mat, dtype=float)
    mats = np.stack([matrix_exponential(-l_mat, k * dt) for k in range(n_steps + 1)])
    return MemoryKernel(dt=dt, mats=mats)


def _y_averaged(tensor: TensorCoefficient, t: float, x_nodes, y_cells):
    """Rectangle-rule cell average at every macro node, tensor axes first."""
    if not tensor.depends_y:
        return tensor.eval(t, x_nodes, None)
    vals = tensor.eval(t, x_nodes[..., None, :], y_cells)
    return vals.mean(axis=-1)


def _node_to_face(values, grid: MacroGrid, axis: int):
    """Arithmetic face average of nodal values along one axis (leading axes batch)."""
    nd = values.ndim
    ax = nd - grid.d + axis
    sl_lo = [slice(None)] * nd
    sl_hi = [slice(None)] * nd
    sl_lo[ax] = slice(0, -1)
    sl_hi[ax] = slice(1, None)
    return 0.5 * (values[tuple(sl_lo)] + values[tuple(sl_hi)])


class _MacroLevel:
    """Frozen-time assembled operator and samples for the upscaled system."""

    def __init__(self, cs: CoefficientSet, t: float, grid: MacroGrid, cell: CellGrid,
                 table: CellTable, corrector_active: bool,
                 method: str = "direct", tol: float = 1e-12):
        self.cs, self.t, self.grid, self.cell = cs, t, grid, cell
        self.corrector_active = corrector_active
        x = grid.nodes()
        y_cells = cell.nodes().reshape(-1, cell.d)

        self.mbar = _y_averaged(cs.m, t, x, y_cells)
        self.hbar = _y_averaged(cs.H, t, x, y_cells)
        self.kbar = _y_averaged(cs.K, t, x, y_cells)
        self.jbar = _y_averaged(cs.J, t, x, y_cells)

        est = table.nodes_e_star(t)                      # (*sh, d, d)
        diag = np.abs(np.stack([est[..., i, i] for i in range(cs.d)], axis=-1))
        off = np.abs(est) - np.abs(est) * np.eye(cs.d)
        if off.max() > 1e-10 * max(diag.max(), 1.0):
            raise ConfigurationError(
                "effective diffusion tensor has significant off-diagonal entries; "
                "the flux assembly supports diagonal E* only")
        dst = table.nodes_d_star(t)                      # (*sh, d, N, N)
        e_faces = [_node_to_face(est[..., i, i], grid, i) for i in range(cs.d)]
        d_faces = [_node_to_face(np.moveaxis(dst[..., i, :, :], (-2, -1), (0, 1)), grid, i)
                   for i in range(cs.d)]
        self.op = _EllipticOperator(grid, cs.N, e_faces, d_faces, self.mbar, method, tol,
                                    context=f"t={t:.6g}, upscaled")

        self._j_flat = None
        self._dt_flat = None
        self._om_flat = None
        if corrector_active:
            nn = grid.n_nodes
            nc = cell.n_nodes
            d, N = cs.d, cs.N
            x_flat = x.reshape(nn, cs.d)
            if cs.J.depends_y:
                self._j_flat = cs.J.eval(t, x_flat[:, None, :], y_cells).reshape(d, N, N, nn, nc)
            dt_stack = np.empty((nn, d, N, N, nc))
            om_stack = np.empty((nn, d, d, N, N, nc))
            for idx, node in enumerate(np.ndindex(grid.shape)):
                sol = table.at(t, node)
                dt_stack[idx] = sol.delta_tilde.reshape(d, N, N, nc)
                om_stack[idx] = sol.omega_tilde.reshape(d, d, N, N, nc)
            self._dt_flat = dt_stack
            self._om_flat = om_stack

    def memory_term(self, g_flat):
        """<J . g>_Y per macro node; zero when J carries no fast dependence."""
        if g_flat is None or self._j_flat is None:
            return 0.0
        s = np.einsum("jabny,njby->an", self._j_flat, g_flat) / self.cell.n_nodes
        return s.reshape((self.cs.N,) + self.grid.shape)

    def solve_v(self, u, g_flat=None):
        grad_u = fd_gradient(u, self.grid)
        rhs = (self.hbar
               + np.einsum("ab...,b...->a...", self.kbar, u)
               + np.einsum("iab...,ib...->a...", self.jbar, grad_u)
               + self.memory_term(g_flat))
        return self.op.solve(rhs)

    def corrector_source(self, v, grad_v):
        """dtilde v + wtilde . grad v, flattened to (n_nodes, d, N, n_cells)."""
        nn = self.grid.n_nodes
        v_flat = v.reshape(self.cs.N, nn).T
        gv_flat = np.moveaxis(grad_v.reshape(self.cs.d, self.cs.N, nn), -1, 0)
        return (np.einsum("njaby,nb->njay", self._dt_flat, v_flat)
                + np.einsum("njiaby,nib->njay", self._om_flat, gv_flat))


def solve_macro_v(cs: CoefficientSet, cell_table: CellTable, u, gradU_y, t: float,
                  grid: MacroGrid, cell: CellGrid, method: str = "direct",
                  tol: float = 1e-12):
    """Solve the effective elliptic stage for v given u and the corrector gradient."""
    active = gradU_y is not None
    level = _MacroLevel(cs, t, grid, cell, cell_table, corrector_active=active,
                        method=method, tol=tol)
    return level.solve_v(np.asarray(u, dtype=float), gradU_y)


def step_macro_u(cs: CoefficientSet, state: MacroState, dt: float, v_next,
                 grid: MacroGrid, scheme: str = "implicit-euler"):
    """Advance u by one ODE step; same contract as the fine-scale step."""
    if dt <= 0.0:
        raise DomainError(f"dt must be positive, got {dt}")
    x = grid.nodes()
    t1 = state.t + dt
    l1 = cs.L.eval(t1, x, None)
    g1 = cs.G.eval(t1, x, None)
    if scheme == "crank-nicolson":
        l0 = cs.L.eval(state.t, x, None)
        g0 = cs.G.eval(state.t, x, None)
        return relaxation_step(l1, g1, state.u, v_next, dt, scheme,
                               l_curr=l0, g_curr=g0, v_curr=state.v)
    return relaxation_step(l1, g1, state.u, v_next, dt, scheme)


def corrector_source(cell_solution, v_node, grad_v_node):
    """Source dtilde v + wtilde . grad v at one macro node, shape (d, N, *cell)."""
    return (np.einsum("jab...,b->ja...", cell_solution.delta_tilde, np.asarray(v_node, float))
            + np.einsum("jiab...,ib->ja...", cell_solution.omega_tilde,
                        np.asarray(grad_v_node, float)))


def _corrector_step_flat(l_nodes, g_flat, source_flat, dt):
    """Implicit Euler update of the flattened corrector gradient.

    l_nodes: (N, N, *macro shape); g/source: (n_nodes, d, N, n_cells).
    """
    nn, d, N, nc = g_flat.shape
    mats = np.eye(N) + dt * np.moveaxis(l_nodes.reshape(N, N, nn), -1, 0)
    rhs = g_flat + dt * source_flat
    rhs = np.moveaxis(rhs, 2, 1).reshape(nn, N, d * nc)
    try:
        sol = np.linalg.solve(mats, rhs)
    except np.linalg.LinAlgError:
        node = int(np.argmin(np.abs(np.linalg.det(mats))))
        raise StepError(f"singular corrector step matrix I + dt*L at node {node} "
                        f"(dt={dt})") from None
    return np.moveaxis(sol.reshape(nn, N, d, nc), 1, 2)


def step_corrector(cs: CoefficientSet, cell_solution, state: MacroState,
                   grad_v, dt: float, grid: MacroGrid):
    """One implicit-Euler step of the corrector gradient at every macro node.

    state.gradU_y holds the current (n_nodes, d, N, n_cells) field (zeros at
    t = 0); cell_solution is either one CellSolution shared by all nodes or
    a CellTable queried per node.
    """
    t1 = state.t + dt
    x = grid.nodes()
    l1 = cs.L.eval(t1, x, None)
    nn = grid.n_nodes
    v_flat = state.v.reshape(cs.N, nn).T
    gv_flat = np.moveaxis(np.asarray(grad_v).reshape(cs.d, cs.N, nn), -1, 0)
    src = np.empty_like(state.gradU_y)
    for idx, node in enumerate(np.ndindex(grid.shape)):
        sol = cell_solution.at(t1, node) if isinstance(cell_solution, CellTable) else cell_solution
        src[idx] = corrector_source(sol, v_flat[idx], gv_flat[idx]).reshape(
            cs.d, cs.N, -1)
    return _corrector_step_flat(l1, state.gradU_y, src, dt)


def nonlocal_corrector(kernel: MemoryKernel, source_history, n: Optional[int] = None):
    """Duhamel evaluation g(t_n) = int_0^{t_n} exp(-L (t_n - s)) r(s) ds.

    source_history is the list of corrector sources r(t_k) (flattened per
    node, (n_nodes, d, N, n_cells)) at the uniform kernel spacing; trapezoid
    convolution quadrature.  Requires the constant-L kernel; time-dependent
    relaxation must use the stepped mode instead.
    """
    if n is None:
        n = len(source_history) - 1
    if n >= kernel.mats.shape[0]:
        raise DomainError(f"kernel holds {kernel.mats.shape[0]} offsets, need {n + 1}")
    if n == 0:
        return np.zeros_like(source_history[0])
    acc = np.zeros_like(source_history[0])
    for k in range(n + 1):
        w = 0.5 if k in (0, n) else 1.0
        acc += w * np.einsum("ab,njby->njay", kernel.mats[n - k], source_history[k])
    return kernel.dt * acc


def memory_diagnostics(cs: CoefficientSet, traj: "MacroTrajectory"):
    """Per-time L2 norms (over Omega) of the memory source <J . gradU_y>_Y.

    Returns (times, norms) with norms of shape (n_times, N); zero rows when
    the corrector was inactive.
    """
    from .discretization import integrate_field

    grid, cell = traj.grid, traj.cell
    y_cells = cell.nodes().reshape(-1, cell.d)
    x_flat = grid.nodes().reshape(grid.n_nodes, cs.d)
    norms = np.zeros((len(traj.states), cs.N))
    for idx, state in enumerate(traj.states):
        if state.gradU_y is None or not cs.J.depends_y:
            continue
        j_flat = cs.J.eval(state.t, x_flat[:, None, :], y_cells)
        s = np.einsum("jabny,njby->an", j_flat, state.gradU_y) / cell.n_nodes
        norms[idx] = integrate_field(s.reshape((cs.N,) + grid.shape), grid, norm="l2")
    return traj.times, norms


def run_macro(cs: CoefficientSet, cell_table: Optional[CellTable], grid: MacroGrid,
              cell: CellGrid, dt: float, T: float, mode: str = "stepped",
              scheme: str = "implicit-euler", picard_tol: float = 1e-10,
              picard_max: int = 50, linear_method: str = "direct",
              linear_tol: float = 1e-12, record_every: int = 1,
              track_corrector: Optional[bool] = None) -> MacroTrajectory:
    """March the upscaled system from 0 to T.

    mode="stepped" evolves the corrector gradient by implicit Euler;
    mode="nonlocal" eliminates it through the memory convolution (constant L
    only; a time- or space-dependent L falls back to the stepped mode with a
    warning).  The corrector is tracked only when it can feed back into the
    macro equation (J and E or D carry fast dependence), or when forced via
    track_corrector.
    """
    if mode not in ("stepped", "nonlocal"):
        raise ConfigurationError(f"unknown corrector mode {mode!r}")
    if dt <= 0.0 or T <= 0.0:
        raise DomainError("dt and T must be positive")
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise DomainError(f"T={T} is not an integer multiple of dt={dt}")

    table = cell_table if cell_table is not None else CellTable(cs, grid, cell)
    if track_corrector is None:
        active = bool(cs.J.depends_y and (cs.e.depends_y or cs.D.depends_y))
    else:
        active = bool(track_corrector)

    kernel = None
    if mode == "nonlocal" and active:
        if not cs.l_is_constant:
            warnings.warn("nonlocal corrector needs a constant relaxation matrix L; "
                          "falling back to the stepped mode", stacklevel=2)
            mode = "stepped"
        else:
            l_mat = cs.L.eval(0.0, np.zeros(cs.d), None)
            kernel = build_memory_kernel(l_mat, dt, n_steps)

    x = grid.nodes()
    nn, nc = grid.n_nodes, cell.n_nodes
    u = cs.U_star.eval(0.0, x, None)
    slow_time = any(cs.tensor(nm).depends_t for nm in ("M", "E", "D", "H", "K", "J", "G"))
    level = _MacroLevel(cs, 0.0, grid, cell, table, active, linear_method, linear_tol)
    g_flat = np.zeros((nn, cs.d, cs.N, nc)) if active else None
    v = level.solve_v(u, g_flat)
    r_hist = [level.corrector_source(v, fd_gradient(v, grid))] if active else None
    states = [MacroState(0.0, u.copy(), v.copy(),
                         g_flat.copy() if g_flat is not None else None)]

    for k in range(1, n_steps + 1):
        t1 = k * dt
        if slow_time:
            level = _MacroLevel(cs, t1, grid, cell, table, active, linear_method, linear_tol)
        l1 = cs.L.eval(t1, x, None)
        g1m = cs.G.eval(t1, x, None)
        if scheme == "crank-nicolson":
            l0 = cs.L.eval((k - 1) * dt, x, None)
            g0m = cs.G.eval((k - 1) * dt, x, None)

        partial = None
        if active and mode == "nonlocal" and k > 0:
            partial = np.zeros_like(g_flat)
            for j in range(k):
                w = 0.5 if j == 0 else 1.0
                partial += w * np.einsum("ab,njby->njay", kernel.mats[k - j], r_hist[j])
            partial *= dt

        u_it = u
        g_it = g_flat
        history = []
        for _ in range(picard_max):
            v_it = level.solve_v(u_it, g_it)
            g_new = g_it
            r_it = None
            if active:
                gv = fd_gradient(v_it, grid)
                r_it = level.corrector_source(v_it, gv)
                if mode == "nonlocal":
                    g_new = partial + 0.5 * dt * r_it
                else:
                    g_new = _corrector_step_flat(l1, g_flat, r_it, dt)
            if scheme == "crank-nicolson":
                u_new = relaxation_step(l1, g1m, u, v_it, dt, scheme,
                                        l_curr=l0, g_curr=g0m, v_curr=v)
            else:
                u_new = relaxation_step(l1, g1m, u, v_it, dt, scheme)
            delta = float(np.max(np.abs(u_new - u_it)))
            if active:
                delta = max(delta, float(np.max(np.abs(g_new - g_it))))
            history.append(delta)
            u_it, g_it = u_new, g_new
            if delta <= picard_tol * (1.0 + float(np.max(np.abs(u_new)))):
                break
        else:
            raise PicardError(
                f"macro coupling iteration stalled at t={t1:.6g} "
                f"(last increment {history[-1]:.3e})", history)

        u, g_flat = u_it, g_it
        v = level.solve_v(u, g_flat)
        if active:
            r_hist.append(level.corrector_source(v, fd_gradient(v, grid)))
        if k % record_every == 0 or k == n_steps:
            states.append(MacroState(t1, u.copy(), v.copy(),
                                     g_flat.copy() if g_flat is not None else None))
    return MacroTrajectory(grid, cell, dt * record_every, scheme, mode, states)
