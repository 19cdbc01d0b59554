"""Fine-scale solver: elliptic stage, relaxation ODE and the coupled march.

The decomposed fine-scale system couples an elliptic equation for v with a
nodewise relaxation ODE for u,

    M^eps v - div(E^eps grad v + D^eps v) = H^eps + K^eps u + J^eps . grad u
    d/dt u + L u = G v,        v = 0 on the boundary,  u(0) = U*.

Each implicit step resolves the (v, u) coupling by Picard iteration between
the elliptic solve and the ODE step; the coupling is linear, so the
iteration contracts for moderate dt.  A trajectory computed here can be
certified against the equivalent single-equation form by reconstructing
w = G^-1 (du/dt + L u) from time differences and measuring the residual of
the merged operator (q_residual).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import CoefficientSet, frac
from .discretization import MacroGrid, SparseSystem, assemble_div_flux, fd_gradient, integrate_field, solve_linear
from .errors import DomainError, PicardError, SolverError
from .stepping import relaxation_step

__all__ = [
    "MicroState",
    "MicroTrajectory",
    "solve_elliptic_V",
    "step_U",
    "run_micro",
    "q_residual",
    "QResidualReport",
]


@dataclass
class MicroState:
    """Fields at one time instant; U, V have shape (N, *grid.shape)."""

    t: float
    U: np.ndarray
    V: np.ndarray


@dataclass
class MicroTrajectory:
    eps: float
    grid: MacroGrid
    dt: float
    scheme: str
    states: List[MicroState]

    @property
    def times(self):
        return np.array([s.t for s in self.states])

    def stack_U(self):
        return np.stack([s.U for s in self.states])

    def stack_V(self):
        return np.stack([s.V for s in self.states])


def _micro_face_samples(cs: CoefficientSet, t: float, eps: float, grid: MacroGrid):
    """Diffusion diagonal and drift blocks at the flux midpoints."""
    e_faces, d_faces = [], []
    for ax in range(grid.d):
        xf = grid.face_coords(ax)
        yf = frac(xf / eps)
        e_faces.append(np.asarray(cs.e.eval_entry((ax,), t, xf, yf)))
        blk = np.empty((cs.N, cs.N) + xf.shape[:-1])
        for al in range(cs.N):
            for be in range(cs.N):
                blk[al, be] = cs.D.eval_entry((ax, al, be), t, xf, yf)
        d_faces.append(blk)
    return e_faces, d_faces


class _EllipticOperator:
    """Frozen-time discrete elliptic operator with a reusable factorization.

    Used for the fine-scale system (coefficients sampled along the eps
    trace) and, with pre-averaged data, by the upscaled solver.
    """

    def __init__(self, grid, n_comp, a_faces, b_faces, m_nodes, method="direct",
                 tol=1e-12, context=""):
        self.grid = grid
        self.n_comp = n_comp
        self.method = method
        self.tol = tol
        self.context = context
        stencil = assemble_div_flux(grid, a_faces, b_faces, bc="dirichlet", n_comp=n_comp)
        interior = grid.interior_mask().ravel()
        mdiag = np.where(np.tile(interior, n_comp), np.concatenate([m.ravel() for m in m_nodes]), 0.0)
        self.matrix = (stencil + sp.diags(mdiag)).tocsr()
        self._bnd = grid.boundary_mask().ravel()
        self._lu = spla.splu(self.matrix.tocsc()) if method == "direct" else None

    def solve(self, rhs_nodes):
        """rhs_nodes: (N, *grid.shape) with arbitrary boundary entries (zeroed here)."""
        rhs = rhs_nodes.reshape(self.n_comp, -1).copy()
        rhs[:, self._bnd] = 0.0
        b = rhs.ravel()
        try:
            if self._lu is not None:
                x = self._lu.solve(b)
                res = float(np.linalg.norm(self.matrix @ x - b))
                if not np.isfinite(x).all() or res > max(self.tol * max(np.linalg.norm(b), 1.0), 1e-9):
                    raise SolverError(f"direct solve residual {res:.3e} above tolerance", [res])
            else:
                x = solve_linear(SparseSystem(b.size, self.matrix, b), method=self.method, tol=self.tol)
        except SolverError as exc:
            raise SolverError(f"elliptic solve failed [{self.context}]: {exc}",
                              exc.residual_history) from exc
        return x.reshape(self.n_comp, *self.grid.shape)


class _MicroLevel:
    """All frozen-time samples the fine-scale solver needs at one t."""

    def __init__(self, cs, t, eps, grid, method, tol):
        self.cs, self.t, self.grid = cs, t, grid
        x = grid.nodes()
        y = frac(x / eps)
        e_f, d_f = _micro_face_samples(cs, t, eps, grid)
        m_nodes = cs.m.eval(t, x, y)
        self.op = _EllipticOperator(grid, cs.N, e_f, d_f, m_nodes, method, tol,
                                    context=f"t={t:.6g}, eps={eps:.6g}")
        self.h_nodes = cs.H.eval(t, x, y)
        self.k_nodes = cs.K.eval(t, x, y)
        self.j_nodes = cs.J.eval(t, x, y)

    def solve_v(self, u):
        grad_u = fd_gradient(u, self.grid)
        rhs = (self.h_nodes
               + np.einsum("ab...,b...->a...", self.k_nodes, u)
               + np.einsum("iab...,ib...->a...", self.j_nodes, grad_u))
        return self.op.solve(rhs)


def solve_elliptic_V(cs: CoefficientSet, U, t: float, eps: float, grid: MacroGrid,
                     method: str = "direct", tol: float = 1e-12):
    """Solve the elliptic stage for V given U, with homogeneous Dirichlet data."""
    if eps <= 0.0:
        raise DomainError(f"eps must be positive, got {eps}")
    U = np.asarray(U, dtype=float)
    level = _MicroLevel(cs, t, eps, grid, method, tol)
    return level.solve_v(U)


def step_U(cs: CoefficientSet, state: MicroState, dt: float, v_next, grid: MacroGrid,
           scheme: str = "implicit-euler"):
    """Advance U by one ODE step using the new-level V iterate v_next."""
    if dt <= 0.0:
        raise DomainError(f"dt must be positive, got {dt}")
    x = grid.nodes()
    t1 = state.t + dt
    l1 = cs.L.eval(t1, x, None)
    g1 = cs.G.eval(t1, x, None)
    if scheme == "crank-nicolson":
        l0 = cs.L.eval(state.t, x, None)
        g0 = cs.G.eval(state.t, x, None)
        return relaxation_step(l1, g1, state.U, v_next, dt, scheme,
                               l_curr=l0, g_curr=g0, v_curr=state.V)
    return relaxation_step(l1, g1, state.U, v_next, dt, scheme)


def _picard_couple(level, state, dt, scheme, cs, grid, picard_tol, picard_max):
    """Resolve the implicit (V^{n+1}, U^{n+1}) pair by fixed-point iteration."""
    u_it = state.U
    history = []
    for _ in range(picard_max):
        v_it = level.solve_v(u_it)
        u_new = step_U(cs, state, dt, v_it, grid, scheme)
        delta = float(np.max(np.abs(u_new - u_it)))
        history.append(delta)
        u_it = u_new
        if delta <= picard_tol * (1.0 + float(np.max(np.abs(u_new)))):
            return u_it, v_it
    raise PicardError(
        f"coupling iteration stalled at t={state.t + dt:.6g} "
        f"(last increment {history[-1]:.3e} after {len(history)} iterations)", history)


def run_micro(cs: CoefficientSet, eps: float, grid: MacroGrid, dt: float, T: float,
              scheme: str = "implicit-euler", picard_tol: float = 1e-10,
              picard_max: int = 50, linear_method: str = "direct",
              linear_tol: float = 1e-12, record_every: int = 1) -> MicroTrajectory:
    """March the coupled fine-scale system from 0 to T.

    Identical inputs produce bitwise identical trajectories: sampling,
    assembly and the direct factorization are all deterministic.
    """
    if eps <= 0.0:
        raise DomainError(f"eps must be positive, got {eps}")
    if dt <= 0.0 or T <= 0.0:
        raise DomainError("dt and T must be positive")
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise DomainError(f"T={T} is not an integer multiple of dt={dt}")

    x = grid.nodes()
    u = cs.U_star.eval(0.0, x, None)
    level = _MicroLevel(cs, 0.0, eps, grid, linear_method, linear_tol)
    v = level.solve_v(u)
    states = [MicroState(0.0, u.copy(), v.copy())]

    time_varying = any(cs.tensor(nm).depends_t for nm in ("M", "E", "D", "H", "K", "J"))
    for k in range(1, n_steps + 1):
        t1 = k * dt
        if time_varying:
            level = _MicroLevel(cs, t1, eps, grid, linear_method, linear_tol)
        state = MicroState((k - 1) * dt, u, v)
        u, v = _picard_couple(level, state, dt, scheme, cs, grid, picard_tol, picard_max)
        if k % record_every == 0 or k == n_steps:
            states.append(MicroState(t1, u.copy(), v.copy()))
    return MicroTrajectory(eps, grid, dt * record_every, scheme, states)


def _nodewise_solve(mats, field):
    """Solve mats @ x = field per node; mats (*sh, N, N), field (N, *sh)."""
    rhs = np.moveaxis(field, 0, -1)[..., None]
    return np.moveaxis(np.linalg.solve(mats, rhs)[..., 0], -1, 0)


@dataclass
class QResidualReport:
    """Discrete residual of the merged (single-equation) operator per time."""

    times: np.ndarray
    per_component: np.ndarray   # (n_times, N)
    total: np.ndarray           # (n_times,)


def q_residual(cs: CoefficientSet, traj: MicroTrajectory) -> QResidualReport:
    """Certify the decomposition by the residual of the merged operator.

    Reconstructs w = G^-1 (du/dt + L u) with centered time differences
    (one-sided at the endpoints), imposes the boundary relation w = 0, and
    measures the interior L2 residual of

        M^eps G^-1 du/dt - div((E^eps grad + D^eps) w)
            - H^eps - (K^eps - M^eps G^-1 L) u - J^eps . grad u.

    For a trajectory produced by run_micro this is O(h^2 + dt).
    """
    if len(traj.states) < 2:
        raise DomainError("trajectory too short to difference in time")
    grid = traj.grid
    eps = traj.eps
    x = grid.nodes()
    interior = grid.interior_mask()
    us = traj.stack_U()
    times = traj.times
    dt = float(times[1] - times[0])
    nt = len(times)

    per_comp = np.zeros((nt, cs.N))
    total = np.zeros(nt)
    for k in range(nt):
        t = float(times[k])
        if k == 0:
            dudt = (us[1] - us[0]) / dt
        elif k == nt - 1:
            dudt = (us[-1] - us[-2]) / dt
        else:
            dudt = (us[k + 1] - us[k - 1]) / (2.0 * dt)
        u = us[k]
        y = frac(x / eps)
        g = np.moveaxis(cs.G.eval(t, x, None), (0, 1), (-2, -1))
        l_nodes = cs.L.eval(t, x, None)
        lu = np.einsum("ab...,b...->a...", l_nodes, u)
        ginv_dudt = _nodewise_solve(g, dudt)
        w = _nodewise_solve(g, dudt + lu)
        w[:, grid.boundary_mask()] = 0.0        # boundary relation du/dt + L u = 0

        e_f, d_f = _micro_face_samples(cs, t, eps, grid)
        stencil = assemble_div_flux(grid, e_f, d_f, bc="dirichlet", n_comp=cs.N)
        div_term = (stencil @ w.ravel()).reshape(cs.N, *grid.shape)

        m_nodes = cs.m.eval(t, x, y)
        h_nodes = cs.H.eval(t, x, y)
        k_nodes = cs.K.eval(t, x, y)
        j_nodes = cs.J.eval(t, x, y)
        grad_u = fd_gradient(u, grid)
        ginv_lu = _nodewise_solve(g, lu)
        res = (m_nodes * ginv_dudt + div_term
               - h_nodes
               - np.einsum("ab...,b...->a...", k_nodes, u)
               + m_nodes * ginv_lu
               - np.einsum("iab...,ib...->a...", j_nodes, grad_u))
        res[:, ~interior] = 0.0
        norms = integrate_field(res, grid, norm="l2")
        per_comp[k] = norms
        total[k] = float(np.sqrt(np.sum(norms**2)))
    return QResidualReport(times=times, per_component=per_comp, total=total)
