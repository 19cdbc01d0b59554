"""Numerical certificates: energy inequality, eps-sweeps and order studies.

The certificate machinery turns the solver's analytical guarantees into
checkable numbers:

* an instantaneous energy inequality bounding weighted norms of v by data
  norms of u, with constants derived from sampled coefficient bounds by a
  Young-inequality splitting (see docs/energy_certificate.md),
* an eps-uniform bound of the composite norm |U|_{H1((0,T)xOmega)} +
  |V|_{Linf H1} across a family of fine-scale runs,
* a two-scale comparison of fine-scale runs against the upscaled solution
  on a shared coarse grid, with an empirical rate fit,
* manufactured-solution order checks of the space and time discretization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .coefficients import (CoefficientSet, FuncField, SamplingGrid, TensorCoefficient,
                           sample_extrema)
from .discretization import CellGrid, MacroGrid, fd_gradient, integrate_field
from .errors import ConfigurationError, DomainError
from .macro import run_macro
from .micro import MicroTrajectory, run_micro

__all__ = [
    "EnergyConstants",
    "EnergyReport",
    "derive_energy_constants",
    "energy_certificate",
    "UniformBoundReport",
    "uniform_bound_check",
    "ConvergenceRow",
    "ConvergenceTable",
    "micro_macro_convergence",
    "OrderReport",
    "manufactured_orders",
]


# ---------------------------------------------------------------------------
# energy certificate
# ---------------------------------------------------------------------------


@dataclass
class EnergyConstants:
    """Weights of the certified inequality; all must be positive for validity."""

    m_tilde: np.ndarray   # (N,)
    e_tilde: np.ndarray   # (d,)
    h_tilde: float
    k_tilde: np.ndarray   # (N,)
    j_tilde: np.ndarray   # (d, N)
    valid: bool


def derive_energy_constants(cs: CoefficientSet, sampling: Optional[SamplingGrid] = None) -> EnergyConstants:
    """Derive certificate weights from sampled coefficient bounds.

    The drift term is absorbed by Young's inequality with the pair weight
    eta_iab = sqrt(d e_min_i / m_min_b), which leaves positive diffusion and
    mass margins whenever the sampled drift-size bound holds strictly.  Half
    of the smallest remaining mass margin is then split evenly over the
    source, coupling and gradient-coupling terms.
    """
    sampling = sampling or SamplingGrid()
    ext = sample_extrema(cs, sampling)
    m_min, e_min = ext["m_min"], ext["e_min"]
    d_sup, k_sup, j_sup, h_sup = ext["d_sup"], ext["k_sup"], ext["j_sup"], ext["h_sup"]
    d, N = cs.d, cs.N
    invalid = EnergyConstants(np.zeros(N), np.zeros(d), 0.0, np.zeros(N),
                              np.zeros((d, N)), valid=False)
    if m_min.min() <= 0.0 or e_min.min() <= 0.0:
        return invalid

    eta = np.sqrt(d * e_min[:, None, None] / m_min[None, None, :])     # (d, a, b)
    e_drain = (0.5 * eta * d_sup).sum(axis=2).max(axis=1)              # (d,)
    m_drain = (0.5 / eta * d_sup).sum(axis=(0, 1))                     # (N,)
    e_tilde = e_min - e_drain
    margin = m_min - m_drain
    if e_tilde.min() <= 0.0 or margin.min() <= 0.0:
        return invalid

    has_h = bool(h_sup.max() > 0.0)
    has_k = bool(k_sup.max() > 0.0)
    has_j = bool(j_sup.max() > 0.0)
    n_present = has_h + has_k + has_j
    h_tilde = 0.0
    k_tilde = np.zeros(N)
    j_tilde = np.zeros((d, N))
    drain2 = np.zeros(N)
    if n_present:
        share = 0.5 * margin.min() / n_present
        if has_h:
            sigma = 2.0 * share
            h_tilde = float((h_sup**2).sum() / (2.0 * sigma))          # |Omega| = 1
            drain2 += 0.5 * sigma
        if has_k:
            row = k_sup.sum(axis=1)                                    # per V component
            tau = 2.0 * share / row.max()
            k_tilde = k_sup.sum(axis=0) / (2.0 * tau)
            drain2 += 0.5 * tau * row
        if has_j:
            row = j_sup.sum(axis=(0, 2))
            rho = 2.0 * share / row.max()
            j_tilde = j_sup.sum(axis=1) / (2.0 * rho)
            drain2 += 0.5 * rho * row
    m_tilde = margin - drain2
    return EnergyConstants(m_tilde=m_tilde, e_tilde=e_tilde, h_tilde=h_tilde,
                           k_tilde=k_tilde, j_tilde=j_tilde,
                           valid=bool(m_tilde.min() > 0.0))


@dataclass
class EnergyReport:
    """Both sides of the certified inequality at every recorded time."""

    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    passes: np.ndarray
    constants: EnergyConstants

    @property
    def all_pass(self) -> bool:
        return bool(self.constants.valid and self.passes.all())

    @property
    def min_margin(self) -> float:
        return float((self.rhs - self.lhs).min())


def energy_certificate(cs: CoefficientSet, traj: MicroTrajectory,
                       constants: Optional[EnergyConstants] = None,
                       sampling: Optional[SamplingGrid] = None) -> EnergyReport:
    """Evaluate the energy inequality along a fine-scale trajectory.

    lhs = sum_a m~_a |V_a|^2 + sum_ia e~_i |d_i V_a|^2 must not exceed
    rhs = H~ + sum_a K~_a |U_a|^2 + sum_ia J~_ia |d_i U_a|^2 at any recorded
    time.  Failures are reported as data, never raised.
    """
    if constants is None:
        if sampling is None:
            tmax = float(traj.times[-1]) if len(traj.states) else 1.0
            sampling = SamplingGrid(t_max=max(tmax, 1e-12))
        constants = derive_energy_constants(cs, sampling)
    grid = traj.grid
    nt = len(traj.states)
    lhs = np.zeros(nt)
    rhs = np.zeros(nt)
    for idx, state in enumerate(traj.states):
        v_l2 = integrate_field(state.V, grid, norm="l2")                  # (N,)
        gv_l2 = integrate_field(fd_gradient(state.V, grid), grid, norm="l2")  # (d, N)
        u_l2 = integrate_field(state.U, grid, norm="l2")
        gu_l2 = integrate_field(fd_gradient(state.U, grid), grid, norm="l2")
        lhs[idx] = float((constants.m_tilde * v_l2**2).sum()
                         + (constants.e_tilde[:, None] * gv_l2**2).sum())
        rhs[idx] = float(constants.h_tilde
                         + (constants.k_tilde * u_l2**2).sum()
                         + (constants.j_tilde * gu_l2**2).sum())
    passes = lhs <= rhs * (1.0 + 1e-12) + 1e-14
    return EnergyReport(times=traj.times, lhs=lhs, rhs=rhs, passes=passes,
                        constants=constants)


# ---------------------------------------------------------------------------
# eps-uniform bound
# ---------------------------------------------------------------------------


def _u_h1_spacetime(traj: MicroTrajectory, u_stack=None) -> float:
    """Discrete |U|_{H1((0,T) x Omega)} including the time derivative."""
    grid = traj.grid
    us = traj.stack_U() if u_stack is None else u_stack
    times = traj.times
    nt = len(times)
    dt = float(times[1] - times[0])
    dudt = np.empty_like(us)
    dudt[0] = (us[1] - us[0]) / dt
    dudt[-1] = (us[-1] - us[-2]) / dt
    if nt > 2:
        dudt[1:-1] = (us[2:] - us[:-2]) / (2.0 * dt)
    dens = np.zeros(nt)
    for k in range(nt):
        dens[k] = float((integrate_field(us[k], grid, norm="l2")**2).sum()
                        + (integrate_field(fd_gradient(us[k], grid), grid, norm="l2")**2).sum()
                        + (integrate_field(dudt[k], grid, norm="l2")**2).sum())
    return float(np.sqrt(np.trapezoid(dens, times)))


def _v_linf_h1(traj: MicroTrajectory) -> float:
    """Discrete |V|_{Linf((0,T), H1_0)}."""
    grid = traj.grid
    best = 0.0
    for state in traj.states:
        val = float((integrate_field(state.V, grid, norm="l2")**2).sum()
                    + (integrate_field(fd_gradient(state.V, grid), grid, norm="l2")**2).sum())
        best = max(best, val)
    return float(np.sqrt(best))


@dataclass
class UniformBoundReport:
    eps: np.ndarray
    u_h1: np.ndarray
    v_linf_h1: np.ndarray
    composite: np.ndarray
    ratio: float


def uniform_bound_check(runs: Sequence[MicroTrajectory]) -> UniformBoundReport:
    """Composite norms per eps and their max/min ratio across the family."""
    if not runs:
        raise DomainError("uniform_bound_check needs at least one trajectory")
    eps = np.array([r.eps for r in runs])
    u_h1 = np.array([_u_h1_spacetime(r) for r in runs])
    v_li = np.array([_v_linf_h1(r) for r in runs])
    comp = u_h1 + v_li
    cmax, cmin = float(comp.max()), float(comp.min())
    ratio = cmax / cmin if cmin > 0.0 else (1.0 if cmax == 0.0 else float("inf"))
    return UniformBoundReport(eps=eps, u_h1=u_h1, v_linf_h1=v_li, composite=comp, ratio=ratio)


# ---------------------------------------------------------------------------
# two-scale comparison
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceRow:
    eps: float
    micro_n: int
    dt: float
    err_u: float
    err_v: float
    composite_norm: float


@dataclass
class ConvergenceTable:
    rows: List[ConvergenceRow]
    rate_u: float
    rate_v: float


def _restrict(field, stride: int, d: int):
    """Restrict (N, *fine shape) nodal data to the coarse grid by slicing."""
    sl = (slice(None),) + (slice(None, None, stride),) * d
    return field[sl]


def _spacetime_l2(diff_stack, times, grid) -> float:
    dens = np.array([float((integrate_field(f, grid, norm="l2")**2).sum()) for f in diff_stack])
    return float(np.sqrt(np.trapezoid(dens, times)))


def micro_macro_convergence(cs: CoefficientSet, eps_list: Sequence[float], macro_n: int,
                            cell_n: int, dt: float, T: float,
                            scheme: str = "implicit-euler",
                            nodes_per_period: int = 16,
                            micro_intervals: Optional[Sequence[int]] = None,
                            **run_kwargs) -> ConvergenceTable:
    """Compare fine-scale runs against the upscaled run on the coarse grid.

    Each eps must be the reciprocal of an integer; the fine grid for eps=1/k
    uses at least nodes_per_period * k intervals (>= 8 per period), rounded
    up to a multiple of the coarse interval count so restriction is pure
    subsampling.  Refuses under-resolved explicit grids before any solve.
    """
    if nodes_per_period < 8:
        raise ConfigurationError(f"nodes_per_period must be >= 8, got {nodes_per_period}")
    eps_sorted = sorted(set(float(e) for e in eps_list), reverse=True)
    macro_int = macro_n - 1
    plans = []
    for pos, eps in enumerate(eps_sorted):
        k = round(1.0 / eps)
        if abs(k * eps - 1.0) > 1e-9 or k < 2:
            raise ConfigurationError(f"eps={eps} is not the reciprocal of an integer >= 2")
        if micro_intervals is not None:
            m_int = int(micro_intervals[pos])
            if m_int % macro_int != 0:
                raise ConfigurationError(
                    f"micro interval count {m_int} is not a multiple of the coarse count {macro_int}")
            if m_int * eps < 8 - 1e-12:
                raise ConfigurationError(
                    f"under-resolved eps={eps}: {m_int} intervals give {m_int * eps:.2f} "
                    "nodes per period, need >= 8")
        else:
            m_int = macro_int * math.ceil(nodes_per_period * k / macro_int)
        plans.append((eps, m_int))

    coarse = MacroGrid(cs.d, macro_n)
    cellg = CellGrid(cs.d, cell_n)
    macro_traj = run_macro(cs, None, coarse, cellg, dt, T, mode="stepped",
                           scheme=scheme, **run_kwargs)
    mu = macro_traj.stack_u()
    mv = macro_traj.stack_v()
    times = macro_traj.times

    rows = []
    for eps, m_int in plans:
        fine = MacroGrid(cs.d, m_int + 1)
        traj = run_micro(cs, eps, fine, dt, T, scheme=scheme, **run_kwargs)
        stride = m_int // macro_int
        du = np.stack([_restrict(s.U, stride, cs.d) for s in traj.states]) - mu
        dv = np.stack([_restrict(s.V, stride, cs.d) for s in traj.states]) - mv
        err_u = _spacetime_l2(du, times, coarse)
        err_v = _spacetime_l2(dv, times, coarse)
        comp = _u_h1_spacetime(traj) + _v_linf_h1(traj)
        rows.append(ConvergenceRow(eps=eps, micro_n=m_int + 1, dt=dt,
                                   err_u=err_u, err_v=err_v, composite_norm=comp))
        if not (np.isfinite(err_u) and np.isfinite(err_v)):
            raise DomainError(f"non-finite comparison error at eps={eps}")

    le = np.log([r.eps for r in rows])
    rate_u = float(np.polyfit(le, np.log([max(r.err_u, 1e-300) for r in rows]), 1)[0]) \
        if len(rows) >= 2 else float("nan")
    rate_v = float(np.polyfit(le, np.log([max(r.err_v, 1e-300) for r in rows]), 1)[0]) \
        if len(rows) >= 2 else float("nan")
    return ConvergenceTable(rows=rows, rate_u=rate_u, rate_v=rate_v)


# ---------------------------------------------------------------------------
# manufactured-solution order studies
# ---------------------------------------------------------------------------


def _const_value(tensor: TensorCoefficient, d: int, index) -> float:
    if tensor.entries[index].depends_t or tensor.entries[index].depends_x \
            or tensor.entries[index].depends_y:
        raise ConfigurationError("manufactured order study needs constant coefficients")
    return float(tensor.entries[index](0.0, np.zeros((1, d)), np.zeros((1, d)))[0])


class _Profile:
    """Separable spatial profile with analytic first and second partials."""

    def __init__(self, kind: str, d: int):
        self.kind = kind
        self.d = d

    def value(self, x):
        x = np.asarray(x)
        out = np.ones(x.shape[:-1])
        for i in range(self.d):
            xi = x[..., i]
            out = out * (np.sin(np.pi * xi) if self.kind == "sine" else xi * (1.0 - xi))
        return out

    def d1(self, x, axis):
        x = np.asarray(x)
        out = np.ones(x.shape[:-1])
        for i in range(self.d):
            xi = x[..., i]
            if i == axis:
                out = out * (np.pi * np.cos(np.pi * xi) if self.kind == "sine" else 1.0 - 2.0 * xi)
            else:
                out = out * (np.sin(np.pi * xi) if self.kind == "sine" else xi * (1.0 - xi))
        return out

    def d2(self, x, axis):
        x = np.asarray(x)
        out = np.ones(x.shape[:-1])
        for i in range(self.d):
            xi = x[..., i]
            if i == axis:
                out = out * (-np.pi**2 * np.sin(np.pi * xi) if self.kind == "sine"
                             else -2.0 * np.ones_like(xi))
            else:
                out = out * (np.sin(np.pi * xi) if self.kind == "sine" else xi * (1.0 - xi))
        return out


def _manufactured_set(cs: CoefficientSet, profile: _Profile, phi, dphi, zero_drift: bool):
    """Coefficient set whose exact solution is U = phi(t) s(x), V = psi(t) s(x)."""
    d = cs.d
    m = _const_value(cs.m, d, (0,))
    e = [_const_value(cs.e, d, (i,)) for i in range(d)]
    dco = [0.0 if zero_drift else _const_value(cs.D, d, (i, 0, 0)) for i in range(d)]
    kco = _const_value(cs.K, d, (0, 0))
    jco = [_const_value(cs.J, d, (i, 0, 0)) for i in range(d)]
    lco = _const_value(cs.L, d, (0, 0))
    gco = _const_value(cs.G, d, (0, 0))
    if gco == 0.0:
        raise ConfigurationError("manufactured study needs invertible (nonzero) G")

    def psi(t):
        return (dphi(t) + lco * phi(t)) / gco

    def h_fun(t, x, y):
        s = profile.value(x)
        val = m * psi(t) * s - kco * phi(t) * s
        for i in range(d):
            val -= psi(t) * (e[i] * profile.d2(x, i) + dco[i] * profile.d1(x, i))
            val -= jco[i] * phi(t) * profile.d1(x, i)
        return val

    def ustar_fun(t, x, y):
        return phi(0.0) * profile.value(x)

    h_field = TensorCoefficient(np.array([FuncField(h_fun, depends_t=True, depends_x=True)],
                                         dtype=object))
    u_field = TensorCoefficient(np.array([FuncField(ustar_fun, depends_t=False, depends_x=True)],
                                         dtype=object))
    new = replace(cs, H=h_field, U_star=u_field)
    if zero_drift:
        new = replace(new, D=TensorCoefficient.from_values(np.zeros((d, 1, 1))))

    def exact(t, x):
        return phi(t) * profile.value(x), psi(t) * profile.value(x)

    return new, exact


def _study_error(traj, exact, grid) -> float:
    err = 0.0
    for state in traj.states:
        u_ex, v_ex = exact(state.t, grid.nodes())
        u_num = state.U[0] if hasattr(state, "U") else state.u[0]
        v_num = state.V[0] if hasattr(state, "U") else state.v[0]
        err = max(err,
                  float(integrate_field(u_num - u_ex, grid, norm="l2")),
                  float(integrate_field(v_num - v_ex, grid, norm="l2")))
    return err


def _fit_order(hs, errs) -> float:
    # err ~ C h^p: both logs shrink together, so the fitted slope is +p
    return float(np.polyfit(np.log(hs), np.log(np.maximum(errs, 1e-300)), 1)[0])


@dataclass
class OrderReport:
    spatial_micro: float
    temporal_micro: float
    spatial_macro: float
    temporal_macro: float
    spatial_errors: List[tuple]
    temporal_errors: List[tuple]


def manufactured_orders(cs: CoefficientSet, levels: int = 3) -> OrderReport:
    """Observed discretization orders on manufactured exact solutions.

    Spatial study: trigonometric profile with an affine time factor (the
    implicit step is exact on it), h halved per level.  Temporal study:
    drift-free quadratic profile (the stencil is exact on it) with an
    exponential time factor, dt halved per level.  Runs both the fine-scale
    and the upscaled solver; N = 1 and constant coefficients required.
    """
    if cs.N != 1:
        raise ConfigurationError("manufactured order study supports N = 1")
    if levels < 2:
        raise ConfigurationError("order study needs at least 2 levels")
    d = cs.d
    cellg = CellGrid(d, 8)

    sine = _Profile("sine", d)
    cs_sp, exact_sp = _manufactured_set(cs, sine, lambda t: 1.0 + t, lambda t: 1.0,
                                        zero_drift=False)
    ns = [9 * 2**lev + 1 for lev in range(levels)] if d == 2 else [17 * 2**lev + 1 for lev in range(levels)]
    dt_sp, t_sp = 0.05, 0.2
    sp_err_mi, sp_err_ma, hs = [], [], []
    for n in ns:
        grid = MacroGrid(d, n)
        hs.append(grid.h)
        mi = run_micro(cs_sp, 0.5, grid, dt_sp, t_sp)
        ma = run_macro(cs_sp, None, grid, cellg, dt_sp, t_sp)
        sp_err_mi.append(_study_error(mi, exact_sp, grid))
        sp_err_ma.append(_study_error(ma, exact_sp, grid))

    quad = _Profile("quadratic", d)
    cs_tm, exact_tm = _manufactured_set(cs, quad, lambda t: np.exp(-t), lambda t: -np.exp(-t),
                                        zero_drift=True)
    grid_tm = MacroGrid(d, 17)
    dts = [0.08 / 2**lev for lev in range(levels)]
    t_tm = 0.32
    tm_err_mi, tm_err_ma = [], []
    for dt in dts:
        mi = run_micro(cs_tm, 0.5, grid_tm, dt, t_tm)
        ma = run_macro(cs_tm, None, grid_tm, cellg, dt, t_tm)
        tm_err_mi.append(_study_error(mi, exact_tm, grid_tm))
        tm_err_ma.append(_study_error(ma, exact_tm, grid_tm))

    return OrderReport(
        spatial_micro=_fit_order(hs, sp_err_mi),
        temporal_micro=_fit_order(dts, tm_err_mi),
        spatial_macro=_fit_order(hs, sp_err_ma),
        temporal_macro=_fit_order(dts, tm_err_ma),
        spatial_errors=list(zip(hs, sp_err_mi, sp_err_ma)),
        temporal_errors=list(zip(dts, tm_err_mi, tm_err_ma)),
    )
