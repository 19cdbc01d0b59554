"""Command-line harness: check / cell / micro / macro / converge / residual.

Exit codes: 0 success, 1 certificate failure, 2 solver failure,
3 missing configuration file, 4 configuration syntax error,
5 configuration semantics violation (including refused under-resolved
sweeps).  PPHOMOG_THREADS caps the BLAS thread pools (set before heavy
imports); all computation is otherwise deterministic.
"""

import os

_threads = os.environ.get("PPHOMOG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import sys
from pathlib import Path

import click
import numpy as np

from .cell import cell_sweep
from .config import parse_config
from .csvio import Table, write_csv
from .discretization import CellGrid, MacroGrid
from .errors import (AssemblyError, ConfigFileError, ConfigSemanticsError,
                     ConfigSyntaxError, ConfigurationError, PicardError,
                     SolverError, StepError)
from .macro import memory_diagnostics, run_macro
from .micro import q_residual, run_micro
from .verification import energy_certificate, micro_macro_convergence

EXIT_OK = 0
EXIT_CERTIFICATE = 1
EXIT_SOLVER = 2
EXIT_MISSING = 3
EXIT_SYNTAX = 4
EXIT_SEMANTICS = 5


def _echo(quiet, msg):
    if not quiet:
        click.echo(msg)


def _load(config_path, out_override):
    cfg = parse_config(config_path)
    if out_override:
        cfg.out_dir = str(out_override)
    return cfg


def _guarded(fn):
    """Map library errors onto the documented exit codes."""
    import functools

    @functools.wraps(fn)
    def wrapper(config, out, quiet):
        try:
            code = fn(config, out, quiet)
        except ConfigFileError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_MISSING)
        except ConfigSyntaxError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_SYNTAX)
        except (ConfigSemanticsError, ConfigurationError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_SEMANTICS)
        except (SolverError, StepError, PicardError, AssemblyError) as exc:
            click.echo(f"solver error: {exc}", err=True)
            sys.exit(EXIT_SOLVER)
        sys.exit(code)

    return wrapper


def _common_options(fn):
    fn = click.option("--config", "config", required=True,
                      type=click.Path(), help="run configuration file")(fn)
    fn = click.option("--out", "out", default=None,
                      type=click.Path(), help="output directory override")(fn)
    fn = click.option("--quiet", is_flag=True, default=False)(fn)
    return fn


@click.group(help=__doc__)
def cli():
    pass


def _node_columns(d):
    return [f"x_{i + 1}" for i in range(d)]


def _trajectory_table(traj, grid, d, n_comp, u_attr="U", v_attr="V"):
    cols = ["t"] + _node_columns(d) \
        + [f"U_{a + 1}" for a in range(n_comp)] + [f"V_{a + 1}" for a in range(n_comp)]
    table = Table(cols)
    nodes = grid.nodes().reshape(-1, d)
    for state in traj.states:
        u = getattr(state, u_attr).reshape(n_comp, -1)
        v = getattr(state, v_attr).reshape(n_comp, -1)
        for idx in range(nodes.shape[0]):
            table.append(float(state.t), *[float(c) for c in nodes[idx]],
                         *[float(u[a, idx]) for a in range(n_comp)],
                         *[float(v[a, idx]) for a in range(n_comp)])
    return table


@cli.command("check")
@_common_options
@_guarded
def cmd_check(config, out, quiet):
    """Validate the coefficient assumptions; never runs a solver."""
    from .coefficients import validate_assumptions

    cfg = _load(config, out)
    cs = cfg.build_set()
    report = validate_assumptions(cs, cfg.sampling)
    table = Table(["a2_ok", "a3_margin", "g_min_det", "samples_used"])
    table.append(bool(report.a2_ok), float(report.a3_margin),
                 float(report.g_min_det), int(report.samples_used))
    write_csv(table, Path(cfg.out_dir) / "assumption_report.csv")
    _echo(quiet, f"a2_ok={report.a2_ok} a3_margin={report.a3_margin:.6g} "
                 f"g_min_det={report.g_min_det:.6g} samples={report.samples_used}")
    if not report.ok:
        _echo(quiet, "assumption check FAILED")
        return EXIT_CERTIFICATE
    _echo(quiet, "assumption check passed")
    return EXIT_OK


@cli.command("cell")
@_common_options
@_guarded
def cmd_cell(config, out, quiet):
    """Solve the cell problems and export the effective tensors."""
    cfg = _load(config, out)
    cs = cfg.build_set()
    macro = MacroGrid(cfg.d, cfg.macro_n)
    cellg = CellGrid(cfg.d, cfg.cell_n)
    slow_time = cs.e.depends_t or cs.D.depends_t or cs.G.depends_t
    times = cfg.cell_times if slow_time else [cfg.cell_times[0]]
    sols = cell_sweep(cs, macro, times, cellg)
    cols = ["t"] + _node_columns(cfg.d)
    cols += [f"Estar_{i + 1}{j + 1}" for i in range(cfg.d) for j in range(cfg.d)]
    cols += [f"Dstar_{i + 1}_{a + 1}{b + 1}"
             for i in range(cfg.d) for a in range(cfg.N) for b in range(cfg.N)]
    table = Table(cols)
    for sol in sols:
        table.append(float(sol.t), *[float(c) for c in np.atleast_1d(sol.x)],
                     *[float(v) for v in sol.E_star.ravel()],
                     *[float(v) for v in sol.D_star.ravel()])
    write_csv(table, Path(cfg.out_dir) / "effective_tensors.csv")
    _echo(quiet, f"wrote {len(sols)} cell samples to {cfg.out_dir}/effective_tensors.csv")
    return EXIT_OK


def _eps_tag(eps):
    return f"1_{round(1.0 / eps)}"


@cli.command("micro")
@_common_options
@_guarded
def cmd_micro(config, out, quiet):
    """Run the fine-scale solver per eps; export trajectories and energy reports."""
    cfg = _load(config, out)
    cs = cfg.build_set()
    grid = MacroGrid(cfg.d, cfg.macro_n)
    all_pass = True
    for eps in cfg.eps:
        traj = run_micro(cs, eps, grid, cfg.dt, cfg.T, scheme=cfg.scheme, **cfg.run_kwargs())
        write_csv(_trajectory_table(traj, grid, cfg.d, cfg.N),
                  Path(cfg.out_dir) / f"micro_eps{_eps_tag(eps)}.csv")
        report = energy_certificate(cs, traj, sampling=cfg.sampling)
        etab = Table(["t", "lhs", "rhs", "pass"])
        for k, t in enumerate(report.times):
            etab.append(float(t), float(report.lhs[k]), float(report.rhs[k]),
                        bool(report.passes[k]))
        write_csv(etab, Path(cfg.out_dir) / f"energy_eps{_eps_tag(eps)}.csv")
        status = "PASS" if report.all_pass else "FAIL"
        _echo(quiet, f"eps={eps}: energy certificate {status} "
                     f"(min margin {report.min_margin:.6g})")
        all_pass = all_pass and report.all_pass
    return EXIT_OK if all_pass else EXIT_CERTIFICATE


@cli.command("macro")
@_common_options
@_guarded
def cmd_macro(config, out, quiet):
    """Run the upscaled solver; export the trajectory and memory diagnostics."""
    cfg = _load(config, out)
    cs = cfg.build_set()
    grid = MacroGrid(cfg.d, cfg.macro_n)
    cellg = CellGrid(cfg.d, cfg.cell_n)
    traj = run_macro(cs, None, grid, cellg, cfg.dt, cfg.T, mode=cfg.corrector_mode,
                     scheme=cfg.scheme, **cfg.run_kwargs())
    write_csv(_trajectory_table(traj, grid, cfg.d, cfg.N, u_attr="u", v_attr="v"),
              Path(cfg.out_dir) / "macro.csv")
    times, norms = memory_diagnostics(cs, traj)
    mtab = Table(["t"] + [f"memory_l2_{a + 1}" for a in range(cfg.N)])
    for k, t in enumerate(times):
        mtab.append(float(t), *[float(v) for v in norms[k]])
    write_csv(mtab, Path(cfg.out_dir) / "macro_memory.csv")
    _echo(quiet, f"wrote macro trajectory ({len(traj.states)} snapshots, "
                 f"mode={traj.mode}) to {cfg.out_dir}/macro.csv")
    return EXIT_OK


@cli.command("converge")
@_common_options
@_guarded
def cmd_converge(config, out, quiet):
    """Sweep eps and compare fine-scale runs against the upscaled run."""
    cfg = _load(config, out)
    cs = cfg.build_set()
    table = micro_macro_convergence(cs, cfg.eps, cfg.macro_n, cfg.cell_n, cfg.dt, cfg.T,
                                    scheme=cfg.scheme,
                                    nodes_per_period=cfg.nodes_per_period,
                                    micro_intervals=cfg.micro_intervals,
                                    **cfg.run_kwargs())
    ctab = Table(["eps", "micro_n", "dt", "err_U", "err_V", "composite_norm",
                  "rate_U", "rate_V"])
    for row in table.rows:
        ctab.append(float(row.eps), int(row.micro_n), float(row.dt), float(row.err_u),
                    float(row.err_v), float(row.composite_norm),
                    float(table.rate_u), float(table.rate_v))
    write_csv(ctab, Path(cfg.out_dir) / "convergence.csv")
    _echo(quiet, f"empirical rates: U {table.rate_u:.3f}, V {table.rate_v:.3f}")
    return EXIT_OK


@cli.command("residual")
@_common_options
@_guarded
def cmd_residual(config, out, quiet):
    """Residual of the merged single-equation operator along a fine-scale run."""
    cfg = _load(config, out)
    cs = cfg.build_set()
    grid = MacroGrid(cfg.d, cfg.macro_n)
    eps = cfg.eps[0]
    traj = run_micro(cs, eps, grid, cfg.dt, cfg.T, scheme=cfg.scheme, **cfg.run_kwargs())
    report = q_residual(cs, traj)
    rtab = Table(["t"] + [f"residual_{a + 1}" for a in range(cfg.N)] + ["residual_total"])
    for k, t in enumerate(report.times):
        rtab.append(float(t), *[float(v) for v in report.per_component[k]],
                    float(report.total[k]))
    write_csv(rtab, Path(cfg.out_dir) / "residual.csv")
    _echo(quiet, f"max residual {report.total.max():.6g} over {len(report.times)} times")
    return EXIT_OK


def main():
    cli(prog_name="pphomog")


if __name__ == "__main__":
    main()
