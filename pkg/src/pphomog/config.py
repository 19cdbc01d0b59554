"""Run configuration: TOML schema, validation and coefficient-set building.

One file per run; sectioned key-value syntax, no code execution.  Every
violation is collected before reporting so a single pass fixes them all.
See README.md for the full schema reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import List, Optional

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .coefficients import (BumpX, CoefficientSet, Const, SamplingGrid, Separable,
                           SinX, TensorCoefficient, TrigY, TXModulation)
from .errors import ConfigFileError, ConfigSemanticsError, ConfigSyntaxError

__all__ = ["RunConfig", "parse_config", "build_coefficient_set"]

_TENSOR_SHAPES = {
    "M": lambda d, N: (N,),
    "E": lambda d, N: (d,),
    "D": lambda d, N: (d, N, N),
    "H": lambda d, N: (N,),
    "K": lambda d, N: (N, N),
    "J": lambda d, N: (d, N, N),
    "L": lambda d, N: (N, N),
    "G": lambda d, N: (N, N),
    "U_star": lambda d, N: (N,),
}

_FAMILIES_BY_TENSOR = {
    "M": ("constant", "trig", "separable"),
    "E": ("constant", "trig", "separable"),
    "D": ("constant", "trig", "separable"),
    "H": ("constant", "trig", "separable", "sin_x"),
    "K": ("constant", "trig", "separable"),
    "J": ("constant", "trig", "separable"),
    "L": ("constant", "txmod"),
    "G": ("constant", "txmod"),
    "U_star": ("constant", "sin_x", "bump_x"),
}

_DEFAULT_COEFFS = {
    "M": {"family": "constant", "value": 1.0},
    "E": {"family": "constant", "value": 1.0},
    "D": {"family": "constant", "value": 0.0},
    "H": {"family": "constant", "value": 0.0},
    "K": {"family": "constant", "value": 0.0},
    "J": {"family": "constant", "value": 0.0},
    "L": {"family": "constant", "value": 0.0},
    "G": {"family": "identity"},
    "U_star": {"family": "constant", "value": 0.0},
}

_KNOWN_SECTIONS = ("problem", "grids", "converge", "output", "tolerances",
                   "sampling", "coefficients", "cell")


@dataclass
class RunConfig:
    """Fully validated run description."""

    d: int = 1
    N: int = 1
    T: float = 0.5
    dt: float = 0.01
    scheme: str = "implicit-euler"
    corrector_mode: str = "stepped"
    eps: List[float] = dc_field(default_factory=lambda: [0.25])
    macro_n: int = 33
    cell_n: int = 64
    nodes_per_period: int = 16
    micro_intervals: Optional[List[int]] = None
    out_dir: str = "out"
    picard_tol: float = 1e-10
    picard_max: int = 50
    linear_method: str = "direct"
    linear_tol: float = 1e-12
    sampling: SamplingGrid = dc_field(default_factory=SamplingGrid)
    cell_times: List[float] = dc_field(default_factory=lambda: [0.0])
    coefficients: dict = dc_field(default_factory=dict)

    def build_set(self) -> CoefficientSet:
        return build_coefficient_set(self.coefficients, self.d, self.N)

    def run_kwargs(self) -> dict:
        return dict(picard_tol=self.picard_tol, picard_max=self.picard_max,
                    linear_method=self.linear_method, linear_tol=self.linear_tol)


def _broadcast_values(value, shape, errs, where):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        errs.append(f"{where}: value {value!r} is not numeric")
        return np.zeros(shape)
    if arr.shape == ():
        return np.full(shape, float(arr))
    if arr.shape == shape:
        return arr
    errs.append(f"{where}: value shape {arr.shape} incompatible with tensor shape {shape}")
    return np.zeros(shape)


def _int_vector(spec, d, errs, where, default=None):
    raw = spec if spec is not None else (default if default is not None else [1] * d)
    try:
        vec = tuple(int(v) for v in raw)
    except (TypeError, ValueError):
        errs.append(f"{where}: wave vector {raw!r} must be a list of integers")
        return tuple([1] * d)
    if len(vec) != d:
        errs.append(f"{where}: wave vector length {len(vec)} != spatial dimension {d}")
        return tuple((list(vec) + [1] * d)[:d])
    return vec


def _tx_factor(spec, d, errs, where):
    base = float(spec.get("base", 1.0))
    return TXModulation(base=base,
                        x_amp=float(spec.get("x_amp", 0.0)),
                        k=_int_vector(spec.get("x_k"), d, errs, where),
                        t_coef=float(spec.get("t_coef", 0.0)))


def _build_tensor(name, spec, d, N, errs):
    shape = _TENSOR_SHAPES[name](d, N)
    where = f"coefficients.{name}"
    family = spec.get("family")
    if family == "identity" and name == "G":
        return TensorCoefficient.from_values(np.eye(N))
    if family is None:
        errs.append(f"{where}: missing 'family'")
        return TensorCoefficient.from_values(np.zeros(shape))
    if family not in _FAMILIES_BY_TENSOR[name] and not (family == "identity" and name == "G"):
        errs.append(f"{where}: family {family!r} not available for {name} "
                    f"(allowed: {', '.join(_FAMILIES_BY_TENSOR[name])})")
        return TensorCoefficient.from_values(np.zeros(shape))

    if family == "constant":
        vals = _broadcast_values(spec.get("value", 0.0), shape, errs, where)
        return TensorCoefficient.from_values(vals)

    if family == "trig":
        mean = _broadcast_values(spec.get("mean", 0.0), shape, errs, where)
        amp = _broadcast_values(spec.get("amp", 0.0), shape, errs, where)
        k = _int_vector(spec.get("k"), d, errs, where)
        phase = float(spec.get("phase", 0.0))
        entries = np.empty(shape, dtype=object)
        for idx in np.ndindex(shape):
            entries[idx] = TrigY(mean=float(mean[idx]), amp=float(amp[idx]), k=k, phase=phase)
        return TensorCoefficient(entries)

    if family == "separable":
        tx_spec = spec.get("tx")
        y_spec = spec.get("y")
        if not isinstance(tx_spec, dict) or not isinstance(y_spec, dict):
            errs.append(f"{where}: separable family needs 'tx' and 'y' tables")
            return TensorCoefficient.from_values(np.zeros(shape))
        tx = _tx_factor(tx_spec, d, errs, where + ".tx")
        mean = _broadcast_values(y_spec.get("mean", 0.0), shape, errs, where + ".y")
        amp = _broadcast_values(y_spec.get("amp", 0.0), shape, errs, where + ".y")
        k = _int_vector(y_spec.get("k"), d, errs, where + ".y")
        phase = float(y_spec.get("phase", 0.0))
        entries = np.empty(shape, dtype=object)
        for idx in np.ndindex(shape):
            entries[idx] = Separable(tx=tx, y=TrigY(mean=float(mean[idx]),
                                                    amp=float(amp[idx]), k=k, phase=phase))
        return TensorCoefficient(entries)

    if family == "txmod":
        entries = np.empty(shape, dtype=object)
        base = _broadcast_values(spec.get("base", 0.0), shape, errs, where)
        for idx in np.ndindex(shape):
            entries[idx] = TXModulation(base=float(base[idx]),
                                        x_amp=float(spec.get("x_amp", 0.0)),
                                        k=_int_vector(spec.get("x_k"), d, errs, where),
                                        t_coef=float(spec.get("t_coef", 0.0)))
        return TensorCoefficient(entries)

    if family == "sin_x":
        amp = _broadcast_values(spec.get("amp", 1.0), shape, errs, where)
        k = _int_vector(spec.get("k"), d, errs, where)
        offset = float(spec.get("offset", 0.0))
        entries = np.empty(shape, dtype=object)
        for idx in np.ndindex(shape):
            entries[idx] = SinX(amp=float(amp[idx]), k=k, offset=offset)
        return TensorCoefficient(entries)

    if family == "bump_x":
        amp = _broadcast_values(spec.get("amp", 1.0), shape, errs, where)
        entries = np.empty(shape, dtype=object)
        for idx in np.ndindex(shape):
            entries[idx] = BumpX(amp=float(amp[idx]))
        return TensorCoefficient(entries)

    errs.append(f"{where}: unhandled family {family!r}")
    return TensorCoefficient.from_values(np.zeros(shape))


def build_coefficient_set(coeff_specs: dict, d: int, N: int) -> CoefficientSet:
    """Construct the CoefficientSet from per-tensor family declarations."""
    errs: List[str] = []
    tensors = {}
    for name in _TENSOR_SHAPES:
        spec = coeff_specs.get(name, _DEFAULT_COEFFS[name])
        tensors[name] = _build_tensor(name, spec, d, N, errs)
    if errs:
        raise ConfigSemanticsError(errs)
    return CoefficientSet(d=d, N=N, m=tensors["M"], e=tensors["E"], D=tensors["D"],
                          H=tensors["H"], K=tensors["K"], J=tensors["J"],
                          L=tensors["L"], G=tensors["G"], U_star=tensors["U_star"])


def _check_eps(eps_list, errs):
    out = []
    for eps in eps_list:
        try:
            eps = float(eps)
        except (TypeError, ValueError):
            errs.append(f"problem.eps: entry {eps!r} is not numeric")
            continue
        k = round(1.0 / eps) if eps > 0 else 0
        if eps <= 0 or k < 2 or abs(k * eps - 1.0) > 1e-9:
            errs.append(f"problem.eps: entry {eps} must be 1/k for an integer k >= 2")
        out.append(eps)
    return out


def parse_config(path) -> RunConfig:
    """Parse and validate a run configuration file.

    Raises ConfigFileError (missing file), ConfigSyntaxError (malformed
    TOML) or ConfigSemanticsError carrying every violation found.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(f"configuration file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigSyntaxError(f"{path}: {exc}") from exc

    errs: List[str] = []
    for key in raw:
        if key not in _KNOWN_SECTIONS:
            errs.append(f"unknown section [{key}]")

    prob = raw.get("problem", {})
    cfg = RunConfig()
    cfg.d = int(prob.get("d", cfg.d))
    cfg.N = int(prob.get("N", cfg.N))
    cfg.T = float(prob.get("T", cfg.T))
    cfg.dt = float(prob.get("dt", cfg.dt))
    cfg.scheme = str(prob.get("scheme", cfg.scheme))
    cfg.corrector_mode = str(prob.get("corrector_mode", cfg.corrector_mode))
    cfg.eps = _check_eps(prob.get("eps", cfg.eps), errs)

    grids = raw.get("grids", {})
    cfg.macro_n = int(grids.get("macro_n", cfg.macro_n))
    cfg.cell_n = int(grids.get("cell_n", cfg.cell_n))

    conv = raw.get("converge", {})
    cfg.nodes_per_period = int(conv.get("nodes_per_period", cfg.nodes_per_period))
    if "micro_intervals" in conv:
        cfg.micro_intervals = [int(v) for v in conv["micro_intervals"]]

    out = raw.get("output", {})
    cfg.out_dir = str(out.get("directory", cfg.out_dir))

    tol = raw.get("tolerances", {})
    cfg.picard_tol = float(tol.get("picard_tol", cfg.picard_tol))
    cfg.picard_max = int(tol.get("picard_max", cfg.picard_max))
    cfg.linear_method = str(tol.get("linear_method", cfg.linear_method))
    cfg.linear_tol = float(tol.get("linear_tol", cfg.linear_tol))

    samp = raw.get("sampling", {})
    try:
        cfg.sampling = SamplingGrid(t_max=float(samp.get("t_max", cfg.T)),
                                    nt=int(samp.get("nt", 5)),
                                    nx=int(samp.get("nx", 9)),
                                    ny=int(samp.get("ny", 16)))
    except Exception as exc:
        errs.append(f"sampling: {exc}")

    cellsec = raw.get("cell", {})
    cfg.cell_times = [float(t) for t in cellsec.get("times", cfg.cell_times)]

    if cfg.d not in (1, 2):
        errs.append(f"problem.d: {cfg.d} unsupported (need 1 or 2)")
    if not 1 <= cfg.N <= 8:
        errs.append(f"problem.N: {cfg.N} out of range [1, 8]")
    if cfg.T <= 0:
        errs.append(f"problem.T: {cfg.T} must be positive")
    if cfg.dt <= 0:
        errs.append(f"problem.dt: {cfg.dt} must be positive")
    elif cfg.T > 0 and abs(round(cfg.T / cfg.dt) * cfg.dt - cfg.T) > 1e-9 * max(1.0, cfg.T):
        errs.append(f"problem.dt: T={cfg.T} is not an integer multiple of dt={cfg.dt}")
    if cfg.scheme not in ("implicit-euler", "crank-nicolson"):
        errs.append(f"problem.scheme: {cfg.scheme!r} unknown")
    if cfg.corrector_mode not in ("stepped", "nonlocal"):
        errs.append(f"problem.corrector_mode: {cfg.corrector_mode!r} unknown")
    if not cfg.eps:
        errs.append("problem.eps: at least one value required")
    if cfg.macro_n < 3:
        errs.append(f"grids.macro_n: {cfg.macro_n} must be >= 3")
    if cfg.cell_n < 4:
        errs.append(f"grids.cell_n: {cfg.cell_n} must be >= 4")
    if cfg.nodes_per_period < 8:
        errs.append(f"converge.nodes_per_period: {cfg.nodes_per_period} must be >= 8")
    if cfg.micro_intervals is not None and len(cfg.micro_intervals) != len(cfg.eps):
        errs.append("converge.micro_intervals: length must match problem.eps")
    if cfg.picard_tol <= 0 or cfg.linear_tol <= 0:
        errs.append("tolerances: picard_tol and linear_tol must be positive")
    if cfg.picard_max < 1:
        errs.append(f"tolerances.picard_max: {cfg.picard_max} must be >= 1")
    if cfg.linear_method not in ("direct", "cg", "bicgstab"):
        errs.append(f"tolerances.linear_method: {cfg.linear_method!r} unknown")

    cfg.coefficients = raw.get("coefficients", {})
    for name in cfg.coefficients:
        if name not in _TENSOR_SHAPES:
            errs.append(f"coefficients.{name}: unknown coefficient id")
    if not errs:
        try:
            cfg.build_set()
        except ConfigSemanticsError as exc:
            errs.extend(exc.violations)
    if errs:
        raise ConfigSemanticsError(errs)
    return cfg
