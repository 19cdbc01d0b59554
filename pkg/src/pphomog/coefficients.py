"""Problem coefficients: samplers, eps-traces, Y-averages and admissibility checks.

The solver suite works with a fixed set of named coefficient tensors:

====  =========  ===========================================================
name  shape      meaning
====  =========  ===========================================================
M     (N,)       diagonal entries m_alpha of the zeroth-order matrix
E     (d,)       diagonal entries e_i of the diffusion matrix
D     (d,N,N)    drift tensor coupling components inside the flux
H     (N,)       source vector
K     (N,N)      zeroth-order coupling on the right-hand side
J     (d,N,N)    gradient coupling on the right-hand side
L     (N,N)      relaxation matrix of the temporal ODE (no fast variable)
G     (N,N)      invertible coupling matrix of the temporal ODE (no fast
                 variable)
U*    (N,)       initial datum, function of the slow variable only
====  =========  ===========================================================

Every entry is a scalar field of (t, x, y) where x lives in the unit box
Omega = (0,1)^d and y in the periodicity cell Y = (0,1)^d.  Oscillatory
problems evaluate fields along the trace y = frac(x/eps).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DomainError

__all__ = [
    "ScalarField",
    "Const",
    "TrigY",
    "SinX",
    "BumpX",
    "TXModulation",
    "Separable",
    "FuncField",
    "TensorCoefficient",
    "CoefficientSet",
    "SamplingGrid",
    "AssumptionReport",
    "eval_eps_trace",
    "y_average",
    "validate_assumptions",
    "frac",
]

#: coefficient names that carry a fast (y) argument
Y_DEPENDENT_NAMES = ("M", "E", "D", "H", "K", "J")
ALL_NAMES = Y_DEPENDENT_NAMES + ("L", "G", "U_star")


def frac(z):
    """Componentwise fractional part mapping into [0, 1)."""
    return np.mod(z, 1.0)


def _point_shape(x, y):
    shapes = []
    if x is not None:
        shapes.append(np.asarray(x).shape[:-1])
    if y is not None:
        shapes.append(np.asarray(y).shape[:-1])
    if not shapes:
        return ()
    return np.broadcast_shapes(*shapes)


# ---------------------------------------------------------------------------
# scalar field families
# ---------------------------------------------------------------------------


class ScalarField:
    """A pure sampler value = f(t, x, y); subclasses declare dependencies.

    Samplers are stateless and safe to evaluate from concurrent workers.
    """

    depends_t = False
    depends_x = False
    depends_y = False

    def __call__(self, t, x=None, y=None):
        raw = self._eval(float(t), x, y)
        shape = _point_shape(x, y)
        return np.broadcast_to(np.asarray(raw, dtype=float), shape).copy() if shape else float(raw)

    def _eval(self, t, x, y):
        raise NotImplementedError


@dataclass(frozen=True)
class Const(ScalarField):
    value: float

    def _eval(self, t, x, y):
        return self.value


@dataclass(frozen=True)
class TrigY(ScalarField):
    """mean + amp * sin(2 pi k.y + phase), 1-periodic in every y component."""

    mean: float
    amp: float
    k: tuple = (1,)
    phase: float = 0.0
    depends_y = True

    def _eval(self, t, x, y):
        if y is None:
            raise ConfigurationError("TrigY field sampled without a y argument")
        kv = np.asarray(self.k, dtype=float)
        return self.mean + self.amp * np.sin(2.0 * np.pi * np.tensordot(np.asarray(y), kv, axes=([-1], [0])) + self.phase)


@dataclass(frozen=True)
class SinX(ScalarField):
    """offset + amp * prod_i sin(pi k_i x_i); vanishes on the box boundary when offset = 0."""

    amp: float
    k: tuple = (1,)
    offset: float = 0.0
    depends_x = True

    def _eval(self, t, x, y):
        if x is None:
            raise ConfigurationError("SinX field sampled without an x argument")
        x = np.asarray(x)
        val = np.ones(x.shape[:-1])
        for i, ki in enumerate(self.k):
            val = val * np.sin(np.pi * ki * x[..., i])
        return self.offset + self.amp * val


@dataclass(frozen=True)
class BumpX(ScalarField):
    """amp * prod_i x_i (1 - x_i); a polynomial bump vanishing on the boundary."""

    amp: float
    depends_x = True

    def _eval(self, t, x, y):
        if x is None:
            raise ConfigurationError("BumpX field sampled without an x argument")
        x = np.asarray(x)
        val = np.ones(x.shape[:-1])
        for i in range(x.shape[-1]):
            val = val * x[..., i] * (1.0 - x[..., i])
        return self.amp * val


@dataclass(frozen=True)
class TXModulation(ScalarField):
    """Slow-variable factor base + t_coef*t + x_amp * prod_i cos(pi k_i x_i)."""

    base: float
    x_amp: float = 0.0
    k: tuple = (1,)
    t_coef: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "depends_x", self.x_amp != 0.0)
        object.__setattr__(self, "depends_t", self.t_coef != 0.0)

    def _eval(self, t, x, y):
        val = self.base + self.t_coef * t
        if self.x_amp != 0.0:
            if x is None:
                raise ConfigurationError("TXModulation with x_amp sampled without x")
            x = np.asarray(x)
            mod = np.ones(x.shape[:-1])
            for i, ki in enumerate(self.k):
                mod = mod * np.cos(np.pi * ki * x[..., i])
            val = val + self.x_amp * mod
        return val


@dataclass(frozen=True)
class Separable(ScalarField):
    """Product f(t,x) * g(y) of a slow factor and a periodic profile."""

    tx: ScalarField
    y: ScalarField
    depends_y = True

    def __post_init__(self):
        object.__setattr__(self, "depends_x", self.tx.depends_x)
        object.__setattr__(self, "depends_t", self.tx.depends_t)

    def _eval(self, t, x, y):
        return np.asarray(self.tx(t, x, None)) * np.asarray(self.y(t, None, y))


class FuncField(ScalarField):
    """Extension point wrapping an arbitrary callable f(t, x, y).

    Dependency flags must be declared by the caller; they steer the
    eps-trace plumbing and the cell-problem reuse logic.
    """

    def __init__(self, fn: Callable, depends_t=True, depends_x=True, depends_y=False):
        self.fn = fn
        self.depends_t = depends_t
        self.depends_x = depends_x
        self.depends_y = depends_y

    def _eval(self, t, x, y):
        return self.fn(t, x, y)


# ---------------------------------------------------------------------------
# tensors of scalar fields
# ---------------------------------------------------------------------------


class TensorCoefficient:
    """A fixed-shape tensor whose entries are scalar fields.

    eval() returns an array with the tensor axes first and the point axes
    last, which keeps einsum contractions against gradients short.
    """

    def __init__(self, entries):
        self.entries = np.asarray(entries, dtype=object)
        if self.entries.ndim == 0:
            self.entries = self.entries.reshape(1)

    @property
    def shape(self):
        return self.entries.shape

    @property
    def depends_y(self):
        return any(f.depends_y for f in self.entries.flat)

    @property
    def depends_x(self):
        return any(f.depends_x for f in self.entries.flat)

    @property
    def depends_t(self):
        return any(f.depends_t for f in self.entries.flat)

    def eval_entry(self, index, t, x=None, y=None):
        shape = _point_shape(x, y)
        val = self.entries[index](t, x, y)
        if shape:
            return np.asarray(val)
        return val

    def eval(self, t, x=None, y=None):
        pshape = _point_shape(x, y)
        out = np.empty(self.shape + pshape, dtype=float)
        for idx in np.ndindex(self.shape):
            out[idx] = self.entries[idx](t, x, y)
        return out

    @staticmethod
    def from_values(values):
        """Build a constant tensor from a numeric array."""
        values = np.asarray(values, dtype=float)
        entries = np.empty(values.shape, dtype=object)
        for idx in np.ndindex(values.shape):
            entries[idx] = Const(float(values[idx]))
        return TensorCoefficient(entries)

    @staticmethod
    def filled(shape, field_obj):
        entries = np.empty(shape, dtype=object)
        for idx in np.ndindex(shape):
            entries[idx] = field_obj
        return TensorCoefficient(entries)


_EXPECTED_SHAPE = {
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


@dataclass
class CoefficientSet:
    """All problem tensors plus the (d, N) dimensions.

    m and e store the diagonals of M and E; the full (diagonal) matrices are
    reconstructed on demand by :func:`eval_eps_trace`.
    """

    d: int
    N: int
    m: TensorCoefficient
    e: TensorCoefficient
    D: TensorCoefficient
    H: TensorCoefficient
    K: TensorCoefficient
    J: TensorCoefficient
    L: TensorCoefficient
    G: TensorCoefficient
    U_star: TensorCoefficient

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ConfigurationError(f"spatial dimension d={self.d} unsupported (need 1 or 2)")
        if self.N < 1:
            raise ConfigurationError(f"system size N={self.N} must be >= 1")
        for name in ALL_NAMES:
            tens = self.tensor(name)
            want = _EXPECTED_SHAPE[name](self.d, self.N)
            if tens.shape != want:
                raise ConfigurationError(f"coefficient {name}: shape {tens.shape} != expected {want}")
        for name in ("L", "G", "U_star"):
            if self.tensor(name).depends_y:
                raise ConfigurationError(f"coefficient {name} must not depend on the fast variable y")

    def tensor(self, name: str) -> TensorCoefficient:
        try:
            return {"M": self.m, "E": self.e, "D": self.D, "H": self.H,
                    "K": self.K, "J": self.J, "L": self.L, "G": self.G,
                    "U_star": self.U_star}[name]
        except KeyError:
            raise ConfigurationError(f"unknown coefficient id {name!r}") from None

    @property
    def l_is_constant(self) -> bool:
        """True when L is one fixed N x N matrix (no t or x dependence)."""
        return not (self.L.depends_t or self.L.depends_x)

    def cell_dependency(self) -> str:
        """How the cell problems depend on the slow variables.

        Returns "const" when E and D are (t,x)-independent (one cell solve
        serves all samples), "separable" when every varying entry factors
        through a shared slow modulation, and "general" otherwise.
        """
        slow = self.e.depends_t or self.e.depends_x or self.D.depends_t or self.D.depends_x
        if not slow:
            return "const"
        if self.separable_factors() is not None:
            return "separable"
        return "general"

    def separable_factors(self):
        """Shared slow factors (f_E, f_D) when E and D are separable, else None.

        Every slow-varying entry must be Separable with one common slow
        factor per tensor; mixing a scaled entry with an unscaled non-zero
        one breaks the single-profile reuse, so such sets report None.  Zero
        drift entries are compatible with any factor.
        """
        f_e = _common_slow_factor(self.e, allow_zero=False)
        f_d = _common_slow_factor(self.D, allow_zero=True)
        if f_e is None or f_d is None:
            return None
        return f_e, f_d


def _common_slow_factor(tensor: TensorCoefficient, allow_zero: bool):
    """The slow factor shared by all Separable entries of a tensor.

    Returns Const(1.0) when nothing varies slowly, None when the tensor
    cannot be written as one slow factor times a fast profile.
    """
    factor = None
    has_plain = False
    for fld in tensor.entries.flat:
        if isinstance(fld, Separable):
            if factor is None:
                factor = fld.tx
            elif fld.tx != factor:
                return None
        elif allow_zero and isinstance(fld, Const) and fld.value == 0.0:
            continue
        elif not (fld.depends_t or fld.depends_x):
            has_plain = True
        else:
            return None
    if factor is not None and has_plain:
        return None
    return factor if factor is not None else Const(1.0)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _embed_diagonal(name, values):
    # M and E are stored as diagonals; callers asking for the matrix get it.
    if name in ("M", "E"):
        n = values.shape[0]
        out = np.zeros((n, n) + values.shape[1:], dtype=float)
        for i in range(n):
            out[i, i] = values[i]
        return out
    return values


def eval_eps_trace(cs: CoefficientSet, name: str, t: float, x, eps: float):
    """Evaluate c(t, x, frac(x/eps)) for a y-dependent coefficient.

    x may be a single point of shape (d,) or an array of points (..., d).
    M and E are returned as full diagonal matrices.
    """
    if eps <= 0.0:
        raise DomainError(f"eps must be positive, got {eps}")
    tens = cs.tensor(name)
    if name not in Y_DEPENDENT_NAMES:
        raise ConfigurationError(f"coefficient {name} has no fast argument; eps-trace undefined")
    x = np.asarray(x, dtype=float)
    y = frac(x / eps)
    return _embed_diagonal(name, tens.eval(t, x, y))


def y_average(cs: CoefficientSet, name: str, t: float, x, quad_n: int):
    """Cell average (1/|Y|) int_Y c(t, x, y) dy by the rectangle rule.

    Uses quad_n points per axis at y_k = k/quad_n; for smooth periodic
    profiles the rule converges faster than any fixed order.  Coefficients
    without y dependence are returned unchanged.
    """
    if quad_n < 2:
        raise DomainError(f"quad_n must be >= 2, got {quad_n}")
    tens = cs.tensor(name)
    x = np.asarray(x, dtype=float)
    if not tens.depends_y:
        vals = tens.eval(t, x, None if name == "U_star" else None)
        return _embed_diagonal(name, vals)
    d = cs.d
    axes = [np.arange(quad_n) / quad_n for _ in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    ypts = np.stack([m.ravel() for m in mesh], axis=-1)          # (quad_n^d, d)
    xb = x[..., None, :]                                          # (..., 1, d)
    vals = tens.eval(t, xb, ypts)                                 # shape + (..., quad_n^d)
    return _embed_diagonal(name, vals.mean(axis=-1))


@dataclass(frozen=True)
class SamplingGrid:
    """Where sup/inf estimates of the coefficients are taken."""

    t_max: float = 1.0
    nt: int = 5
    nx: int = 9
    ny: int = 16

    def __post_init__(self):
        if self.nt < 1 or self.nx < 1 or self.ny < 1:
            raise DomainError("sampling grid must be nonempty in t, x and y")

    def t_points(self):
        return np.linspace(0.0, self.t_max, self.nt)

    def x_points(self, d):
        axes = [np.linspace(0.0, 1.0, self.nx) for _ in range(d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def y_points(self, d):
        axes = [np.arange(self.ny) / self.ny for _ in range(d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class AssumptionReport:
    """Pointwise admissibility of a coefficient set on a sampling grid."""

    a2_ok: bool
    a3_margin: float
    g_min_det: float
    samples_used: int
    grid: SamplingGrid
    m_min: np.ndarray = field(default=None, repr=False)
    e_min: np.ndarray = field(default=None, repr=False)
    d_sup: np.ndarray = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return bool(self.a2_ok and self.a3_margin > 0.0 and self.g_min_det > 1e-12)


def sample_extrema(cs: CoefficientSet, grid: SamplingGrid):
    """Per-entry inf/sup estimates over the sampling grid.

    Returns a dict with m_min (N,), m_max, e_min (d,), e_max, d_sup (d,N,N),
    k_sup (N,N), j_sup (d,N,N), h_sup (N,), g_min_det, n_samples.  All
    reductions run in fixed order, so the result is schedule independent.
    """
    tpts = grid.t_points()
    xpts = grid.x_points(cs.d)
    ypts = grid.y_points(cs.d)
    xb = xpts[:, None, :]
    nsamp = len(tpts) * len(xpts) * len(ypts)

    def fold(name, reduce_abs=False):
        tens = cs.tensor(name)
        lo = np.full(tens.shape, np.inf)
        hi = np.full(tens.shape, -np.inf)
        for t in tpts:
            vals = tens.eval(t, xb, ypts)
            if reduce_abs:
                vals = np.abs(vals)
            lo = np.minimum(lo, vals.min(axis=(-2, -1)))
            hi = np.maximum(hi, vals.max(axis=(-2, -1)))
        return lo, hi

    m_min, m_max = fold("M")
    e_min, e_max = fold("E")
    _, d_sup = fold("D", reduce_abs=True)
    _, k_sup = fold("K", reduce_abs=True)
    _, j_sup = fold("J", reduce_abs=True)
    _, h_sup = fold("H", reduce_abs=True)

    g_min_det = np.inf
    for t in tpts:
        gmat = cs.G.eval(t, xpts, None)               # (N, N, npts)
        dets = np.abs(np.linalg.det(np.moveaxis(gmat, -1, 0)))
        g_min_det = min(g_min_det, float(dets.min()))

    return {
        "m_min": m_min, "m_max": m_max, "e_min": e_min, "e_max": e_max,
        "d_sup": d_sup, "k_sup": k_sup, "j_sup": j_sup, "h_sup": h_sup,
        "g_min_det": g_min_det, "n_samples": nsamp,
    }


def validate_assumptions(cs: CoefficientSet, grid: Optional[SamplingGrid] = None) -> AssumptionReport:
    """Check positivity of m, e, the drift-size bound and invertibility of G.

    The drift margin is 4 / (d N^2 sup(1/m) sup(1/e)) minus the largest
    sampled sup |D|^2; it is positive exactly when the sampled coefficients
    satisfy the admissibility inequality.  Enlarging the sampling grid can
    only shrink the margin (sup estimates grow).
    """
    grid = grid or SamplingGrid()
    ext = sample_extrema(cs, grid)
    m_min, e_min = ext["m_min"], ext["e_min"]
    a2_ok = bool(m_min.min() > 0.0 and e_min.min() > 0.0)
    if a2_ok:
        sup_inv_m = 1.0 / m_min.min()
        sup_inv_e = 1.0 / e_min.min()
        bound = 4.0 / (cs.d * cs.N**2 * sup_inv_m * sup_inv_e)
        a3_margin = float(bound - (ext["d_sup"] ** 2).max())
    else:
        a3_margin = float("-inf")
    return AssumptionReport(
        a2_ok=a2_ok,
        a3_margin=a3_margin,
        g_min_det=ext["g_min_det"],
        samples_used=ext["n_samples"],
        grid=grid,
        m_min=m_min,
        e_min=e_min,
        d_sup=ext["d_sup"],
    )
