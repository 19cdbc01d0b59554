from pathlib import Path

import numpy as np
import pytest

from pphomog.coefficients import (CoefficientSet, Const, SinX, TensorCoefficient,
                                  TrigY)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def make_set(d=1, N=1, **overrides) -> CoefficientSet:
    """Coefficient set with benign defaults; override tensors by keyword."""
    mk = TensorCoefficient.filled
    fields = dict(
        m=mk((N,), Const(1.0)),
        e=mk((d,), Const(1.0)),
        D=mk((d, N, N), Const(0.0)),
        H=mk((N,), Const(0.0)),
        K=mk((N, N), Const(0.0)),
        J=mk((d, N, N), Const(0.0)),
        L=mk((N, N), Const(0.0)),
        G=TensorCoefficient.from_values(np.eye(N)),
        U_star=mk((N,), Const(0.0)),
    )
    fields.update(overrides)
    return CoefficientSet(d=d, N=N, **fields)


@pytest.fixture
def oscillatory_set() -> CoefficientSet:
    """1D set matching configs/converge_sweep.toml."""
    return make_set(
        e=TensorCoefficient.filled((1,), TrigY(2.0, 1.0, (1,))),
        D=TensorCoefficient.filled((1, 1, 1), TrigY(0.2, 0.1, (1,))),
        K=TensorCoefficient.filled((1, 1), Const(0.5)),
        J=TensorCoefficient.filled((1, 1, 1), TrigY(0.3, 0.2, (1,))),
        L=TensorCoefficient.filled((1, 1), Const(1.0)),
        H=TensorCoefficient.filled((1,), Const(1.0)),
        U_star=TensorCoefficient.filled((1,), SinX(1.0, (1,))),
    )


@pytest.fixture
def constant_set() -> CoefficientSet:
    """1D set with no fast dependence anywhere (matches constant_sanity.toml)."""
    return make_set(
        D=TensorCoefficient.filled((1, 1, 1), Const(0.2)),
        K=TensorCoefficient.filled((1, 1), Const(0.3)),
        J=TensorCoefficient.filled((1, 1, 1), Const(0.1)),
        L=TensorCoefficient.filled((1, 1), Const(1.0)),
        H=TensorCoefficient.filled((1,), Const(1.0)),
        U_star=TensorCoefficient.filled((1,), SinX(1.0, (1,))),
    )
