import numpy as np
import pytest
from scipy.integrate import quad

from pphomog.cell import (CellTable, cell_face_samples, cell_sweep,
                          corrector_tensors, effective_tensors, solve_cell_W,
                          solve_cell_at, solve_cell_delta)
from pphomog.coefficients import (Const, FuncField, Separable, TensorCoefficient,
                                  TrigY, TXModulation)
from pphomog.discretization import CellGrid, MacroGrid

from conftest import make_set

X0 = np.array([0.0])


def harmonic_mean(fn):
    val, _ = quad(lambda y: 1.0 / fn(y), 0.0, 1.0, limit=200)
    return 1.0 / val


def arithmetic_mean(fn):
    val, _ = quad(fn, 0.0, 1.0, limit=200)
    return val


class TestCorrectorW:
    def test_constant_diffusion_gives_zero_corrector(self):
        cs = make_set(e=TensorCoefficient.filled((1,), Const(2.5)))
        sol = solve_cell_at(cs, 0.0, X0, CellGrid(1, 32))
        assert np.abs(sol.W).max() < 1e-12
        assert np.allclose(sol.E_star, [[2.5]], atol=1e-12)

    def test_1d_closed_form_and_harmonic_mean(self):
        # independent oracle: E* = 1 / int(1/E) with E = 2 + sin(2 pi y)
        oracle = harmonic_mean(lambda y: 2.0 + np.sin(2 * np.pi * y))
        assert oracle == pytest.approx(np.sqrt(3.0), abs=1e-12)
        cs = make_set(e=TensorCoefficient.filled((1,), TrigY(2.0, 1.0, (1,))))
        cell = CellGrid(1, 256)
        sol = solve_cell_at(cs, 0.0, X0, cell)
        assert sol.E_star[0, 0] == pytest.approx(oracle, abs=1e-10)
        # discrete gradient identity W' = E*/E - 1 at the face midpoints
        e_faces, _ = cell_face_samples(cs, 0.0, X0, cell)
        dw = (np.roll(sol.W[0], -1) - sol.W[0]) / cell.h
        assert np.abs(dw - (sol.E_star[0, 0] / e_faces[0] - 1.0)).max() < 1e-10
        assert abs(sol.W[0].mean()) < 1e-12

    def test_2d_separable_profile_matches_two_1d_solves(self):
        # E_ii = a(y1) b(y2): W_1 is the 1D corrector of a, W_2 of b
        a = TrigY(2.0, 1.0, (1, 0))
        b = TrigY(1.0, 0.5, (0, 1))
        prod = FuncField(lambda t, x, y: (2.0 + np.sin(2 * np.pi * y[..., 0]))
                         * (1.0 + 0.5 * np.sin(2 * np.pi * y[..., 1])),
                         depends_t=False, depends_x=False, depends_y=True)
        cs2 = make_set(d=2, e=TensorCoefficient.filled((2,), prod))
        cell2 = CellGrid(2, 64)
        sol = solve_cell_at(cs2, 0.0, np.zeros(2), cell2)

        cs_a = make_set(e=TensorCoefficient.filled((1,), TrigY(2.0, 1.0, (1,))))
        cs_b = make_set(e=TensorCoefficient.filled((1,), TrigY(1.0, 0.5, (1,))))
        cell1 = CellGrid(1, 64)
        w_a = solve_cell_at(cs_a, 0.0, X0, cell1).W[0]
        w_b = solve_cell_at(cs_b, 0.0, X0, cell1).W[0]
        assert np.abs(sol.W[0] - w_a[:, None]).max() < 1e-9
        assert np.abs(sol.W[1] - w_b[None, :]).max() < 1e-9

        es11 = harmonic_mean(lambda y: 2.0 + np.sin(2 * np.pi * y)) \
            * arithmetic_mean(lambda y: 1.0 + 0.5 * np.sin(2 * np.pi * y))
        es22 = harmonic_mean(lambda y: 1.0 + 0.5 * np.sin(2 * np.pi * y)) \
            * arithmetic_mean(lambda y: 2.0 + np.sin(2 * np.pi * y))
        assert sol.E_star[0, 0] == pytest.approx(es11, abs=1e-6)
        assert sol.E_star[1, 1] == pytest.approx(es22, abs=1e-6)
        assert abs(sol.E_star[0, 1]) < 1e-10 and abs(sol.E_star[1, 0]) < 1e-10


class TestCorrectorDelta:
    def test_slow_drift_gives_zero(self):
        cs = make_set(D=TensorCoefficient.filled((1, 1, 1), Const(0.7)),
                      e=TensorCoefficient.filled((1,), TrigY(2.0, 1.0, (1,))))
        sol = solve_cell_at(cs, 0.0, X0, CellGrid(1, 64))
        assert np.abs(sol.delta).max() < 1e-12
        assert np.allclose(sol.D_star, [[[0.7]]], atol=1e-12)

    def test_sine_drift_quadrature_oracle(self):
        # delta' = -(D - mean D)/E with E = 1: delta = cos(2 pi y)/(2 pi)
        cs = make_set(D=TensorCoefficient.filled((1, 1, 1), TrigY(0.0, 1.0, (1,))))
        cell = CellGrid(1, 64)
        sol = solve_cell_at(cs, 0.0, X0, cell)
        exact = np.cos(2 * np.pi * cell.axis_coords()) / (2 * np.pi)
        assert np.abs(sol.delta[0, 0] - exact).max() < 2e-4
        assert abs(sol.delta[0, 0].mean()) < 1e-14
        assert np.abs(sol.D_star).max() < 1e-12

    def test_flux_first_integral_constant(self):
        # with varying E the discrete flux D + E delta' is face-constant
        cs = make_set(e=TensorCoefficient.filled((1,), TrigY(2.0, 1.0, (1,))),
                      D=TensorCoefficient.filled((1, 1, 1), TrigY(0.3, 0.4, (2,))))
        cell = CellGrid(1, 128)
        e_faces, d_faces = cell_face_samples(cs, 0.0, X0, cell)
        delta = solve_cell_delta(e_faces, d_faces, cell, n_comp=1)
        flux = d_faces[0][0, 0] + e_faces[0] * (np.roll(delta[0, 0], -1) - delta[0, 0]) / cell.h
        assert np.ptp(flux) < 1e-10
        sol = solve_cell_at(cs, 0.0, X0, cell)
        assert sol.D_star[0, 0, 0] == pytest.approx(flux.mean(), abs=1e-12)


class TestEffectiveTensors:
    def test_constant_coefficients_identity(self):
        cs = make_set(e=TensorCoefficient.filled((1,), Const(1.5)),
                      D=TensorCoefficient.filled((1, 1, 1), Const(0.4)))
        sol = solve_cell_at(cs, 0.0, X0, CellGrid(1, 16))
        assert np.allclose(sol.E_star, [[1.5]], atol=1e-13)
        assert np.allclose(sol.D_star, [[[0.4]]], atol=1e-13)

    def test_effective_below_arithmetic_mean(self):
        cs = make_set(e=TensorCoefficient.filled((1,), TrigY(2.0, 1.0, (1,))))
        sol = solve_cell_at(cs, 0.0, X0, CellGrid(1, 128))
        assert sol.E_star[0, 0] < 2.0 - 1e-3

    def test_gauge_invariance(self):
        cs = make_set(e=TensorCoefficient.filled((1,), TrigY(2.0, 1.0, (1,))),
                      D=TensorCoefficient.filled((1, 1, 1), TrigY(0.2, 0.2, (1,))))
        cell = CellGrid(1, 64)
        e_f, d_f = cell_face_samples(cs, 0.0, X0, cell)
        w = solve_cell_W(e_f, cell)
        delta = solve_cell_delta(e_f, d_f, cell, n_comp=1)
        es1, ds1 = effective_tensors(e_f, d_f, w, delta, cell)
        es2, ds2 = effective_tensors(e_f, d_f, w + 3.7, delta - 1.2, cell)
        assert np.allclose(es1, es2, atol=1e-12)
        assert np.allclose(ds1, ds2, atol=1e-12)
        g = np.array([[2.0]])
        dt1, om1 = corrector_tensors(g, w, delta, cell)
        dt2, om2 = corrector_tensors(g, w + 3.7, delta - 1.2, cell)
        assert np.allclose(dt1, dt2, atol=1e-12)
        assert np.allclose(om1, om2, atol=1e-12)

    def test_positive_definite_in_2d(self):
        prod = FuncField(lambda t, x, y: 2.0 + np.sin(2 * np.pi * y[..., 0])
                         * np.cos(2 * np.pi * y[..., 1]),
                         depends_t=False, depends_x=False, depends_y=True)
        cs = make_set(d=2, e=TensorCoefficient.filled((2,), prod))
        sol = solve_cell_at(cs, 0.0, np.zeros(2), CellGrid(2, 32))
        eig = np.linalg.eigvalsh(0.5 * (sol.E_star + sol.E_star.T))
        assert eig.min() > 0.0

    def test_divergence_free_corrector_flux(self):
        cs = make_set(e=TensorCoefficient.filled((1,), TrigY(2.0, 1.0, (1,))))
        cell = CellGrid(1, 64)
        e_f, _ = cell_face_samples(cs, 0.0, X0, cell)
        w = solve_cell_W(e_f, cell)
        flux = e_f[0] * ((np.roll(w[0], -1) - w[0]) / cell.h + 1.0)
        div = (flux - np.roll(flux, 1)) / cell.h
        assert np.abs(div).max() < 1e-9


class TestCorrectorTensors:
    def test_zero_fields_give_zero_tensors(self):
        cell = CellGrid(1, 16)
        dt_t, om_t = corrector_tensors(np.array([[3.0]]), np.zeros((1, 16)),
                                       np.zeros((1, 1, 16)), cell)
        assert np.abs(dt_t).max() == 0.0 and np.abs(om_t).max() == 0.0

    def test_identity_g_reduces_to_gradients(self):
        from pphomog.discretization import fd_gradient
        cell = CellGrid(1, 32)
        w = np.sin(2 * np.pi * cell.axis_coords())[None, :]
        delta = np.cos(2 * np.pi * cell.axis_coords())[None, None, :]
        dt_t, om_t = corrector_tensors(np.eye(1), w, delta, cell)
        assert np.allclose(dt_t[:, 0, 0], fd_gradient(delta[0, 0], cell), atol=1e-14)
        assert np.allclose(om_t[:, :, 0, 0], fd_gradient(w, cell), atol=1e-14)

    def test_linear_in_g(self):
        cell = CellGrid(1, 32)
        w = np.sin(2 * np.pi * cell.axis_coords())[None, :]
        delta = np.cos(4 * np.pi * cell.axis_coords())[None, None, :]
        d1, o1 = corrector_tensors(np.array([[1.5]]), w, delta, cell)
        d2, o2 = corrector_tensors(np.array([[3.0]]), w, delta, cell)
        assert np.allclose(2.0 * d1, d2, atol=1e-14)
        assert np.allclose(2.0 * o1, o2, atol=1e-14)


class TestSweep:
    def test_constant_coefficients_identical_samples(self):
        cs = make_set(e=TensorCoefficient.filled((1,), TrigY(2.0, 1.0, (1,))))
        sols = cell_sweep(cs, MacroGrid(1, 5), [0.0, 0.1], CellGrid(1, 32))
        ref = sols[0]
        assert len(sols) == 10
        for sol in sols[1:]:
            assert np.array_equal(sol.E_star, ref.E_star)
            assert np.array_equal(sol.W, ref.W)

    def test_separable_factor_pulls_out(self):
        tx = TXModulation(base=1.0, x_amp=0.25, k=(1,))
        cs = make_set(e=TensorCoefficient.filled(
            (1,), Separable(tx=tx, y=TrigY(2.0, 1.0, (1,)))))
        assert cs.cell_dependency() == "separable"
        macro = MacroGrid(1, 9)
        cell = CellGrid(1, 128)
        table = CellTable(cs, macro, cell)
        unit = make_set(e=TensorCoefficient.filled((1,), TrigY(2.0, 1.0, (1,))))
        e_star_unit = solve_cell_at(unit, 0.0, X0, cell).E_star[0, 0]
        for node in np.ndindex(macro.shape):
            x = macro.nodes()[node]
            f = 1.0 + 0.25 * np.cos(np.pi * x[0])
            assert table.at(0.0, node).E_star[0, 0] == pytest.approx(f * e_star_unit, rel=1e-12)

    def test_sweep_matches_pointwise_recompute(self):
        tx = TXModulation(base=1.0, x_amp=0.25, k=(1,))
        cs = make_set(e=TensorCoefficient.filled(
            (1,), Separable(tx=tx, y=TrigY(2.0, 1.0, (1,)))))
        macro = MacroGrid(1, 5)
        cell = CellGrid(1, 64)
        table = CellTable(cs, macro, cell)
        for node in np.ndindex(macro.shape):
            x = macro.nodes()[node]
            direct = solve_cell_at(cs, 0.0, x, cell)
            reused = table.at(0.0, node)
            assert np.allclose(reused.E_star, direct.E_star, atol=1e-11)
            assert np.allclose(reused.D_star, direct.D_star, atol=1e-11)
            assert np.allclose(reused.delta_tilde, direct.delta_tilde, atol=1e-10)
