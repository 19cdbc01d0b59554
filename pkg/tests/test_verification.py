import numpy as np
import pytest

from pphomog.coefficients import Const, SamplingGrid, TensorCoefficient, TrigY
from pphomog.discretization import MacroGrid
from pphomog.errors import ConfigurationError
from pphomog.micro import run_micro
from pphomog.verification import (derive_energy_constants, energy_certificate,
                                  manufactured_orders, micro_macro_convergence,
                                  uniform_bound_check, _manufactured_set, _Profile)

from conftest import make_set


class TestEnergyCertificate:
    def test_zero_data_passes_trivially(self):
        cs = make_set()
        traj = run_micro(cs, 0.25, MacroGrid(1, 17), 0.05, 0.2)
        rep = energy_certificate(cs, traj)
        assert rep.all_pass
        assert np.abs(rep.lhs).max() == 0.0

    def test_generic_oscillatory_run_passes_with_margin(self, oscillatory_set):
        traj = run_micro(oscillatory_set, 0.25, MacroGrid(1, 65), 0.01, 0.3)
        rep = energy_certificate(oscillatory_set, traj,
                                 sampling=SamplingGrid(t_max=0.3))
        assert rep.all_pass
        assert rep.min_margin > 0.0
        assert rep.constants.m_tilde.min() > 0.0
        assert rep.constants.e_tilde.min() > 0.0

    def test_constants_invalid_when_drift_too_large(self):
        cs = make_set(D=TensorCoefficient.filled((1, 1, 1), Const(3.0)))
        consts = derive_energy_constants(cs)
        assert not consts.valid

    def test_constants_match_hand_derivation(self):
        # d=1, N=1, m=1, e_min=1, sup|D|=0.3, sup K=0.5, sup J=0.2, sup H=1
        cs = make_set(
            e=TensorCoefficient.filled((1,), TrigY(2.0, 1.0, (1,))),
            D=TensorCoefficient.filled((1, 1, 1), Const(0.3)),
            K=TensorCoefficient.filled((1, 1), Const(0.5)),
            J=TensorCoefficient.filled((1, 1, 1), Const(0.2)),
            H=TensorCoefficient.filled((1,), Const(1.0)))
        c = derive_energy_constants(cs)
        assert c.e_tilde[0] == pytest.approx(1.0 - 0.15, abs=1e-12)
        assert c.m_tilde[0] == pytest.approx(0.85 / 2.0, abs=1e-12)
        share = 0.5 * 0.85 / 3.0
        assert c.h_tilde == pytest.approx(1.0 / (4.0 * share), abs=1e-12)
        assert c.k_tilde[0] == pytest.approx(0.5**2 / (4.0 * share), abs=1e-12)
        assert c.j_tilde[0, 0] == pytest.approx(0.2**2 / (4.0 * share), abs=1e-12)


class TestUniformBound:
    def test_identical_norms_without_oscillation(self, constant_set):
        runs = [run_micro(constant_set, e, MacroGrid(1, 33), 0.02, 0.1)
                for e in (0.25, 0.125)]
        rep = uniform_bound_check(runs)
        assert rep.ratio == pytest.approx(1.0, abs=1e-12)

    def test_zero_data_reports_unit_ratio(self):
        cs = make_set()
        runs = [run_micro(cs, 0.25, MacroGrid(1, 17), 0.05, 0.1)]
        rep = uniform_bound_check(runs)
        assert rep.composite[0] == 0.0
        assert rep.ratio == 1.0

    def test_oscillatory_family_stays_bounded(self, oscillatory_set):
        runs = []
        for eps in (0.25, 0.125):
            n = int(round(16 / eps)) + 1
            runs.append(run_micro(oscillatory_set, eps, MacroGrid(1, n), 0.02, 0.2))
        rep = uniform_bound_check(runs)
        assert rep.ratio <= 1.5


class TestConvergenceStudy:
    def test_errors_decrease_with_eps(self, oscillatory_set):
        table = micro_macro_convergence(oscillatory_set, [0.25, 0.125], 17, 32,
                                        0.02, 0.2)
        assert table.rows[0].eps > table.rows[1].eps
        assert table.rows[0].err_u > table.rows[1].err_u
        assert np.isfinite(table.rate_u)

    def test_slow_coefficients_hit_discretization_floor(self, constant_set):
        # the comparison error is the coarse-grid discretization floor, which
        # does not shrink with eps (no oscillation to average out)
        table = micro_macro_convergence(constant_set, [0.25, 0.125], 17, 16,
                                        0.02, 0.1)
        for row in table.rows:
            assert row.err_u < 1e-4
            assert row.err_v < 1e-3
        assert table.rows[0].err_u == pytest.approx(table.rows[1].err_u, rel=0.5)

    def test_under_resolved_explicit_grid_refused(self, oscillatory_set):
        with pytest.raises(ConfigurationError, match="under-resolved"):
            micro_macro_convergence(oscillatory_set, [0.0625], 17, 32, 0.02, 0.1,
                                    micro_intervals=[64])

    def test_non_reciprocal_eps_refused(self, oscillatory_set):
        with pytest.raises(ConfigurationError, match="reciprocal"):
            micro_macro_convergence(oscillatory_set, [0.3], 17, 32, 0.02, 0.1)


class TestManufacturedOrders:
    def test_orders_meet_thresholds(self, constant_set):
        rep = manufactured_orders(constant_set, levels=3)
        assert rep.spatial_micro >= 1.9
        assert rep.spatial_macro >= 1.9
        assert rep.temporal_micro >= 0.9
        assert rep.temporal_macro >= 0.9

    def test_affine_time_factor_is_stepped_exactly(self, constant_set):
        # quadratic profile + affine phi: space and time both exact
        prof = _Profile("quadratic", 1)
        cs_mms, exact = _manufactured_set(constant_set, prof,
                                          lambda t: 1.0 + t, lambda t: 1.0,
                                          zero_drift=True)
        grid = MacroGrid(1, 17)
        traj = run_micro(cs_mms, 0.5, grid, 0.05, 0.2, picard_tol=1e-13)
        u_ex, v_ex = exact(0.2, grid.nodes())
        assert np.abs(traj.states[-1].U[0] - u_ex).max() < 1e-10
        assert np.abs(traj.states[-1].V[0] - v_ex).max() < 1e-10

    def test_requires_scalar_system(self, constant_set):
        cs2 = make_set(N=2, L=TensorCoefficient.from_values([[1.0, 0.0], [0.0, 1.0]]))
        with pytest.raises(ConfigurationError):
            manufactured_orders(cs2, levels=2)
