import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamreduce.cocycle import lyapunov_exponent, rotation_number
from kamreduce.driver import DriverOptions
from kamreduce.schrodinger import (
    INSIDE,
    OUTSIDE,
    OUTSIDE_UNTRANSFORMED,
    RegimeWarning,
    SchrodingerSystem,
    build_cocycle,
    cosine_potential,
    detect_plateaus,
    potential,
    reduce_schrodinger,
    sweep,
    transform_matrix,
)
from kamreduce.torus_fourier import TorusMap

GAMMA = (math.sqrt(5) - 1) / 2
OMEGA = (1.0, GAMMA)
ZERO = TorusMap.zeros(2, 1, target="gl(n,R)")


def constant_potential(v):
    return potential([((0, 0), v, None)], 2)


class TestBuild:
    def test_inside_constant(self):
        coc = build_cocycle(ZERO, 1.0, OMEGA)
        assert np.array_equal(coc.A, [[0.0, -1.0], [1.0, 0.0]])
        assert np.abs(coc.F.coeffs).max() == 0

    def test_outside_constant(self):
        coc = build_cocycle(ZERO, 4.0, OMEGA)
        assert np.array_equal(coc.A, [[0.0, -2.0], [2.0, 0.0]])

    def test_outside_constant_potential(self):
        v = 0.3
        coc = build_cocycle(constant_potential(v), 4.0, OMEGA)
        F0 = coc.F.mean
        np.testing.assert_allclose(F0, v / 4 * np.array([[-1.0, 1.0], [-1.0, 1.0]]), atol=1e-15)

    def test_transform_conjugates(self):
        # Y = P X maps A_lambda + V E12 to A~ + F~ for constant V
        lam, v = 5.3, 0.7
        P = transform_matrix(lam)
        lhs = P @ np.array([[0.0, -lam + v], [1.0, 0.0]]) @ np.linalg.inv(P)
        s = math.sqrt(lam)
        rhs = np.array([[0.0, -s], [s, 0.0]]) + v / (2 * s) * np.array([[-1.0, 1.0], [-1.0, 1.0]])
        np.testing.assert_allclose(lhs, rhs, atol=1e-14)

    def test_trace_free(self):
        V = cosine_potential(0.2, 2)
        for lam in (-1.0, 0.5, 3.0):
            coc = build_cocycle(V, lam, OMEGA)
            assert np.trace(coc.A) == 0
            assert np.abs(np.trace(coc.F.coeffs, axis1=-2, axis2=-1)).max() == 0

    def test_regimes(self):
        assert SchrodingerSystem(ZERO, 2.0, OMEGA).regime == INSIDE
        assert SchrodingerSystem(ZERO, -2.0, OMEGA).regime == INSIDE
        assert SchrodingerSystem(ZERO, 2.01, OMEGA).regime == OUTSIDE
        assert SchrodingerSystem(ZERO, -3.0, OMEGA).regime == OUTSIDE_UNTRANSFORMED

    def test_negative_energy_warns(self):
        with pytest.warns(RegimeWarning):
            coc = build_cocycle(ZERO, -3.0, OMEGA)
        assert np.array_equal(coc.A, [[0.0, 3.0], [1.0, 0.0]])

    def test_rejects_matrix_potential(self):
        with pytest.raises(ValueError):
            SchrodingerSystem(TorusMap.zeros(2, 2), 1.0, OMEGA)

    def test_rejects_dimension_mismatch(self):
        with pytest.raises(ValueError):
            SchrodingerSystem(TorusMap.zeros(3, 1, target="gl(n,R)"), 1.0, OMEGA)


class TestReduce:
    def test_free_operator(self):
        out = reduce_schrodinger(ZERO, 1.0, OMEGA)
        assert out.verdict["verdict"] == "reducible"
        assert out.rho_plain.value == pytest.approx(1.0, abs=1e-5)

    def test_small_potential_nonresonant(self):
        # lambda = 1: rho near 1, far from the half module at low order
        opts = DriverOptions(gate_factor=1e-2)
        out = reduce_schrodinger(cosine_potential(2e-5, 2), 1.0, OMEGA, opts)
        assert out.verdict["verdict"] == "reducible"
        assert all(not any(M) for M in out.report.M_history)
        assert out.verdict["reduction_residual"] <= 1e-8
        assert out.verdict["classification"]["verdict"] == "diophantine"

    def test_default_gate_rejects_small_potential(self):
        out = reduce_schrodinger(cosine_potential(2e-5, 2), 1.0, OMEGA, rho_T=0)
        assert out.verdict["verdict"] == "gate_failed"

    def test_gap_resonance(self):
        # sqrt(lambda) = pi gamma = pi <(0,1), omega>
        lam = (math.pi * GAMMA) ** 2
        out = reduce_schrodinger(cosine_potential(2e-5, 2), lam, OMEGA, DriverOptions(gate_factor=1e-2))
        assert out.report.steps[0].M == (0.0, 0.5)
        assert out.gap_label == (0, 1)
        assert out.verdict["verdict"] == "reducible"
        gap, bound = out.rho_agreement()
        assert gap <= bound

    def test_regime_consistency(self):
        out = reduce_schrodinger(cosine_potential(1e-3, 2), 2.05, OMEGA, rho_T=3000.0)
        gap, bound = out.rho_agreement()
        assert gap <= bound

    def test_record(self):
        out = reduce_schrodinger(ZERO, 4.0, OMEGA)
        rec = out.to_record()
        assert rec["regime"] == OUTSIDE
        assert rec["rho_transform_gap"] <= rec["rho_transform_bound"]
        for r in (out.rho_plain, out.rho_transformed):
            assert r.value == pytest.approx(2.0, abs=1e-5)


class TestSweep:
    def test_free_sqrt(self):
        lams = np.linspace(0.5, 9.0, 6)
        tab = sweep(ZERO, lams, OMEGA, T=2000.0, reduce=False)
        np.testing.assert_allclose(tab.column("rho"), np.sqrt(lams), atol=1e-5)
        assert np.abs(tab.column("lyapunov")).max() <= 1e-3
        assert tab.plateaus == []

    def test_hyperbolic_constant(self):
        sysm = SchrodingerSystem(ZERO, -1.0, OMEGA)
        assert rotation_number(sysm.plain(), T=2000.0).value == pytest.approx(0.0, abs=1e-5)
        assert lyapunov_exponent(sysm.plain(), T=2000.0) == pytest.approx(1.0, abs=1e-4)

    def test_monotone_small_potential(self, tmp_path):
        tab = sweep(cosine_potential(2e-3, 2), np.linspace(0.1, 3.0, 12), OMEGA, T=1000.0)
        assert tab.monotone()
        tab.to_csv(tmp_path / "s.csv")
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[0] == ["lambda", "rho", "rho_err", "lyapunov", "verdict", "gap_label"]
        assert len(rows) == 13
        assert tab.to_records()["settings"]["points"] == 12

    @pytest.mark.slow
    def test_first_order_gap_plateau(self):
        # the (0,1) gap opens at sqrt(lambda) = pi gamma with width of order V
        tab = sweep(cosine_potential(0.15, 2), np.linspace(3.6, 3.9, 13), OMEGA, T=5000.0,
                    reduce=False)
        assert len(tab.plateaus) == 1
        p = tab.plateaus[0]
        assert p.label == (0, 1)
        assert abs(p.value - math.pi * GAMMA) <= 1e-4
        assert p.stop - p.start + 1 >= 3
        assert tab.monotone()

    def test_workers_keep_order(self):
        lams = [0.5, 1.5, 2.5]
        a = sweep(ZERO, lams, OMEGA, T=200.0, reduce=False, workers=1)
        b = sweep(ZERO, lams, OMEGA, T=200.0, reduce=False, workers=2)
        assert a.to_records() == b.to_records()


class TestPlateaus:
    def test_detects_flat_run(self):
        rho = [0.1, 0.2, 0.5, 0.5, 0.5, 0.5, 0.7]
        le = [0, 0, 0.1, 0.1, 0.1, 0.1, 0]
        assert detect_plateaus(rho, le) == [(2, 5)]

    def test_needs_positive_exponent(self):
        assert detect_plateaus([0.5] * 5, [0.0] * 5) == []

    def test_needs_three_points(self):
        assert detect_plateaus([0.1, 0.5, 0.5, 0.9], [0, 1, 1, 0]) == []


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(2.2, 8.0))
def test_constant_potential_shifts_energy(v, lam):
    # constant V is an energy shift: rho = sqrt(lambda - V) for both forms
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RegimeWarning)
        sysm = SchrodingerSystem(constant_potential(v), lam, OMEGA)
        for coc in (sysm.plain(), sysm.cocycle()):
            r = rotation_number(coc, T=500.0)
            assert abs(r.value - math.sqrt(lam - v)) <= r.error_bound + 1e-4
