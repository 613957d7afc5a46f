import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamreduce import torus_fourier as tf
from kamreduce.cocycle import conjugation_residual
from kamreduce.diophantine import DiophantineParams
from kamreduce.kam_step import (
    GateError,
    ParabolicConstantError,
    PreconditionError,
    StepParams,
    ad_matrix,
    box_constant,
    constant_rotation,
    kam_step,
    lie_remainder,
    remove_resonance,
    solve_homological,
    step_constants,
)
from kamreduce.torus_fourier import TorusMap

GAMMA = (math.sqrt(5) - 1) / 2
OMEGA = (1.0, GAMMA)
J = np.array([[0.0, -1.0], [1.0, 0.0]])
E12 = np.array([[0.0, 1.0], [0.0, 0.0]])
B = np.array([[0.3, 1.0], [0.5, -0.3]])
DIO = DiophantineParams(0.5, 1)


def const(A):
    return TorusMap.constant(A, 2, 1, "sl(2,R)")


def one_mode(eps, r=0.5, m=(1, 0), M=B):
    F = TorusMap.trig([(m, M, None)], 2, 2)
    return F * (eps / tf.analytic_norm(F, r))


def params(**kw):
    base = dict(r=0.5, r2=0.25, dioph=DIO, gate="practical")
    base.update(kw)
    return StepParams(**base)


class TestConstants:
    def test_truncation_order(self):
        c = step_constants(0.5, 0.25, math.exp(-math.pi), 2, DIO)
        assert c.N == pytest.approx(1.0, rel=1e-14)

    def test_R_unit_width(self):
        assert box_constant(2, 1) == 163_840_000
        assert step_constants(0.5, 0.25, 0.1, 2, DIO).R == box_constant(2, 0.25)

    def test_kappa_formula(self):
        c = step_constants(0.5, 0.25, 1e-3, 2, DIO)
        expected = DIO.kappa / (2 * (8 * c.R ** 2 * c.N) ** DIO.tau)
        assert c.kappa_pp == pytest.approx(expected, rel=1e-12)
        assert c.kappa_pp_log10 == pytest.approx(math.log10(expected), abs=1e-12)

    def test_adaptive_kappa(self):
        c = step_constants(0.5, 0.25, 1e-8, 2, DIO, kappa_mode="adaptive")
        assert c.kappa_pp == pytest.approx(0.5 * 1e-2)

    def test_underflow_keeps_log(self):
        c = step_constants(0.5, 0.49, 1e-3, 4, DiophantineParams(0.5, 2))
        assert c.kappa_pp_log10 < -330
        assert c.kappa_pp == 0.0
        assert math.isfinite(c.kappa_pp_log10)

    def test_bad_window(self):
        with pytest.raises(ValueError):
            step_constants(0.5, 0.6, 1e-3, 2, DIO)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            StepParams(0.7, 0.2, DIO)
        with pytest.raises(ValueError):
            StepParams(0.5, 0.5, DIO)
        assert StepParams(0.48, 0.476, DIO).window_ok
        assert not StepParams(0.5, 0.25, DIO).window_ok


class TestHomological:
    def test_cosine_oracle(self):
        # d Y / d theta_1 = cos(2 pi theta_1) E12 with A = 0 has Y = sin(2 pi theta_1)/(2 pi) E12
        G = TorusMap.trig([((1, 0), E12, None)], 2, 2)
        Y, rem, res = solve_homological(np.zeros((2, 2)), G, (1.0, GAMMA), 1e-6, 1)
        assert not res
        assert tf.analytic_norm(rem, 0.0) == 0.0
        th = np.random.default_rng(0).random((20, 2))
        for t in th:
            expected = math.sin(2 * math.pi * t[0]) / (2 * math.pi) * E12
            assert np.abs(tf.evaluate(Y, t) - expected).max() < 1e-15
            # finite-difference oracle along the flow
            h = 1e-5
            fd = (tf.evaluate(Y, t + h * np.array(OMEGA)) - tf.evaluate(Y, t - h * np.array(OMEGA))) / (2 * h)
            assert np.abs(fd - tf.evaluate(G, t)).max() < 1e-8

    def test_equation_holds(self):
        rng = np.random.default_rng(3)
        G = TorusMap.trig([(m, rng.normal(size=(2, 2)) * [[1, 1], [1, -1]], None)
                           for m in [(1, 0), (0, 1), (2, -1), (1, 1)]], 2, 2)
        A = 0.8 * J + 0.1 * np.diag([1.0, -1.0])
        Y, rem, res = solve_homological(A, G, OMEGA, 1e-6, 1)
        lhs = tf.derive_omega(Y, OMEGA) - Y.commutator_const(A)
        diff = lhs - (G - rem)
        assert np.abs(diff.coeffs).max() < 1e-14
        assert Y.is_real

    def test_resonant_mode_skipped(self):
        # spectrum +-i pi gamma: mode (0,1) of the off-diagonal part is resonant
        A = math.pi * GAMMA * J
        G = TorusMap.trig([((0, 1), np.diag([1.0, -1.0]), None), ((1, 0), E12, None)], 2, 2)
        Y, rem, res = solve_homological(A, G, OMEGA, 1e-3, 1)
        assert set(res) == {(0, 1), (0, -1)}
        assert np.abs(rem.coefficient((0, 1))).max() > 0.1
        assert np.abs(Y.coefficient((0, 1))).max() == 0.0

    def test_zero_input(self):
        G = TorusMap.zeros(2, 2, band=2, target="sl(2,R)")
        Y, rem, res = solve_homological(J, G, OMEGA, 1e-3, 1)
        assert not np.any(Y.coeffs) and not np.any(rem.coeffs) and not res

    def test_only_resonant_content(self):
        A = math.pi * GAMMA * J
        G = TorusMap.trig([((0, 1), np.diag([1.0, -1.0]), None)], 2, 2)
        Y, rem, res = solve_homological(A, G, OMEGA, 1e-3, 1)
        assert not np.any(Y.coeffs)
        assert np.array_equal(rem.coeffs, G.coeffs)

    def test_ad_matrix_row_major(self):
        rng = np.random.default_rng(1)
        A, Y = rng.normal(size=(2, 2, 2))
        assert np.allclose(ad_matrix(A) @ Y.ravel(), (A @ Y - Y @ A).ravel())


class TestRemoveResonance:
    def test_spectrum_shift(self):
        A = (math.pi * GAMMA + 1e-3) * J
        Phi, A2 = remove_resonance(A, (0, 1), OMEGA)
        eig = np.sort_complex(np.linalg.eigvals(A2))
        assert np.abs(eig - np.array([-1e-3j, 1e-3j])).max() < 1e-12
        assert Phi.period == 2
        assert conjugation_residual(Phi, const(A), A2, OMEGA) < 1e-12

    def test_non_normal_elliptic(self):
        A = np.array([[0.2, -3.0], [1.5, -0.2]])
        s = constant_rotation(A)
        assert s == pytest.approx(math.sqrt(np.linalg.det(A)))
        Phi, A2 = remove_resonance(A, (1, 1), OMEGA)
        assert constant_rotation(A2) == pytest.approx(s - math.pi * (1 + GAMMA), abs=1e-12)
        assert conjugation_residual(Phi, const(A), A2, OMEGA) < 1e-11

    def test_rotation_numbers_of_constants(self):
        from kamreduce.cocycle import CocycleSystem, rotation_number
        A = np.array([[0.1, -2.4], [1.1, -0.1]])
        m = (1, 1)
        _, A2 = remove_resonance(A, m, OMEGA)
        r1 = rotation_number(CocycleSystem(A, omega=OMEGA), T=2000.0).value
        r2 = rotation_number(CocycleSystem(A2, omega=OMEGA), T=2000.0).value
        assert r1 - r2 == pytest.approx(math.pi * (1 + GAMMA), abs=1e-6)

    def test_zero_index_is_identity(self):
        Phi, A2 = remove_resonance(np.zeros((2, 2)), (0, 0), OMEGA)
        assert tf.is_identity(Phi)
        assert np.array_equal(A2, np.zeros((2, 2)))

    @pytest.mark.parametrize("A", [np.zeros((2, 2)), E12, np.diag([1.0, -1.0])])
    def test_refuses_non_elliptic(self, A):
        with pytest.raises(ParabolicConstantError):
            remove_resonance(A, (0, 1), OMEGA)

    def test_negative_orientation(self):
        assert constant_rotation(-2.0 * J) == pytest.approx(-2.0)
        assert constant_rotation(np.diag([1.0, -1.0])) == 0.0


class TestStep:
    def test_zero_perturbation_is_noop(self):
        A = 1.3 * J
        F = TorusMap.zeros(2, 2, target="sl(2,R)")
        res = kam_step(const(A), F, TorusMap.identity(2), A, params(), OMEGA)
        assert tf.is_identity(res.Z)
        assert np.array_equal(res.A, A)
        assert res.eps_out == 0.0

    def test_quadratic_contraction(self):
        A = 1.3 * J
        eps = np.array([1e-4, 1e-5, 1e-6])
        out = []
        for e in eps:
            res = kam_step(const(A), one_mode(e), TorusMap.identity(2), A, params(), OMEGA)
            assert res.resonance is None
            assert res.residual < 1e-12
            out.append(res.eps_out)
        slope = np.polyfit(np.log(eps), np.log(out), 1)[0]
        assert slope >= 1.8

    def test_conjugation_identity(self):
        A = np.array([[0.1, -1.2], [0.9, -0.1]])
        F = one_mode(1e-4, m=(1, 1)) + one_mode(5e-5, m=(0, 2), M=J)
        res = kam_step(const(A), F, TorusMap.identity(2), A, params(), OMEGA)
        lhs = const(A) + F
        rhs = res.Abar + res.Fbar
        assert conjugation_residual(res.Z, lhs, rhs, OMEGA, grid=64) <= 1e-9
        assert res.Z.period == 1 and res.Fbar.period == 1 and res.Abar.period == 1

    def test_engineered_resonance(self):
        eps = 1e-5
        A = (math.pi * GAMMA + 1e-4) * J
        res = kam_step(const(A), one_mode(eps), TorusMap.identity(2), A,
                       params(kappa_mode="adaptive"), OMEGA)
        assert res.resonance is not None and res.resonance.m == (0, 1)
        assert res.M == (0.0, 0.5)
        assert np.linalg.norm(res.A, 2) <= res.constants.kappa_pp + math.sqrt(eps)
        eig = np.sort_complex(np.linalg.eigvals(res.A))
        assert np.abs(eig - np.array([-1e-4j, 1e-4j])).max() < 1e-10
        assert res.Psi.period == 2 and not res.psi_unchanged
        assert res.residual < 1e-12
        assert res.diagnostics["rotation_ledger_ok"]

    def test_period_discipline(self):
        A = (math.pi * GAMMA + 1e-4) * J
        res = kam_step(const(A), one_mode(1e-5), TorusMap.identity(2), A,
                       params(kappa_mode="adaptive"), OMEGA)
        X = TorusMap.trig([((1, 2), B, J)], 2, 2).to_period(2)
        conj = tf.multiply(tf.multiply(res.Psi, X), tf.invert(res.Psi))
        scale = np.abs(conj.coeffs).max()
        assert conj.odd_part_mass() < 1e-13 * scale
        # Psi itself lives on the odd coset
        assert res.Psi.odd_part_mass() > 0.5

    def test_second_step_in_rotated_frame(self):
        A = (math.pi * GAMMA + 1e-4) * J
        r1 = kam_step(const(A), one_mode(1e-5), TorusMap.identity(2), A,
                      params(kappa_mode="adaptive"), OMEGA)
        r2 = kam_step(r1.Abar, r1.Fbar, r1.Psi, r1.A,
                      StepParams(0.25, 0.2, DIO, gate="none", kappa_mode="adaptive"), OMEGA)
        assert r2.resonance is None
        assert r2.psi_unchanged
        assert r2.eps_out < r2.eps_in ** 1.5
        assert r2.residual < 1e-12

    def test_melnikov_stability(self):
        # a constant away from every resonance up to order N keeps Psi
        A = 1.3 * J
        Psi = TorusMap.identity(2)
        res = kam_step(const(A), one_mode(1e-5), Psi, A, params(kappa_mode="adaptive"), OMEGA)
        assert res.psi_unchanged and res.Psi is Psi

    def test_gate(self):
        A = 1.3 * J
        with pytest.raises(GateError) as exc:
            kam_step(const(A), one_mode(1e-2), TorusMap.identity(2), A, params(), OMEGA)
        assert exc.value.record["passed"] is False
        with pytest.raises(GateError):
            kam_step(const(A), one_mode(1e-6), TorusMap.identity(2), A, params(gate="paper"), OMEGA)

    def test_precondition(self):
        A = 1.3 * J
        with pytest.raises(PreconditionError):
            kam_step(const(A), one_mode(1e-5), TorusMap.identity(2), 1.1 * J, params(), OMEGA)

    def test_record_is_plain(self):
        import json
        A = 1.3 * J
        res = kam_step(const(A), one_mode(1e-5), TorusMap.identity(2), A, params(), OMEGA)
        json.dumps(res.to_record())

    def test_tail_is_left_alone(self):
        # a mode beyond the truncation order passes through to first order
        A = 1.3 * J
        eps = 1e-5
        F = one_mode(eps, m=(9, 0))
        res = kam_step(const(A), F, TorusMap.identity(2), A, params(), OMEGA)
        assert res.constants.N < 9
        assert tf.analytic_norm(res.Fbar - F, 0.25) < 1e-3 * tf.analytic_norm(F, 0.25)


def test_lie_remainder_matches_grid_conjugation():
    rng = np.random.default_rng(5)
    A = 0.7 * J
    G = TorusMap.trig([((1, 0), 1e-2 * B, None), ((0, 1), None, 1e-2 * J)], 2, 2)
    Y, rem, _ = solve_homological(A, G, OMEGA, 1e-8, 1)
    new = lie_remainder(A, G, Y, rem, OMEGA, 0.25)
    E = tf.exponentiate(Y)
    Ei = tf.invert(E)
    direct = tf.multiply(Ei, tf.multiply(const(A) + G, E) - tf.derive_omega(E, OMEGA)) - const(A)
    th = rng.random((30, 2))
    err = max(np.abs(tf.evaluate(new, t) - tf.evaluate(direct, t)).max() for t in th)
    assert err < 1e-14


@settings(max_examples=15, deadline=None)
@given(st.floats(0.3, 2.5), st.floats(-6.5, -4.5), st.integers(0, 10**6))
def test_step_conjugation_property(beta, log_eps, seed):
    rng = np.random.default_rng(seed)
    A = beta * J + 0.05 * rng.normal() * np.diag([1.0, -1.0])
    terms = []
    for m in [(1, 0), (0, 1), (1, -1)]:
        C = rng.normal(size=(2, 2))
        C[1, 1] = -C[0, 0]
        terms.append((m, C, None))
    F = TorusMap.trig(terms, 2, 2)
    F = F * (10 ** log_eps / tf.analytic_norm(F, 0.5))
    res = kam_step(const(A), F, TorusMap.identity(2), A, params(kappa_mode="adaptive"), OMEGA)
    assert res.residual <= 1e-9
    assert res.eps_out < res.eps_in
    if res.resonance is None:
        assert res.psi_unchanged
