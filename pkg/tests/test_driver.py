import csv
import json
import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamreduce import torus_fourier as tf
from kamreduce.cocycle import CocycleSystem, rotation_number
from kamreduce.driver import (
    DriverOptions,
    Schedule,
    almost_reduce,
    find_k1,
    lemma_num_check,
    reducibility_verdict,
    stabilization_index,
)
from kamreduce.torus_fourier import TorusMap

GAMMA = (math.sqrt(5) - 1) / 2
OMEGA = (1.0, GAMMA)
J = np.array([[0.0, -1.0], [1.0, 0.0]])
B = np.array([[0.3, 1.0], [0.5, -0.3]])


def one_mode(eps, m=(1, 0), M=B, r=0.5):
    F = TorusMap.trig([(m, M, None)], 2, 2)
    return F * (eps / tf.analytic_norm(F, r))


@pytest.fixture(scope="module")
def nonresonant():
    return almost_reduce(1.3 * J, one_mode(1e-5), OMEGA, DriverOptions(target=1e-50, j_max=8))


@pytest.fixture(scope="module")
def resonant():
    return almost_reduce((math.pi * GAMMA + 1e-4) * J, one_mode(1e-5), OMEGA)


class TestSchedule:
    def test_closed_forms(self):
        s = Schedule(k=12, C=Fraction(1, 2))
        assert s.alpha(2) == Fraction(2, 3)
        assert s.eps_prime(2) == Fraction(1, 2) / 2 ** 12
        assert s.R(1) == 4 * 6 ** 8 * 80 ** 4
        assert s.r(3) == Fraction(1, 4)

    def test_R_against_bignum(self):
        s = Schedule(k=5)
        with mpmath.workdps(80):
            for j in range(1, 20):
                expected = mpmath.mpf(4) * mpmath.mpf((j + 1) * (j + 2)) ** 8 * mpmath.mpf(80) ** 4
                assert s.R(j) == int(expected)

    def test_eps_prime_decreasing(self):
        s = Schedule(k=3)
        vals = [s.eps_prime(j) for j in range(1, 50)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_kappa_matches_step_constants(self):
        from kamreduce.diophantine import DiophantineParams
        from kamreduce.kam_step import step_constants
        s = Schedule(k=10, kappa=Fraction(1, 2), tau=1)
        for j in (1, 3, 6):
            c = step_constants(1 / (j + 1), 1 / (j + 2), 1e-7, 2, DiophantineParams(0.5, 1))
            assert float(s.kappa_j(j, 1e-7)) == pytest.approx(c.kappa_pp, rel=1e-10)
            assert c.R == pytest.approx(s.R(j), rel=1e-12)

    def test_kappa_summable(self):
        sums = Schedule(k=10).kappa_partial_sums(60)
        inc = [sums[i + 1] - sums[i] for i in range(len(sums) - 1)]
        assert all(a > b for a, b in zip(inc, inc[1:]))
        assert inc[-1] / sums[-1] < 1e-30


class TestLemma:
    def test_small_k_fails_early(self):
        chk = lemma_num_check(0.5, 10, 4, 100)
        assert not chk.holds and chk.first_violation == 2

    def test_large_k_holds(self):
        assert lemma_num_check(0.5, 10, 400, 10 ** 4).holds

    def test_k200_fails(self):
        # at j = 2 the left side is about 2^{-k/3} (6 k log 2)^10 / 2
        assert lemma_num_check(0.5, 10, 200, 10 ** 4).first_violation == 2

    def test_k1_search(self):
        res = find_k1(0.5, 10, 10 ** 4, confirm=5)
        assert res["k1"] == 318
        assert res["upward_closed"]
        assert not lemma_num_check(0.5, 10, 317, 10 ** 4).holds

    def test_zero_loss(self):
        # with D = 0, C = 1 the binding case is j = 2: 2^{-k/3} <= 1/9, i.e. k >= 10
        assert find_k1(1.0, 0, 10 ** 4, confirm=5)["k1"] == 10

    def test_exact_agrees_with_log_form(self):
        from kamreduce.driver import _lemma_exact, _lemma_log_margin
        for k in (5, 50, 320):
            for j in (2, 3, 17, 400):
                assert _lemma_exact(0.5, 10, k, j) == (_lemma_log_margin(0.5, 10, k, j) <= 0)

    def test_needs_range(self):
        with pytest.raises(ValueError):
            lemma_num_check(0.5, 10, 4, 1)


class TestAlmostReduce:
    def test_zero_perturbation(self):
        rep = almost_reduce(1.3 * J, TorusMap.zeros(2, 2, target="sl(2,R)"), OMEGA)
        assert rep.verdict["verdict"] == "reducible"
        assert tf.is_identity(rep.Z)
        assert np.array_equal(rep.A_final, 1.3 * J)
        assert all(not any(M) for M in rep.M_history)

    def test_superlinear_decay(self, nonresonant):
        norms = [s.eps_tilde for s in nonresonant.steps] + [nonresonant.steps[-1].eps_out]
        assert len(norms) >= 4
        logs = -np.log(norms)
        assert all(b > 1.8 * a for a, b in zip(logs, logs[1:]))

    def test_nonresonant_reducible(self, nonresonant):
        assert all(not any(M) for M in nonresonant.M_history)
        assert nonresonant.verdict["verdict"] == "reducible"
        assert nonresonant.final_residual <= 1e-8
        assert max(s.residual_telescoped for s in nonresonant.steps) <= 1e-12

    def test_rotation_ledger_constant(self, nonresonant, resonant):
        for rep in (nonresonant, resonant):
            led = rep.rotation_ledger()
            assert max(led) - min(led) <= 1e-9

    def test_engineered_resonance(self, resonant):
        first = resonant.steps[0]
        assert first.M == (0.0, 0.5)
        eig = np.linalg.eigvals(resonant.A_final)
        assert np.abs(eig).max() <= first.kappa_j + math.sqrt(first.eps_tilde)
        assert abs(first.rho_step_gap) <= math.sqrt(first.eps_tilde)
        assert resonant.verdict["verdict"] == "reducible"
        assert resonant.verdict["stabilized_at"] == 2
        assert resonant.Psi.period == 2

    def test_rho_ledger_matches_integration(self, resonant):
        S = CocycleSystem(resonant.A, resonant.F, OMEGA)
        r = rotation_number(S, T=4000.0)
        assert abs(r.value - resonant.rotation_ledger()[-1]) <= r.error_bound + 1e-6

    def test_reduction_to_constant(self, resonant):
        assert resonant.verdict["reduction_residual"] <= 1e-10
        assert resonant.verdict["Z_period"] == 2

    def test_gate_failure(self):
        rep = almost_reduce(1.3 * J, one_mode(1e-2), OMEGA)
        assert rep.gate_failed == 1
        assert rep.verdict["verdict"] == "gate_failed"

    def test_strict_constants_tiny_perturbation(self):
        opts = DriverOptions(mode="paper", j_max=3, target=0.0)
        rep = almost_reduce(1.3 * J, one_mode(1e-14), OMEGA, opts)
        assert rep.gate_failed is None
        assert rep.options["gate"] == "paper"
        assert all(s.kappa_j < 1e-25 for s in rep.steps)
        assert all(s.eps_tilde <= s.scheduled_bound or s.scheduled_bound is None for s in rep.steps[1:])

    def test_strict_constants_reject_desk_scale(self):
        rep = almost_reduce(1.3 * J, one_mode(1e-5), OMEGA, DriverOptions(mode="paper"))
        assert rep.verdict["verdict"] == "gate_failed"

    def test_smoothed_input(self):
        # a perturbation with more modes than the first approximants keep
        rng = np.random.default_rng(2)
        terms = []
        for m in [(1, 0), (0, 1), (2, 1), (3, -1), (4, 0)]:
            C = rng.normal(size=(2, 2))
            C[1, 1] = -C[0, 0]
            terms.append((m, C * 10.0 ** (-2 * sum(map(abs, m))), None))
        F = TorusMap.trig(terms, 2, 2)
        F = F * (1e-5 / tf.analytic_norm(F, 0.5))
        rep = almost_reduce(1.1 * J, F, OMEGA, DriverOptions(j_max=6))
        assert rep.converged
        assert max(s.residual_telescoped for s in rep.steps) <= 1e-12
        assert rep.final_residual <= 1e-8

    def test_reports(self, resonant, tmp_path):
        text = resonant.to_json(tmp_path / "r.json")
        rec = json.loads(text)
        assert rec["verdict"]["verdict"] == "reducible"
        assert rec["options"]["mode"] == "adaptive"
        resonant.to_csv(tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["j", "fbar_norm", "cauchy_gauge", "M", "kappa_j"]
        assert len(rows) == 1 + len(resonant.steps)

    def test_deterministic(self):
        a = almost_reduce(1.3 * J, one_mode(1e-5), OMEGA).to_json()
        b = almost_reduce(1.3 * J, one_mode(1e-5), OMEGA).to_json()
        assert a == b


class TestVerdict:
    def test_all_zero(self):
        v = reducibility_verdict({"M_history": [(0, 0)] * 4, "converged": True})
        assert v["verdict"] == "reducible" and v["stabilized_at"] == 1

    def test_recurrent_resonances(self):
        # rho sits 1e-13 away from a point of the frequency module
        hist = [(0, 0), (0.5, 0), (0, 0), (0, 1.5), (0, 0), (1, -2.5)]
        rho = 2 * math.pi * (3 - 5 * GAMMA) + 1e-13
        v = reducibility_verdict({"M_history": hist, "converged": True, "omega": OMEGA}, rho=rho)
        assert v["verdict"] == "almost_reducible"
        assert v["classification"]["verdict"] != "diophantine"
        assert v["consistent"]

    def test_inconsistency_flag(self):
        hist = [(0.5, 0), (0, 1.5), (1, -2.5)]
        v = reducibility_verdict({"M_history": hist, "converged": True, "omega": OMEGA}, rho=1.3)
        assert v["classification"]["verdict"] == "diophantine"
        assert not v["consistent"]

    def test_rational_rho_confirmed(self):
        A = 2 * math.pi * GAMMA * J
        rep = almost_reduce(A, TorusMap.zeros(2, 2, target="sl(2,R)"), OMEGA)
        assert rep.verdict["classification"]["verdict"] == "rational"
        assert rep.verdict["prediction"] == "confirmed"

    def test_stabilization_index(self):
        assert stabilization_index([(0,), (1,), (0,), (0,)]) == 3
        assert stabilization_index([(0,), (1,)]) is None
        assert stabilization_index([(1,), (0,), (0,)], stable_window=3) is None


@settings(max_examples=8, deadline=None)
@given(st.floats(0.4, 2.8), st.floats(-7.0, -5.0), st.integers(0, 10 ** 6))
def test_telescoping_property(beta, log_eps, seed):
    rng = np.random.default_rng(seed)
    terms = []
    for m in [(1, 0), (0, 1), (1, 1)]:
        C = rng.normal(size=(2, 2))
        C[1, 1] = -C[0, 0]
        terms.append((m, C, None))
    F = TorusMap.trig(terms, 2, 2)
    F = F * (10 ** log_eps / tf.analytic_norm(F, 0.5))
    rep = almost_reduce(beta * J, F, OMEGA, DriverOptions(j_max=4))
    for s in rep.steps:
        assert s.residual_telescoped <= 1e-10 * s.j
    led = rep.rotation_ledger()
    sq = sum(math.sqrt(s.eps_tilde) for s in rep.steps)
    assert max(led) - min(led) <= sq + 1e-12
