"""Iteration of the KAM step along analytic approximations of a C^k perturbation.

State ``j`` holds ``Zbar_j, Abar_j, Fbar_j`` (on the strip of half-width
``1/(j+1)``), the reducing map ``Psi_j`` and the constant ``A_j`` with

    d_omega Zbar_j = (A + F_j) Zbar_j - Zbar_j (Abar_j + Fbar_j).

The induction starts from ``Zbar_1 = Psi_1 = Id``, ``Abar_1 = A_1 = A`` and
``Fbar_1 = F_1``.  Step ``j`` feeds

    H_j = Zbar_j^-1 (F_{j+1} - F_j) Zbar_j + Fbar_j,    eps~_j = |H_j|_{1/(j+1)}

to :func:`kamreduce.kam_step.kam_step` on the strip pair
``(1/(j+1), 1/(j+2))`` and sets ``Zbar_{j+1} = Zbar_j Z_{j+1}``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import mpmath
import numpy as np

from . import torus_fourier as tf
from .cocycle import conjugation_residual
from .diophantine import DiophantineParams, classify_rotation_number, frequency_dc_margin
from .kam_step import GateError, StepParams, constant_rotation, kam_step
from .smoothing import SmoothingKernel, analytic_approximant
from .torus_fourier import TorusMap

log = logging.getLogger(__name__)

MODES = ("paper", "adaptive")


# -- schedule -------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Exact schedule arithmetic.

    ``eps'_j = C / j^k``, ``alpha_j = 4 / (j (j+1))``, ``r_j = 1/(j+1)``,
    ``R_j = 4 ((j+1)(j+2))^8 80^4`` and
    ``kappa_j = kappa / (2 (8 R_j^2 N_j)^tau)`` with
    ``N_j = (j+1)/(2 pi) |log eps~_j|``.
    """

    k: int
    C: Fraction = Fraction(1, 2)
    D: int = 10
    kappa: Fraction = Fraction(1, 2)
    tau: Fraction = Fraction(1)

    def __post_init__(self):
        for name in ("C", "kappa", "tau"):
            object.__setattr__(self, name, Fraction(getattr(self, name)))
        if self.k < 0 or self.D < 0:
            raise ValueError("k and D must be nonnegative")

    def eps_prime(self, j):
        return self.C / Fraction(j) ** self.k

    @staticmethod
    def alpha(j):
        return Fraction(4, j * (j + 1))

    @staticmethod
    def r(j):
        return Fraction(1, j + 1)

    @staticmethod
    def R(j):
        return 4 * ((j + 1) * (j + 2)) ** 8 * 80 ** 4

    def gate0(self, r, r2):
        """``eps'_0(r, r') = C (r - r')^D``."""
        return self.C * (Fraction(r) - Fraction(r2)) ** self.D

    @staticmethod
    def N(j, eps_tilde):
        return (j + 1) / (2 * mpmath.pi) * abs(mpmath.log(eps_tilde))

    def kappa_j(self, j, eps_tilde=None, dps=60):
        """``kappa_j``; the nominal input ``eps~_j = eps'_{j+1}`` when not given."""
        with mpmath.workdps(dps):
            e = mpmath.mpf(self.eps_prime(j + 1).numerator) / self.eps_prime(j + 1).denominator \
                if eps_tilde is None else mpmath.mpf(eps_tilde)
            N = self.N(j, e)
            tau = mpmath.mpf(self.tau.numerator) / self.tau.denominator
            kap = mpmath.mpf(self.kappa.numerator) / self.kappa.denominator
            return kap / (2 * (8 * mpmath.mpf(self.R(j)) ** 2 * N) ** tau)

    def kappa_partial_sums(self, J, dps=60):
        with mpmath.workdps(dps):
            out, s = [], mpmath.mpf(0)
            for j in range(1, J + 1):
                s += self.kappa_j(j, dps=dps)
                out.append(s)
            return out

    def table(self, J):
        rows = []
        for j in range(1, J + 1):
            rows.append({
                "j": j,
                "eps_prime": float(self.eps_prime(j)),
                "alpha": str(self.alpha(j)),
                "r": str(self.r(j)),
                "R": self.R(j),
                "kappa_nominal": mpmath.nstr(self.kappa_j(j), 8),
            })
        return rows


# -- numerical lemma --------------------------------------------------------------

@dataclass(frozen=True)
class LemmaCheck:
    C: float
    D: int
    k: int
    j_max: int
    holds: bool
    first_violation: int | None
    worst_margin: float   # max over j of log(lhs) - log(rhs); <= 0 when the inequality holds

    def to_record(self):
        return dict(self.__dict__)


def _lemma_log_margin(C, D, k, j):
    j = np.asarray(j, dtype=float)
    with np.errstate(divide="ignore"):
        lhs = math.log(C) + D * np.log(j * (j + 1) * k * np.log(j)) \
            - k * np.log(j) * (1 - 4 / (j * (j + 1)))
    return lhs + 2 * np.log(j + 1)


def _lemma_exact(C, D, k, j, dps=50):
    with mpmath.workdps(dps):
        j = mpmath.mpf(j)
        eps = j ** -k
        lhs = C * (j * (j + 1) * abs(mpmath.log(eps))) ** D * eps ** (1 - 4 / (j * (j + 1)))
        return lhs <= 1 / (j + 1) ** 2


def lemma_num_check(C, D, k, j_max):
    """Check ``C [j(j+1)|log eps_j|]^D eps_j^{1-4/(j(j+1))} <= (j+1)^-2`` with
    ``eps_j = j^-k`` for ``j = 2..j_max``."""
    if j_max < 2:
        raise ValueError("j_max must be >= 2")
    j = np.arange(2, j_max + 1)
    marg = _lemma_log_margin(C, D, k, j)
    bad = marg > 0
    # borderline cases are settled in high precision
    close = np.nonzero(np.abs(marg) < 1e-9)[0]
    for i in close:
        bad[i] = not _lemma_exact(C, D, k, int(j[i]))
    first = int(j[np.argmax(bad)]) if bad.any() else None
    return LemmaCheck(float(C), int(D), int(k), int(j_max), first is None, first, float(marg.max()))


def find_k1(C, D, j_max, k_max=5000, confirm=50):
    """Smallest ``k`` for which the lemma inequality holds up to ``j_max``.

    The next ``confirm`` values of ``k`` are checked as well; the returned
    record says whether they also hold.
    """
    for k in range(1, k_max + 1):
        if lemma_num_check(C, D, k, j_max).holds:
            tail = all(lemma_num_check(C, D, kk, j_max).holds for kk in range(k + 1, k + confirm + 1))
            return {"k1": k, "confirmed_up_to": k + confirm, "upward_closed": tail}
    return {"k1": None, "confirmed_up_to": k_max, "upward_closed": False}


# -- the iteration ----------------------------------------------------------------

@dataclass
class DriverOptions:
    mode: str = "adaptive"
    j_max: int = 8
    target: float = 1e-12
    dioph: DiophantineParams = field(default_factory=lambda: DiophantineParams(0.5, 1))
    C: float = 0.5
    D: int = 10
    k: int = 10
    kernel: SmoothingKernel = field(default_factory=SmoothingKernel)
    gate: str | None = None            # default: "practical" in adaptive mode, "paper" in paper mode
    residual_grid: int = 64
    check_frequency: bool = True
    smoothing_constant: float = 1.0    # C' used for the first-step gate in paper mode
    gate_factor: float = 1e-3          # practical gate: eps < gate_factor (r - r'')

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.j_max < 1:
            raise ValueError("j_max must be >= 1")

    @property
    def gate_kind(self):
        if self.gate is not None:
            return self.gate
        return "paper" if self.mode == "paper" else "practical"

    @property
    def kappa_mode(self):
        return "paper" if self.mode == "paper" else "adaptive"

    def to_record(self):
        return {"mode": self.mode, "j_max": self.j_max, "target": self.target,
                "kappa": self.dioph.kappa, "tau": self.dioph.tau, "C": self.C, "D": self.D,
                "k": self.k, "c_band": self.kernel.c_band, "gate": self.gate_kind,
                "residual_grid": self.residual_grid, "smoothing_constant": self.smoothing_constant,
                "gate_factor": self.gate_factor}


@dataclass
class StepRecord:
    j: int
    eps_tilde: float
    eps_out: float
    fbar_norm: float
    M: tuple
    resonance: tuple | None
    N: float
    R: float
    kappa_j: float
    kappa_j_log10: float
    rho_A: float
    rho_ledger: float
    rho_step_gap: float
    cauchy_gauge: float
    residual_step: float
    residual_telescoped: float
    scheduled_bound: float | None
    psi_unchanged: bool
    diagnostics: dict = field(default_factory=dict)

    def to_record(self):
        out = dict(self.__dict__)
        out["M"] = [float(x) for x in self.M]
        out["resonance"] = None if self.resonance is None else list(self.resonance)
        return out


@dataclass
class AlmostReducibilityReport:
    mode: str
    omega: tuple
    A: np.ndarray
    F: TorusMap
    steps: list
    Z: TorusMap
    Abar: TorusMap
    Fbar: TorusMap
    Psi: TorusMap
    A_final: np.ndarray
    converged: bool
    gate_failed: int | None
    final_residual: float
    final_residual_exact: float
    options: dict
    verdict: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def M_history(self):
        return [s.M for s in self.steps]

    def fbar_norms(self):
        return [s.fbar_norm for s in self.steps]

    def rotation_ledger(self):
        """``rho(A_j) + 2 pi sum_{l<j} <M_l, omega>`` after each step."""
        return [s.rho_ledger for s in self.steps]

    def to_record(self):
        return {
            "mode": self.mode,
            "omega": list(self.omega),
            "A": np.real(self.A).tolist(),
            "A_final": np.real(self.A_final).tolist(),
            "steps": [s.to_record() for s in self.steps],
            "converged": self.converged,
            "gate_failed": self.gate_failed,
            "final_residual": self.final_residual,
            "final_residual_exact": self.final_residual_exact,
            "options": self.options,
            "verdict": self.verdict,
            "notes": self.notes,
            "bands": {"Z": self.Z.band, "Abar": self.Abar.band, "Psi": self.Psi.band},
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_record(), sort_keys=True, indent=2, default=_json_default)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "fbar_norm", "cauchy_gauge", "M", "kappa_j"])
            for s in self.steps:
                w.writerow([s.j, repr(s.fbar_norm), repr(s.cauchy_gauge),
                            " ".join(repr(float(x)) for x in s.M), repr(s.kappa_j)])


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return np.real(o).tolist()
    if isinstance(o, (Fraction, mpmath.mpf)):
        return str(o)
    raise TypeError(f"cannot serialize {type(o)}")


def _cauchy_norm(X, kprime):
    """``C^{k'}`` size of ``X``: grid norm for small ``k'``, else the coefficient
    majorant ``sum |X(m)| (2 pi |m|_1 / P)^{k'}`` (an upper bound)."""
    if kprime <= 4:
        return tf.ck_norm(X, kprime)
    norms = tf.mode_norm(X.mode_grid()).astype(float) * 2 * math.pi / X.period
    w = np.maximum(norms, 1.0) ** kprime
    op = np.linalg.norm(X.coeffs, ord=2, axis=(-2, -1))
    return float((w * op).sum())


def almost_reduce(A, F, omega, opts=None):
    """Run the iteration for ``A + F`` and return an :class:`AlmostReducibilityReport`."""
    opts = opts or DriverOptions()
    omega = np.asarray(omega, dtype=float)
    A = np.asarray(A, dtype=float)
    d, n = F.dim, F.n
    target = F.target
    group = tf.GROUP_OF.get(target, target)
    notes = []
    if opts.check_frequency:
        opts.dioph.check_dim(d)
        margin, m = frequency_dc_margin(omega, opts.dioph.tau, 200)
        if margin < opts.dioph.kappa:
            notes.append(f"frequency margin {margin:.6g} at {m} is below kappa {opts.dioph.kappa}")
    sched = Schedule(opts.k, Fraction(opts.C), opts.D, Fraction(opts.dioph.kappa),
                     Fraction(opts.dioph.tau))
    kprime = max(opts.k - 3 * opts.D - 2, 0)

    def approx(j):
        return analytic_approximant(F, j, opts.kernel).replace(target=target)

    Aconst = TorusMap.constant(A, d, 1, target)
    Fj = approx(1)
    Zbar = TorusMap.identity(d, n, 1, group)
    Abar, Fbar, Psi, Aj = Aconst, Fj, TorusMap.identity(d, n, 1, group), A.copy()
    steps = []
    gate_failed = None
    converged = False
    shift_total = 0.0

    if opts.mode == "paper":
        first = opts.smoothing_constant * tf.ck_norm(F, opts.k)
        if first > float(sched.eps_prime(2)):
            notes.append(f"first-step condition C' ||F||_k = {first:.3e} > eps'_2 = "
                         f"{float(sched.eps_prime(2)):.3e}")

    for j in range(1, opts.j_max + 1):
        Fn = approx(j + 1)
        dF = Fn - Fj
        if np.any(dF.coeffs):
            H = tf.multiply(tf.multiply(tf.invert(Zbar), dF), Zbar).replace(target=target) + Fbar
        else:
            H = Fbar
        r, r2 = 1.0 / (j + 1), 1.0 / (j + 2)
        params = StepParams(r, r2, opts.dioph, n=n, C=opts.C, D=opts.D, gate=opts.gate_kind,
                            kappa_mode=opts.kappa_mode, group=target, check_precondition=(j == 1),
                            gate_factor=opts.gate_factor)
        try:
            res = kam_step(Abar, H, Psi, Aj, params, omega, opts.residual_grid)
        except GateError as exc:
            gate_failed = j
            notes.append(f"gate failed at step {j}: {exc}")
            log.info("gate failed at step %d: %s", j, exc)
            break
        Znew = tf.multiply(Zbar, res.Z).replace(target=group)
        Znew = tf.trim_noise(Znew, 1e-17)
        gauge = _cauchy_norm(Znew - Zbar, kprime)
        shift_total += res.rotation_shift
        rho_j = constant_rotation(res.A) if n == 2 else float("nan")
        rho_prev = constant_rotation(Aj) if n == 2 else float("nan")
        tele = conjugation_residual(Znew, Aconst + Fn, res.Abar + res.Fbar, omega,
                                    opts.residual_grid)
        bound = float(sched.eps_prime(j + 1)) if opts.mode == "paper" else None
        steps.append(StepRecord(
            j=j, eps_tilde=res.eps_in, eps_out=res.eps_out, fbar_norm=res.eps_out, M=res.M,
            resonance=None if res.resonance is None else res.resonance.m,
            N=res.constants.N, R=res.constants.R, kappa_j=res.constants.kappa_pp,
            kappa_j_log10=res.constants.kappa_pp_log10, rho_A=rho_j,
            rho_ledger=rho_j + shift_total,
            rho_step_gap=abs(rho_j - rho_prev + res.rotation_shift),
            cauchy_gauge=gauge, residual_step=res.residual, residual_telescoped=tele,
            scheduled_bound=bound, psi_unchanged=res.psi_unchanged,
            diagnostics=res.diagnostics))
        log.info("step %d: eps~ %.3e -> %.3e, M=%s", j, res.eps_in, res.eps_out, res.M)
        Zbar, Abar, Fbar, Psi, Aj, Fj = Znew, res.Abar, res.Fbar, res.Psi, res.A, Fn
        nxt = approx(j + 2) - Fn
        # a resonant step is never the last one: stabilization must be observed
        if res.eps_out <= opts.target and not np.any(nxt.coeffs) and res.resonance is None:
            converged = True
            break

    Aconst_full = Aconst + F
    final = conjugation_residual(Zbar, Aconst_full, Abar, omega, opts.residual_grid)
    exact = conjugation_residual(Zbar, Aconst_full, Abar + Fbar, omega, opts.residual_grid)
    report = AlmostReducibilityReport(opts.mode, tuple(omega.tolist()), A, F, steps, Zbar, Abar, Fbar,
                                      Psi, Aj, converged, gate_failed, final, exact,
                                      opts.to_record(), notes=notes)
    report.verdict = reducibility_verdict(report, dioph=opts.dioph)
    return report


# -- verdict --------------------------------------------------------------------------

def stabilization_index(M_history, stable_window=1):
    """First index ``J`` (1-based) after which every recorded ``M`` vanishes,
    or ``None`` if fewer than ``stable_window`` trailing steps are resonance-free."""
    last = 0
    for i, M in enumerate(M_history, start=1):
        if any(x != 0 for x in M):
            last = i
    trailing = len(M_history) - last
    if not M_history or trailing < stable_window:
        return None
    return last + 1


def reducibility_verdict(report, rho=None, dioph=None, stable_window=1, classify_kwargs=None):
    """Finite-horizon verdict with the rotation-number cross-annotation.

    ``report`` is an :class:`AlmostReducibilityReport` or a plain mapping with
    keys ``M_history`` and ``converged`` (for synthetic histories).  ``rho``
    defaults to the closed-form ledger value ``rho(A_J) + 2 pi sum <M_l,omega>``.
    """
    if isinstance(report, AlmostReducibilityReport):
        history, converged, omega = report.M_history, report.converged, report.omega
        gate = report.gate_failed
        if rho is None and report.steps:
            rho = report.steps[-1].rho_ledger
        elif rho is None:
            rho = constant_rotation(report.A)
    else:
        history, converged = report["M_history"], report.get("converged", True)
        omega, gate = report.get("omega"), report.get("gate_failed")
    dioph = dioph or DiophantineParams(0.5, 1)
    J = stabilization_index(history, stable_window)
    if gate is not None:
        verdict = "gate_failed"
    elif J is not None and converged:
        verdict = "reducible"
    else:
        verdict = "almost_reducible"
    out = {"verdict": verdict, "stabilized_at": J, "horizon": len(history),
           "converged": converged, "resonant_steps": [i for i, M in enumerate(history, 1)
                                                      if any(x != 0 for x in M)]}
    if gate is not None:
        out["gate_failed_at"] = gate
    if rho is not None and omega is not None and math.isfinite(rho):
        cls = classify_rotation_number(rho, omega, dioph.tau, **(classify_kwargs or {}))
        out["rho"] = rho
        out["classification"] = cls.to_record()
        predicts = cls.verdict in ("diophantine", "rational")
        if not predicts:
            status = "undetermined"
        elif verdict == "reducible":
            status = "confirmed"
        elif verdict == "almost_reducible" and converged:
            status = "violated"
        else:
            status = "undetermined"
        out["prediction"] = status
        # an endlessly resonant history must not come with a certified diophantine rho
        out["consistent"] = not (verdict == "almost_reducible" and converged is not False
                                 and len(out["resonant_steps"]) > 1
                                 and cls.verdict == "diophantine")
    if isinstance(report, AlmostReducibilityReport) and verdict == "reducible":
        Zred = tf.multiply(report.Z, report.Psi).replace(target=report.Z.target)
        B = np.real(report.A_final) if report.Abar.is_real else report.A_final
        full = TorusMap.constant(report.A, report.F.dim, 1, report.F.target) + report.F
        out["B"] = np.real(B).tolist()
        out["Z_period"] = Zred.period
        out["reduction_residual"] = conjugation_residual(Zred, full, B, report.omega)
    return out

