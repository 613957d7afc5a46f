"""One step of the KAM conjugation scheme.

Starting from a system ``Abar + Fbar`` and a map ``Psi`` (on the double torus)
reducing ``Abar`` to the constant ``A``, a step

1. moves ``Fbar`` into the reduced frame, ``G = Psi^-1 Fbar Psi``, and absorbs
   its mean into the constant part;
2. checks the second Melnikov condition on the constant; when it fails, a
   rotation ``exp(pi <m,theta> J_A)`` on the double torus brings the spectrum
   close to zero and the resonance index ``m/2`` is recorded;
3. truncates ``G`` at order ``N`` and solves the linearized equation
   ``d_omega Y - [A, Y] = G`` mode by mode, skipping modes whose operator has
   a small singular value;
4. conjugates by ``exp(Y)``, evaluating the new remainder by its Lie series so
   the result keeps relative precision even when it is far below roundoff of
   the constant part;
5. returns to the original frame with ``Z' = Psi' exp(Y) Psi'^-1``.
"""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field

import mpmath
import numpy as np

from . import torus_fourier as tf
from .cocycle import conjugation_residual
from .diophantine import DiophantineParams, ResonanceIndex, melnikov_violation
from .torus_fourier import TorusMap

LIE_REL_TOL = 1e-17
LIE_MAX_TERMS = 40


class GateError(ValueError):
    """The perturbation is too large for the configured smallness gate."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}


class ParabolicConstantError(ValueError):
    """Resonance removal needs a diagonalizable constant with nonzero spectrum."""


class PreconditionError(ValueError):
    """``Psi`` does not reduce ``Abar`` to ``A``."""


# -- constants ------------------------------------------------------------------

@dataclass(frozen=True)
class StepConstants:
    N: float
    R: float
    kappa_pp: float
    kappa_pp_log10: float
    mode: str = "paper"

    def to_record(self):
        return {"N": self.N, "R": self.R, "kappa_pp": self.kappa_pp,
                "kappa_pp_log10": self.kappa_pp_log10, "kappa_mode": self.mode}


def truncation_order(r, eps):
    return abs(math.log(eps)) / (2 * math.pi * r)


def box_constant(n, width):
    """``R = 80^4 (n(n-1)/2+1)^2 / width^8`` with ``width = r - r''``."""
    q = Fraction(n * (n - 1), 2) + 1
    w = Fraction(width)
    return float(80 ** 4 * q ** 2 / w ** 8)


def step_constants(r, r2, eps, n, dioph, kappa_mode="paper"):
    """``N = |log eps|/(2 pi r)``, ``R = 80^4 (n(n-1)/2+1)^2 / (r-r'')^8`` and
    ``kappa'' = kappa / (n (8 R^{n(n-1)/2+1} N)^tau)``.

    With ``kappa_mode="adaptive"`` the Melnikov constant is replaced by
    ``kappa eps^{1/4}`` (the formula value is astronomically small at desk
    scale); ``N`` and ``R`` are unchanged.
    """
    if not 0 < r2 < r:
        raise ValueError("need 0 < r'' < r")
    if not 0 < eps:
        raise ValueError("eps must be positive")
    with mpmath.workdps(50):
        q = mpmath.mpf(n * (n - 1)) / 2 + 1
        R = mpmath.mpf(80) ** 4 * q ** 2 / (mpmath.mpf(r) - mpmath.mpf(r2)) ** 8
        N = abs(mpmath.log(eps)) / (2 * mpmath.pi * r)
        if N > 0:
            denom = n * (8 * R ** q * N) ** dioph.tau
            kpp = mpmath.mpf(dioph.kappa) / denom
            klog = float(mpmath.log10(kpp))
        else:
            kpp, klog = mpmath.mpf(dioph.kappa) / n, float(mpmath.log10(mpmath.mpf(dioph.kappa) / n))
    if kappa_mode == "adaptive":
        k_ad = dioph.kappa * eps ** 0.25
        return StepConstants(float(N), float(R), k_ad, math.log10(k_ad), "adaptive")
    if kappa_mode != "paper":
        raise ValueError(f"unknown kappa mode {kappa_mode!r}")
    return StepConstants(float(N), float(R), float(kpp), klog, "paper")


@dataclass(frozen=True)
class StepParams:
    r: float
    r2: float
    dioph: DiophantineParams
    n: int = 2
    C: float = 0.5
    D: int = 10
    gate: str = "practical"        # "paper" | "practical" | "none"
    kappa_mode: str = "paper"      # "paper" | "adaptive"
    group: str = "sl(2,R)"
    check_precondition: bool = True
    gate_factor: float = 1e-3     # practical gate: eps < gate_factor (r - r'')

    def __post_init__(self):
        if not 0 < self.r <= 0.5:
            raise ValueError("need 0 < r <= 1/2")
        if not 0 < self.r2 < self.r:
            raise ValueError("need 0 < r'' < r")
        if self.gate not in ("paper", "practical", "none"):
            raise ValueError(f"unknown gate {self.gate!r}")

    @property
    def window_ok(self):
        """Whether ``r''`` lies in ``[95 r / 96, r)``."""
        return self.r2 >= 95 * self.r / 96

    def gate_bound(self, normA):
        w = self.r - self.r2
        if self.gate == "paper":
            if self.group in ("o(2)", "u(n)"):
                return self.C * w ** self.D
            return self.C / (normA + 1) ** self.D * w ** self.D
        if self.gate == "practical":
            return self.gate_factor * w
        return math.inf


# -- building blocks ---------------------------------------------------------------

def constant_rotation(A):
    """Signed rotation number of a constant sl(2,R) matrix (0 unless elliptic)."""
    A = np.real_if_close(np.asarray(A))
    det = float(np.real(np.linalg.det(A)))
    if det <= 0:
        return 0.0
    return math.copysign(math.sqrt(det), float(np.real(A[1, 0])))


def rotation_generator(A):
    """Unit generator ``J_A = A / rho(A)``: commutes with A, squares to -Id and
    turns positively."""
    A = np.asarray(A)
    s = constant_rotation(A)
    if s == 0.0:
        raise ParabolicConstantError("constant is not elliptic")
    return np.real(A) / s


def ad_matrix(A):
    """Matrix of ``Y -> A Y - Y A`` on row-major ``vec(Y)``."""
    n = A.shape[0]
    eye = np.eye(n)
    return np.kron(A, eye) - np.kron(eye, A.T)


def solve_homological(A, G, omega, kappa_pp, tau, mode_norm_kind="l1"):
    """Solve ``d_omega Y - [A, Y] = G`` for the zero-mean part of ``G``.

    Modes whose operator ``2 pi i <m,omega> - ad_A`` has smallest singular
    value below ``kappa_pp / (2 |m|^tau)`` are declared resonant and skipped.

    Returns ``(Y, remainder, resonant_modes)`` with the exact coefficient
    identity ``d_omega Y - [A, Y] = G - remainder``; the mean of ``G`` is part
    of the remainder.
    """
    A = np.asarray(A)
    omega = np.asarray(omega, dtype=float)
    n = G.n
    modes = G.mode_grid().reshape(-1, G.dim)
    coeffs = G.coeffs.reshape(-1, n, n)
    live = np.abs(coeffs).reshape(len(coeffs), -1).max(axis=1) > 0
    norms = tf.mode_norm(modes, mode_norm_kind)
    live &= norms > 0
    Y = np.zeros_like(coeffs)
    rem = coeffs.copy()
    resonant = []
    idx = np.nonzero(live)[0]
    if idx.size:
        adA = ad_matrix(A)
        freq = (2j * np.pi / G.period) * (modes[idx] @ omega)
        L = freq[:, None, None] * np.eye(n * n) - adA[None]
        smin = np.linalg.svd(L, compute_uv=False)[:, -1]
        thresh = kappa_pp / (2 * norms[idx].astype(float) ** tau)
        ok = smin >= thresh
        if ok.any():
            rhs = coeffs[idx[ok]].reshape(-1, n * n, 1)
            sol = np.linalg.solve(L[ok], rhs).reshape(-1, n, n)
            Y[idx[ok]] = sol
            rem[idx[ok]] = 0
        resonant = [tuple(int(x) for x in modes[i]) for i in idx[~ok]]
    shape = G.coeffs.shape
    Ymap = G.replace(coeffs=Y.reshape(shape), aliasing=0.0)
    remmap = G.replace(coeffs=rem.reshape(shape))
    if G.is_real:
        Ymap = Ymap.replace(coeffs=tf._symmetrize(Ymap.coeffs)) if Ymap.band else Ymap
    return Ymap, remmap, resonant


def rotation_map(J, m, d):
    """``exp(pi <m,theta> J)`` as a period-2 map (J with J^2 = -Id)."""
    m = tuple(int(x) for x in m)
    if not any(m):
        return TorusMap.identity(d, J.shape[0], 1)
    eye = np.eye(J.shape[0])
    neg = tuple(-x for x in m)
    return TorusMap.from_modes({m: (eye - 1j * J) / 2, neg: (eye + 1j * J) / 2},
                               d=d, period=2, target="SL(2,R)")


def remove_resonance(A, m, omega):
    """Rotation ``Phi = exp(pi <m,theta> J_A)`` and shifted constant
    ``A - pi <m,omega> J_A``.

    ``m`` is an integer vector (or :class:`ResonanceIndex`); the tracked
    half-integer index is ``m / 2``.  Raises :class:`ParabolicConstantError`
    when ``A`` is not elliptic and ``m != 0``.
    """
    if isinstance(m, ResonanceIndex):
        m = m.m
    m = np.asarray(m, dtype=int)
    omega = np.asarray(omega, dtype=float)
    A = np.asarray(A)
    if not m.any():
        return TorusMap.identity(omega.size, A.shape[0], 1), A.copy()
    J = rotation_generator(A)
    Phi = rotation_map(J, m, omega.size)
    return Phi, np.real(A) - math.pi * float(m @ omega) * J


def _neg_ad(Y, X):
    """``-[Y, X] = X Y - Y X`` in coefficient space."""
    return tf.multiply(X, Y) - tf.multiply(Y, X)


def _series(Y, X, start, coef, r, scale):
    """``sum_{k >= start} coef(k) (-ad_Y)^k X`` until terms fall below ``scale``."""
    total = None
    term = X
    for k in range(1, LIE_MAX_TERMS + 1):
        term = tf.trim_noise(_neg_ad(Y, term), 1e-17)
        size = tf.analytic_norm(term, r)
        if k >= start:
            piece = term * coef(k)
            total = piece if total is None else _add(total, piece)
        if size * abs(coef(k)) <= scale or size == 0.0:
            break
    return total


def _add(a, b):
    K = max(a.band, b.band)
    out = a.with_band(K) + b.with_band(K)
    return out.replace(aliasing=a.aliasing + b.aliasing)


def lie_remainder(A, G, Y, remainder, omega, r):
    """New perturbation ``exp(-Y) (A + G) exp(Y) - exp(-Y) d_omega exp(Y) - A``.

    Uses ``d_omega Y - [A, Y] = G - remainder``; the linear part is exactly
    ``remainder`` and the higher Lie-series terms are summed on coefficients.
    """
    d, n = G.dim, G.n
    Am = TorusMap.constant(A, d, 1, G.target)
    dY = tf.derive_omega(Y, omega)
    base = max(tf.analytic_norm(remainder, r), tf.analytic_norm(Y, r) ** 2 * (1 + np.linalg.norm(A)),
               1e-300)
    scale = LIE_REL_TOL * base
    parts = [remainder]
    s1 = _series(Y, Am, 2, lambda k: 1.0 / math.factorial(k), r, scale)
    s2 = _series(Y, G, 1, lambda k: 1.0 / math.factorial(k), r, scale)
    s3 = _series(Y, dY, 1, lambda k: -1.0 / math.factorial(k + 1), r, scale)
    for s in (s1, s2, s3):
        if s is not None:
            parts.append(s)
    out = parts[0]
    for p in parts[1:]:
        out = _add(out, p)
    out = tf.trim_noise(out, 1e-18)
    return out.replace(target=G.target)


# -- the step ---------------------------------------------------------------------

@dataclass
class KamStepResult:
    Z: TorusMap
    Abar: TorusMap
    Fbar: TorusMap
    Psi: TorusMap
    A: np.ndarray
    eps_in: float
    eps_out: float
    constants: StepConstants
    resonance: ResonanceIndex | None = None
    M: tuple = ()
    rotation_shift: float = 0.0
    resonant_modes: list = field(default_factory=list)
    residual: float = float("nan")
    gate: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    psi_unchanged: bool = True

    def to_record(self):
        return {
            "eps_in": self.eps_in,
            "eps_out": self.eps_out,
            "constants": self.constants.to_record(),
            "resonance": None if self.resonance is None else list(self.resonance.m),
            "M": [float(x) for x in self.M],
            "rotation_shift": self.rotation_shift,
            "resonant_modes": [list(m) for m in self.resonant_modes],
            "A": np.real_if_close(self.A).tolist() if np.isrealobj(np.real_if_close(self.A)) else
                 [[str(x) for x in row] for row in self.A],
            "residual": self.residual,
            "gate": self.gate,
            "diagnostics": self.diagnostics,
            "psi_unchanged": self.psi_unchanged,
            "bands": {"Z": self.Z.band, "Fbar": self.Fbar.band, "Psi": self.Psi.band},
        }


def _real_const(A, like):
    return np.real(A) if like.is_real else A


def kam_step(Abar, Fbar, Psi, A, params, omega, residual_grid=64):
    """Apply one conjugation step; see the module docstring for the actions."""
    omega = np.asarray(omega, dtype=float)
    d, n = Fbar.dim, Fbar.n
    A = np.asarray(A)
    r, r2 = params.r, params.r2
    eps = tf.analytic_norm(Fbar, r)
    normA = float(np.linalg.norm(A, 2))
    bound = params.gate_bound(normA)
    gate = {"kind": params.gate, "eps": eps, "bound": bound, "passed": eps <= bound,
            "window_ok": params.window_ok}
    if eps > bound:
        raise GateError(f"eps = {eps:.3e} exceeds the {params.gate} gate {bound:.3e}", gate)
    if params.check_precondition:
        pre = conjugation_residual(Psi, Abar, TorusMap.constant(A, d, 1, Abar.target), omega,
                                   residual_grid)
        if pre > 1e-9 * max(1.0, normA):
            raise PreconditionError(f"Psi does not reduce Abar to A (residual {pre:.3e})")
    identity_psi = Psi.band == 0 and tf.is_identity(Psi, 0.0)

    if eps == 0.0:
        consts = step_constants(r, r2, 0.5, n, params.dioph, params.kappa_mode)
        Z = TorusMap.identity(d, n, 1, _group(Fbar))
        return KamStepResult(Z, Abar, Fbar, Psi, A.copy(), 0.0, 0.0, consts,
                             M=(0.0,) * d, residual=0.0, gate=gate,
                             diagnostics={"note": "zero perturbation"})

    consts = step_constants(r, r2, eps, n, params.dioph, params.kappa_mode)
    N = consts.N

    # 1. reduced frame and mean
    if identity_psi:
        G = Fbar
        Psi_inv = Psi
    else:
        Psi_inv = tf.invert(Psi)
        G = tf.multiply(tf.multiply(Psi_inv, Fbar.to_period(Psi.period)), Psi).to_period(1)
    G = G.replace(target=Fbar.target)
    A1 = _real_const(A + G.mean, Fbar)
    G0 = _zero_mean(G)

    # 2. Melnikov condition
    resonance = None
    M = (0.0,) * d
    Phi = None
    A2, G1 = A1, G0
    if n == 2 and params.group.startswith("sl(2"):
        hit = melnikov_violation(A1, omega, consts.kappa_pp, params.dioph.tau, math.floor(N))
        # m = 0 means the spectrum already sits in the window around 0
        if hit is not None and hit.gap > 0 and any(hit.m):
            s = constant_rotation(A1)
            if s != 0.0:
                m_eff = tuple(int(math.copysign(1, s)) * x for x in hit.m)
                resonance = ResonanceIndex(m_eff, hit.divisor, hit.gap)
                Phi, A_shift = remove_resonance(A1, m_eff, omega)
                Phi_inv = rotation_map(-rotation_generator(A1), m_eff, d)
                G1 = tf.multiply(tf.multiply(Phi_inv, G0.to_period(2)), Phi).to_period(1)
                G1 = G1.replace(target=Fbar.target)
                A2 = _real_const(A_shift + G1.mean, Fbar)
                G1 = _zero_mean(G1)
                M = tuple(x / 2 for x in m_eff)
    # 3. truncation and linearized equation
    head, tail = tf.truncate(G1, math.floor(N))
    Y, rem_head, resonant = solve_homological(A2, head, omega, consts.kappa_pp, params.dioph.tau)
    remainder = _add(rem_head, tail)
    # 4. conjugation by exp(Y)
    G_new = lie_remainder(A2, G1, Y, remainder, omega, r2)
    E = tf.exponentiate(Y, target=_group(Fbar)) if Y.band else TorusMap.identity(d, n, 1, _group(Fbar))

    # 5. back to the original frame
    Psi_new = Psi if Phi is None else tf.multiply(Psi, Phi).replace(target=_group(Fbar))
    psi_identity = Phi is None and identity_psi
    if psi_identity:
        Z = E
        Abar_new = TorusMap.constant(A2, d, 1, Fbar.target)
        Fbar_new = G_new
    else:
        Psi_new_inv = tf.invert(Psi_new)
        P = Psi_new.period
        Z = tf.multiply(tf.multiply(Psi_new, E.to_period(P)), Psi_new_inv).to_period(1)
        Z = Z.replace(target=_group(Fbar))
        A2m = TorusMap.constant(A2, d, P, Fbar.target)
        Abar_new = tf.multiply(tf.derive_omega(Psi_new, omega) + tf.multiply(Psi_new, A2m),
                               Psi_new_inv).to_period(1).replace(target=Fbar.target)
        Fbar_new = tf.multiply(tf.multiply(Psi_new, G_new.to_period(P)), Psi_new_inv).to_period(1)
        Fbar_new = Fbar_new.replace(target=Fbar.target)
        Z = tf.trim_noise(Z, 1e-17)
        Abar_new = tf.trim_noise(Abar_new, 1e-17)
    eps_out = tf.analytic_norm(Fbar_new, r2)
    lhs = Abar + Fbar
    rhs = _add(Abar_new, Fbar_new)
    residual = conjugation_residual(Z, lhs, rhs, omega, residual_grid)

    shift = 2 * math.pi * float(np.dot(M, omega))
    diag = _diagnostics(params, consts, eps, eps_out, A, A2, Z, Psi_new, normA, r2, resonance)
    diag["aliasing"] = Z.aliasing + Fbar_new.aliasing
    diag["rho_in"] = constant_rotation(A) if n == 2 else None
    diag["rho_out"] = constant_rotation(A2) if n == 2 else None
    if n == 2:
        diag["rotation_ledger_gap"] = abs(diag["rho_in"] - diag["rho_out"] - shift)
        diag["rotation_ledger_ok"] = diag["rotation_ledger_gap"] <= math.sqrt(eps)
    return KamStepResult(Z, Abar_new, Fbar_new, Psi_new, A2, eps, eps_out, consts, resonance, M,
                         shift, resonant, residual, gate, diag, Phi is None)


def _group(F):
    return tf.GROUP_OF.get(F.target, F.target)


def _zero_mean(G):
    c = np.array(G.coeffs)
    c[(G.band,) * G.dim] = 0
    return G.replace(coeffs=c)


def _diagnostics(params, consts, eps, eps_out, A, A_new, Z, Psi_new, normA, r2, resonance):
    """Measured quantities next to the forms of the step's conclusions.

    These are logged, never enforced: the constants involved are existential.
    """
    w = params.r - r2
    loge = abs(math.log(eps))
    out = {}
    out["eps_ratio_exponent"] = math.log(eps_out) / math.log(eps) if 0 < eps_out and eps != 1 else None
    out["eps_out_le_eps100"] = eps_out <= eps ** 100
    out["eps_out_le_eps2"] = eps_out <= eps ** 2 * 1e6
    psi_norm = tf.analytic_norm(Psi_new, r2)
    out["psi_norm"] = psi_norm
    out["psi_bound_form"] = (1 / eps_out) ** (w / 4) if eps_out > 0 else math.inf
    out["psi_bound_ok"] = psi_norm <= out["psi_bound_form"]
    normA_new = float(np.linalg.norm(A_new, 2))
    out["normA_out"] = normA_new
    out["normA_bound_ok"] = normA_new <= normA + loge * (1 / w) ** params.D
    zdist = tf.analytic_norm(Z - TorusMap.identity(Z.dim, Z.n, 1, Z.target), r2)
    out["Z_minus_id"] = zdist
    with mpmath.workdps(30):
        zb = (1 / mpmath.mpf(params.C)) * (mpmath.mpf((1 + normA) * loge) / w) ** params.D * \
            mpmath.mpf(eps) ** (1 - 4 * w)
    out["Z_bound_log10"] = float(mpmath.log10(zb))
    out["Z_bound_ok"] = zdist <= float(zb) if zb < mpmath.mpf(1e300) else True
    if resonance is not None:
        lim = consts.kappa_pp + math.sqrt(eps)
        out["resonant_normA_bound"] = lim
        out["resonant_normA_ok"] = normA_new <= lim
    return out
