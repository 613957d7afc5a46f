"""Continuous quasi-periodic Schrodinger cocycles.

For ``-y'' + V(theta + t omega) y = lambda y`` the vector ``(y', y)`` solves
``X' = (A_lambda + F) X`` with

    A_lambda = [[0, -lambda], [1, 0]],    F = [[0, V], [0, 0]].

For ``lambda > 2`` the constant change of variables
``Y = [[1/2, -sqrt(lambda)/2], [1/2, sqrt(lambda)/2]] X`` gives the normal form

    A~ = [[0, -sqrt(lambda)], [sqrt(lambda), 0]],
    F~ = V / (2 sqrt(lambda)) [[-1, 1], [-1, 1]],

which keeps the constant part a rotation.
"""
from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import torus_fourier as tf
from .cocycle import CocycleSystem, lyapunov_exponent, rotation_number
from .diophantine import half_module_label
from .driver import DriverOptions, almost_reduce
from .kam_step import constant_rotation
from .torus_fourier import TorusMap

INSIDE, OUTSIDE, OUTSIDE_UNTRANSFORMED = "inside", "outside", "outside-untransformed"


class RegimeWarning(UserWarning):
    """``lambda < -2``: the square-root transform is not real, the plain form is used."""


def potential(terms, d):
    """Real scalar potential ``sum_m c_m cos(2 pi <m,theta>) + s_m sin(2 pi <m,theta>)``.

    ``terms`` holds ``(m, c, s)`` triples; ``c`` or ``s`` may be None.
    """
    terms = [(m, None if c is None else [[c]], None if s is None else [[s]]) for m, c, s in terms]
    return TorusMap.trig(terms, d, 1, target="gl(n,R)")


def cosine_potential(amplitude, d):
    """``amplitude * sum_i cos(2 pi theta_i)``."""
    return potential([(tuple(int(i == k) for i in range(d)), amplitude, None) for k in range(d)], d)


def _scalar(V):
    if V.n != 1:
        raise ValueError("potential must be scalar (n = 1)")
    if V.period != 1:
        raise ValueError("potential must be 1-periodic")
    return V.coeffs[..., 0, 0]


def _embed(V, pattern):
    v = _scalar(V)
    c = v[..., None, None] * np.asarray(pattern, dtype=float)
    return TorusMap(c, 1, "sl(2,R)")


def transform_matrix(lam):
    """The constant change of variables used for ``lambda > 2``."""
    s = math.sqrt(lam)
    return np.array([[0.5, -s / 2], [0.5, s / 2]])


def regime_of(lam):
    if abs(lam) <= 2:
        return INSIDE
    return OUTSIDE if lam > 2 else OUTSIDE_UNTRANSFORMED


@dataclass
class SchrodingerSystem:
    V: TorusMap
    lam: float
    omega: tuple
    regime: str = ""

    def __post_init__(self):
        _scalar(self.V)
        self.omega = tuple(float(x) for x in self.omega)
        if self.V.dim != len(self.omega):
            raise ValueError("potential and frequency dimensions differ")
        self.regime = self.regime or regime_of(self.lam)

    def plain(self):
        """``A_lambda + F`` as printed, whatever the regime."""
        A = np.array([[0.0, -self.lam], [1.0, 0.0]])
        return CocycleSystem(A, _embed(self.V, [[0, 1], [0, 0]]), self.omega)

    def cocycle(self):
        if self.regime != OUTSIDE:
            return self.plain()
        s = math.sqrt(self.lam)
        A = np.array([[0.0, -s], [s, 0.0]])
        F = _embed(self.V, np.array([[-1.0, 1.0], [-1.0, 1.0]]) / (2 * s))
        return CocycleSystem(A, F, self.omega)


def build_cocycle(V, lam, omega):
    """Regime-appropriate cocycle; ``lambda < -2`` falls back to the plain form."""
    sysm = SchrodingerSystem(V, lam, omega)
    if sysm.regime == OUTSIDE_UNTRANSFORMED:
        warnings.warn(f"lambda = {lam} < -2: using the untransformed system", RegimeWarning,
                      stacklevel=2)
    return sysm.cocycle()


# -- reduction ----------------------------------------------------------------------

@dataclass
class SchrodingerReduction:
    system: SchrodingerSystem
    report: object
    rho_plain: object = None
    rho_transformed: object = None
    gap_label: tuple | None = None

    @property
    def verdict(self):
        return self.report.verdict

    def rho_agreement(self):
        """``|rho(A_lambda + F) - rho(A~ + F~)|`` and the combined error bound."""
        if self.rho_plain is None or self.rho_transformed is None:
            return None
        gap = abs(self.rho_plain.value - self.rho_transformed.value)
        return gap, self.rho_plain.error_bound + self.rho_transformed.error_bound

    def to_record(self):
        rec = {"lambda": self.system.lam, "regime": self.system.regime,
               "omega": list(self.system.omega), "reduction": self.report.to_record(),
               "gap_label": None if self.gap_label is None else list(self.gap_label)}
        if self.rho_plain is not None:
            rec["rho_plain"] = self.rho_plain.to_record()
        if self.rho_transformed is not None:
            rec["rho_transformed"] = self.rho_transformed.to_record()
        agree = self.rho_agreement()
        if agree is not None:
            rec["rho_transform_gap"], rec["rho_transform_bound"] = agree
        return rec


def reduce_schrodinger(V, lam, omega, opts=None, rho_T=2000.0, label_tol=1e-4, N_label=20):
    """Run the iteration on the regime-appropriate cocycle and compare rotation numbers.

    With ``rho_T`` set, ``rho(A_lambda + F)`` is integrated numerically and, in
    the outside regime, compared with ``rho(A~ + F~)``.
    """
    sysm = SchrodingerSystem(V, lam, omega)
    if sysm.regime == OUTSIDE_UNTRANSFORMED:
        warnings.warn(f"lambda = {lam} < -2: using the untransformed system", RegimeWarning,
                      stacklevel=2)
    coc = sysm.cocycle()
    rep = almost_reduce(coc.A, coc.F, omega, opts or DriverOptions())
    out = SchrodingerReduction(sysm, rep)
    if rho_T:
        out.rho_plain = rotation_number(sysm.plain(), T=rho_T)
        if sysm.regime == OUTSIDE:
            out.rho_transformed = rotation_number(coc, T=rho_T)
    rho = rep.steps[-1].rho_ledger if rep.steps else constant_rotation(coc.A)
    out.gap_label = half_module_label(rho, omega, N_label, label_tol)
    return out


# -- sweeps ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    lam: float
    rho: float
    rho_err: float
    lyapunov: float
    verdict: str
    gap_label: tuple | None = None

    def to_record(self):
        return {"lambda": self.lam, "rho": self.rho, "rho_err": self.rho_err,
                "lyapunov": self.lyapunov, "verdict": self.verdict,
                "gap_label": None if self.gap_label is None else list(self.gap_label)}


@dataclass
class Plateau:
    start: int
    stop: int          # inclusive
    value: float
    label: tuple | None

    def to_record(self):
        return {"start": self.start, "stop": self.stop, "value": self.value,
                "label": None if self.label is None else list(self.label)}


@dataclass
class SweepTable:
    rows: list
    plateaus: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def monotone(self):
        """``rho`` nondecreasing in ``lambda`` up to the per-row error bounds."""
        rho, err = self.column("rho"), self.column("rho_err")
        return bool(np.all(np.diff(rho) >= -(err[1:] + err[:-1])))

    def to_records(self):
        return {"rows": [r.to_record() for r in self.rows],
                "plateaus": [p.to_record() for p in self.plateaus],
                "settings": self.settings}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "rho", "rho_err", "lyapunov", "verdict", "gap_label"])
            for r in self.rows:
                lab = "" if r.gap_label is None else " ".join(str(x) for x in r.gap_label)
                w.writerow([repr(r.lam), repr(r.rho), repr(r.rho_err), repr(r.lyapunov),
                            r.verdict, lab])


def _sweep_row(args):
    V, lam, omega, T, reduce, opts = args
    sysm = SchrodingerSystem(V, lam, omega)
    plain = sysm.plain()
    rho = rotation_number(plain, T=T)
    le = lyapunov_exponent(plain, T=T)
    verdict = "skipped"
    if reduce:
        coc = sysm.cocycle()
        verdict = almost_reduce(coc.A, coc.F, omega, opts).verdict["verdict"]
    return SweepRow(float(lam), rho.value, rho.error_bound, float(le), verdict)


def detect_plateaus(rho, le, tol=1e-4, le_floor=5e-3, min_points=3):
    """Maximal runs of at least ``min_points`` consecutive grid points with
    ``|d rho| < tol`` between neighbours and Lyapunov exponent above ``le_floor``."""
    rho, le = np.asarray(rho), np.asarray(le)
    flat = le > le_floor
    runs, i, n = [], 0, len(rho)
    while i < n:
        if not flat[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and flat[j + 1] and abs(rho[j + 1] - rho[j]) < tol:
            j += 1
        if j - i + 1 >= min_points:
            runs.append((i, j))
        i = j + 1
    return runs


def worker_count():
    try:
        return max(1, int(os.environ.get("KAMREDUCE_THREADS", "1")))
    except ValueError:
        return 1


def sweep(V, lam_grid, omega, T=2000.0, reduce=True, opts=None, plateau_tol=1e-4,
          le_floor=5e-3, label_tol=1e-4, N_label=20, workers=None):
    """Rotation number, Lyapunov exponent, verdict and gap label along ``lam_grid``.

    Rows are independent; with ``workers > 1`` they run in a process pool and
    come back in grid order.
    """
    lam_grid = [float(x) for x in lam_grid]
    opts = opts or DriverOptions()
    jobs = [(V, lam, tuple(omega), T, reduce, opts) for lam in lam_grid]
    workers = workers or worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_sweep_row, jobs))
    else:
        rows = [_sweep_row(j) for j in jobs]
    table = SweepTable(rows, settings={"T": T, "plateau_tol": plateau_tol, "le_floor": le_floor,
                                       "label_tol": label_tol, "N_label": N_label,
                                       "reduce": reduce, "points": len(rows)})
    rho = table.column("rho")
    for a, b in detect_plateaus(rho, table.column("lyapunov"), plateau_tol, le_floor):
        value = float(np.mean(rho[a:b + 1]))
        label = half_module_label(value, omega, N_label, label_tol)
        table.plateaus.append(Plateau(a, b, value, label))
        for r in rows[a:b + 1]:
            r.gap_label = label
    return table
