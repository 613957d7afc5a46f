"""Arithmetic conditions on the frequency, on spectra and on rotation numbers.

Every verdict here is a finite-scan certificate over the modes with
``0 < |m|_1 <= N``; none of them is a number-theoretic proof.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2 * np.pi
GOLDEN = (np.sqrt(5.0) - 1) / 2
RESONANT_FLOOR = 1e-14


class ResonantFrequencyError(ValueError):
    """The frequency vector has an (almost) exact integer relation."""

    def __init__(self, m, value):
        super().__init__(f"|<m,omega>| = {value:.3e} at m = {tuple(int(x) for x in m)}")
        self.m = tuple(int(x) for x in m)
        self.value = value


@dataclass(frozen=True)
class DiophantineParams:
    kappa: float
    tau: float

    def __post_init__(self):
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")

    def check_dim(self, d):
        if self.tau < max(1, d - 1):
            raise ValueError(f"tau must be >= max(1, d-1) = {max(1, d - 1)}")
        return self


@dataclass(frozen=True)
class ResonanceIndex:
    """Integer mode ``m``; when attached to a period-2 conjugation it is the
    double-torus mode and the tracked half-integer index is ``m / 2``."""

    m: tuple
    divisor: float = 0.0
    gap: float = 0.0

    @property
    def magnitude(self):
        return int(sum(abs(x) for x in self.m))

    @property
    def half(self):
        return np.asarray(self.m, dtype=float) / 2


@dataclass(frozen=True)
class RotationClassification:
    verdict: str  # "diophantine" | "rational" | "undetermined"
    m: tuple | None
    kappa: float | None
    scan_bound: int
    tol: float
    tau: float
    witnesses: dict = field(default_factory=dict)

    def to_record(self):
        return {
            "verdict": self.verdict,
            "m": None if self.m is None else list(self.m),
            "kappa": self.kappa,
            "scan_bound": self.scan_bound,
            "tol": self.tol,
            "tau": self.tau,
            **self.witnesses,
        }


# -- mode enumeration -----------------------------------------------------------

def l1_ball(d, N, include_zero=False, half_space=False):
    """All ``m`` in Z^d with ``|m|_1 <= N``, sorted by ``(|m|_1, lexicographic)``.

    ``half_space`` keeps one representative of each pair ``{m, -m}`` (first
    nonzero coordinate positive).
    """
    out = list(_l1_blocks(d, N, half_space, include_zero))
    modes = np.concatenate(out) if out else np.zeros((0, d), dtype=np.int64)
    return modes[_order(modes)]


def _order(modes):
    keys = [modes[:, i] for i in range(modes.shape[1] - 1, -1, -1)]
    keys.append(np.abs(modes).sum(axis=1))
    return np.lexsort(keys)


def _l1_blocks(d, N, half_space=False, include_zero=False, block=1 << 20):
    """Yield arrays of modes covering the l1 ball, vectorized along the last axis."""
    N = int(N)
    last = np.arange(-N, N + 1)
    rows = []
    size = 0
    for prefix in _prefixes(d - 1, N):
        rem = N - sum(abs(x) for x in prefix)
        tail = last[(last >= -rem) & (last <= rem)]
        if half_space:
            nz = [x for x in prefix if x != 0]
            if nz:
                if nz[0] < 0:
                    continue
            else:
                tail = tail[tail > 0] if not include_zero else tail[tail >= 0]
        chunk = np.empty((tail.size, d), dtype=np.int64)
        chunk[:, :-1] = prefix
        chunk[:, -1] = tail
        if not include_zero and not any(prefix):
            chunk = chunk[chunk[:, -1] != 0]
        rows.append(chunk)
        size += chunk.shape[0]
        if size >= block:
            yield np.concatenate(rows)
            rows, size = [], 0
    if rows:
        yield np.concatenate(rows)


def _prefixes(k, N):
    if k == 0:
        yield ()
        return
    for first in range(-N, N + 1):
        for rest in _prefixes(k - 1, N - abs(first)):
            yield (first,) + rest


def _better(key_a, key_b):
    return key_b is None or key_a < key_b


def _key(value, m):
    return (value, int(np.abs(m).sum()), tuple(int(x) for x in m))


# -- frequency ------------------------------------------------------------------

def frequency_dc_margin(omega, tau, N_max):
    """Smallest ``|<m,omega>| |m|_1^tau`` over ``0 < |m|_1 <= N_max``.

    Returns ``(margin, m)``.  The scan uses one mode of each pair ``{m, -m}``.
    Raises :class:`ResonantFrequencyError` when some ``|<m,omega>| < 1e-14``;
    the reported offender is the smallest such mode.
    """
    if N_max < 1:
        raise ValueError("N_max must be >= 1")
    omega = np.asarray(omega, dtype=float)
    best = None
    resonant = None
    for modes in _l1_blocks(omega.size, N_max, half_space=True):
        dots = np.abs(modes @ omega)
        bad = dots < RESONANT_FLOOR
        if bad.any():
            cand = modes[bad][_order(modes[bad])[0]]
            k = _key(0.0, cand)[1:]
            if resonant is None or k < resonant[0]:
                resonant = (k, cand, float(dots[bad].min()))
        vals = dots * np.abs(modes).sum(axis=1).astype(float) ** tau
        i = _argmin_tiebreak(vals, modes)
        k = _key(float(vals[i]), modes[i])
        if _better(k, best):
            best = k
    if resonant is not None:
        raise ResonantFrequencyError(resonant[1], resonant[2])
    return best[0], best[2]


def _argmin_tiebreak(vals, modes):
    v = vals.min()
    idx = np.nonzero(vals == v)[0]
    if idx.size == 1:
        return int(idx[0])
    sub = modes[idx]
    return int(idx[_order(sub)[0]])


# -- second Melnikov condition ------------------------------------------------

def spectral_gaps(A):
    """Distinct nonnegative differences ``Im(a_j) - Im(a_k)`` of the spectrum."""
    ev = np.linalg.eigvals(np.asarray(A))
    im = np.imag(ev)
    diffs = {round(float(a - b), 15) for a in im for b in im if a - b >= -1e-15}
    return sorted(max(x, 0.0) for x in diffs)


def melnikov_violation(A, omega, kappa, tau, N):
    """First mode violating the DC^N_omega(kappa, tau) spectrum condition.

    Returns ``None`` when ``|Im a_j - Im a_k - 2 pi <m,omega>| >= kappa/|m|_1^tau``
    for every eigenvalue pair and every ``0 < |m|_1 <= N``; otherwise the
    violating :class:`ResonanceIndex` of smallest ``|m|_1`` (lexicographic tie
    break).  Each pair ``(j,k,m)`` is matched with ``(k,j,-m)``, so only
    nonnegative eigenvalue gaps are scanned; for the zero gap one mode of each
    ``{m,-m}`` pair is used.
    """
    N = int(np.floor(N))
    if N < 1:
        return None
    omega = np.asarray(omega, dtype=float)
    best = None
    for gap in spectral_gaps(A):
        half = gap == 0.0
        for modes in _l1_blocks(omega.size, N, half_space=half):
            norms = np.abs(modes).sum(axis=1).astype(float)
            div = np.abs(gap - TWO_PI * (modes @ omega))
            bad = div < kappa / norms ** tau
            if not bad.any():
                continue
            sub = modes[bad]
            j = _order(sub)[0]
            key = _key(0.0, sub[j])[1:]
            if best is None or key < best[0]:
                best = (key, ResonanceIndex(tuple(int(x) for x in sub[j]), float(div[bad][j]), gap))
    return None if best is None else best[1]


# -- rotation numbers -----------------------------------------------------------------

def classify_rotation_number(z, omega, tau, N_max=20, tol=1e-9, floor=1e-6):
    """Compare ``z`` with the frequency module ``{2 pi <m,omega>}``.

    ``rational(m)`` when ``|z - 2 pi <m,omega>| <= tol * max(1, |m|_1)`` for some
    ``|m|_1 <= N_max`` (smallest such m); otherwise ``diophantine`` with
    ``kappa' = min |z - 2 pi <m,omega>| |m|_1^tau`` over the scan if that exceeds
    ``floor``; otherwise ``undetermined``.
    """
    if N_max < 1 or tol <= 0:
        raise ValueError("need N_max >= 1 and tol > 0")
    omega = np.asarray(omega, dtype=float)
    d = omega.size
    if abs(z) <= tol:
        return RotationClassification("rational", (0,) * d, None, N_max, tol, tau)
    rational = None
    best = None
    for modes in _l1_blocks(d, N_max):
        norms = np.abs(modes).sum(axis=1).astype(float)
        dist = np.abs(z - TWO_PI * (modes @ omega))
        hit = dist <= tol * np.maximum(norms, 1.0)
        if hit.any():
            sub = modes[hit]
            j = _order(sub)[0]
            key = _key(0.0, sub[j])[1:]
            if rational is None or key < rational[0]:
                rational = (key, sub[j], float(dist[hit][j]))
        vals = dist * norms ** tau
        i = _argmin_tiebreak(vals, modes)
        k = _key(float(vals[i]), modes[i])
        if _better(k, best):
            best = k
    if rational is not None:
        m = tuple(int(x) for x in rational[1])
        return RotationClassification("rational", m, None, N_max, tol, tau,
                                      {"distance": rational[2]})
    kappa, m = best[0], best[2]
    verdict = "diophantine" if kappa > floor else "undetermined"
    return RotationClassification(verdict, m, kappa, N_max, tol, tau, {"floor": floor})


def half_module_label(z, omega, N_max=20, tol=1e-4):
    """Smallest ``m`` with ``|z - pi <m,omega>| <= tol`` (a point of half the module)."""
    omega = np.asarray(omega, dtype=float)
    if abs(z) <= tol:
        return (0,) * omega.size
    best = None
    for modes in _l1_blocks(omega.size, N_max):
        dist = np.abs(z - np.pi * (modes @ omega))
        hit = dist <= tol
        if hit.any():
            sub = modes[hit]
            j = _order(sub)[0]
            key = _key(0.0, sub[j])[1:]
            if best is None or key < best[0]:
                best = (key, tuple(int(x) for x in sub[j]))
    return None if best is None else best[1]
