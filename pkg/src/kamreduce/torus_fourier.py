"""Matrix-valued trigonometric polynomials on the torus T^d and the double torus 2T^d.

A :class:`TorusMap` stores a dense cube of Fourier coefficients indexed by the
integer modes ``m`` with ``|m_i| <= band``.  The map it represents is

    F(theta) = sum_m  F^(m) exp(2 pi i <m, theta> / period)

so a period-2 map carries the half-frequencies ``m/2`` of the double torus.
Nonlinear pointwise operations go through an oversampled uniform grid.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy.linalg import expm

MAX_BAND = 512
REAL_TARGETS = {"sl(2,R)", "SL(2,R)", "gl(n,R)", "GL(n,R)", "o(2)", "O(2)"}
GROUP_OF = {
    "sl(2,R)": "SL(2,R)",
    "sl(2,C)": "SL(2,C)",
    "gl(n,R)": "GL(n,R)",
    "gl(n,C)": "GL(n,C)",
    "u(n)": "U(n)",
    "o(2)": "O(2)",
}


class SingularMapError(ValueError):
    """A pointwise inverse was requested where the determinant vanishes."""


class TorusMap:
    """Immutable finite Fourier series with n x n matrix coefficients.

    Parameters
    ----------
    coeffs : array_like, shape ``(2K+1,)*d + (n, n)``
        Coefficient cube; entry ``[m_1+K, ..., m_d+K]`` is ``F^(m)``.
    period : {1, 2}
        1 for maps on T^d, 2 for maps on the double torus.
    target : str
        Algebra or group tag, e.g. ``"sl(2,R)"``.  Real-form tags enforce the
        reality condition ``F^(-m) = conj(F^(m))`` after grid operations.
    aliasing : float
        Accumulated estimate of the mass discarded by band caps.
    """

    __slots__ = ("coeffs", "period", "target", "aliasing")

    def __init__(self, coeffs, period=1, target="gl(n,C)", aliasing=0.0):
        c = np.array(coeffs, dtype=complex)
        if c.ndim < 3 or c.shape[-1] != c.shape[-2]:
            raise ValueError(f"coefficient array has bad shape {c.shape}")
        cube = c.shape[:-2]
        if len(set(cube)) != 1 or cube[0] % 2 != 1:
            raise ValueError(f"coefficient cube must be (2K+1,)*d, got {cube}")
        if period not in (1, 2):
            raise ValueError("period must be 1 or 2")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite coefficients")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "period", int(period))
        object.__setattr__(self, "target", str(target))
        object.__setattr__(self, "aliasing", float(aliasing))

    def __setattr__(self, name, value):
        raise AttributeError("TorusMap is immutable")

    def __reduce__(self):
        return (TorusMap, (np.array(self.coeffs), self.period, self.target, self.aliasing))

    # -- construction -----------------------------------------------------
    @classmethod
    def zeros(cls, d, n, band=0, period=1, target="gl(n,C)"):
        return cls(np.zeros((2 * band + 1,) * d + (n, n)), period, target)

    @classmethod
    def constant(cls, A, d, period=1, target="gl(n,C)"):
        A = np.atleast_2d(np.asarray(A))
        c = np.zeros((1,) * d + A.shape, dtype=complex)
        c[(0,) * d] = A
        return cls(c, period, target)

    @classmethod
    def identity(cls, d, n=2, period=1, target="SL(2,R)"):
        return cls.constant(np.eye(n), d, period, target)

    @classmethod
    def from_modes(cls, modes, d=None, n=None, period=1, target="gl(n,C)"):
        """Build from a ``{mode tuple: matrix}`` mapping."""
        items = [(tuple(int(x) for x in m), np.atleast_2d(np.asarray(v))) for m, v in modes.items()]
        if not items:
            if d is None or n is None:
                raise ValueError("empty mode map needs explicit d and n")
            return cls.zeros(d, n, 0, period, target)
        d = len(items[0][0]) if d is None else d
        n = items[0][1].shape[0] if n is None else n
        K = max(max(abs(x) for x in m) if m else 0 for m, _ in items)
        c = np.zeros((2 * K + 1,) * d + (n, n), dtype=complex)
        for m, v in items:
            if len(m) != d:
                raise ValueError(f"mode {m} has wrong dimension")
            c[tuple(x + K for x in m)] += v
        return cls(c, period, target)

    @classmethod
    def trig(cls, terms, d, n, target="sl(2,R)"):
        """Real map ``sum cos(2 pi <m,th>) C_m + sin(2 pi <m,th>) S_m``.

        ``terms`` is an iterable of ``(m, C, S)``; ``C`` or ``S`` may be None.
        """
        modes = {}
        for m, C, S in terms:
            m = tuple(int(x) for x in m)
            C = np.zeros((n, n)) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
            S = np.zeros((n, n)) if S is None else np.atleast_2d(np.asarray(S, dtype=float))
            if not any(m):
                modes[m] = modes.get(m, 0) + C
                continue
            neg = tuple(-x for x in m)
            modes[m] = modes.get(m, 0) + (C - 1j * S) / 2
            modes[neg] = modes.get(neg, 0) + (C + 1j * S) / 2
        return cls.from_modes(modes, d, n, 1, target)

    @classmethod
    def from_function(cls, f, d, band, n=None, period=1, target="gl(n,C)", grid=None):
        """Sample ``f(theta) -> (n, n)`` on a uniform grid and keep ``|m_i| <= band``."""
        G = grid or max(4 * band, 8)
        pts = grid_points(d, G, period)
        vals = np.array([f(p) for p in pts.reshape(-1, d)])
        if vals.ndim == 1:
            vals = vals[:, None, None]
        n = vals.shape[-1] if n is None else n
        vals = vals.reshape((G,) * d + (n, n))
        return from_grid(vals, band, period, target)

    # -- shape ------------------------------------------------------------
    @property
    def dim(self):
        return self.coeffs.ndim - 2

    @property
    def n(self):
        return self.coeffs.shape[-1]

    @property
    def band(self):
        return (self.coeffs.shape[0] - 1) // 2

    @property
    def is_real(self):
        return self.target in REAL_TARGETS

    def mode_grid(self):
        """Integer modes as an array of shape ``(2K+1,)*d + (d,)``."""
        r = np.arange(-self.band, self.band + 1)
        return np.stack(np.meshgrid(*([r] * self.dim), indexing="ij"), axis=-1)

    def coefficient(self, m):
        K = self.band
        if any(abs(x) > K for x in m):
            return np.zeros((self.n, self.n), dtype=complex)
        return self.coeffs[tuple(x + K for x in m)].copy()

    @property
    def mean(self):
        return self.coefficient((0,) * self.dim)

    def items(self, tol=0.0):
        """Nonzero ``(mode, coefficient)`` pairs in lexicographic mode order."""
        K = self.band
        mags = np.abs(self.coeffs).reshape(self.coeffs.shape[:-2] + (-1,)).max(axis=-1)
        for idx in zip(*np.nonzero(mags > tol)):
            yield tuple(int(i) - K for i in idx), self.coeffs[idx]

    def with_band(self, K):
        """Zero-pad or crop the coefficient cube to band ``K``."""
        K0, d = self.band, self.dim
        if K == K0:
            return self
        c = np.zeros((2 * K + 1,) * d + (self.n, self.n), dtype=complex)
        k = min(K, K0)
        src = tuple(slice(K0 - k, K0 + k + 1) for _ in range(d))
        dst = tuple(slice(K - k, K + k + 1) for _ in range(d))
        c[dst] = self.coeffs[src]
        return TorusMap(c, self.period, self.target, self.aliasing)

    def replace(self, coeffs=None, period=None, target=None, aliasing=None):
        return TorusMap(
            self.coeffs if coeffs is None else coeffs,
            self.period if period is None else period,
            self.target if target is None else target,
            self.aliasing if aliasing is None else aliasing,
        )

    def trim(self, tol=0.0):
        """Shrink the band while the discarded shells carry at most ``tol`` mass."""
        K = self.band
        if K == 0:
            return self
        fro = np.sqrt((np.abs(self.coeffs) ** 2).sum(axis=(-2, -1)))
        box = np.abs(self.mode_grid()).max(axis=-1)
        shell = np.bincount(box.ravel(), weights=fro.ravel(), minlength=K + 1)
        tail = np.cumsum(shell[::-1])[::-1]  # tail[k] = mass with box >= k
        newK = K
        while newK > 0 and tail[newK] <= tol:
            newK -= 1
        if newK == K:
            return self
        dropped = tail[newK + 1]
        return self.with_band(newK).replace(aliasing=self.aliasing + dropped)

    # -- period conversions ------------------------------------------------
    def to_period(self, period):
        if period == self.period:
            return self
        if self.period == 1 and period == 2:
            K, d = self.band, self.dim
            c = np.zeros((4 * K + 1,) * d + (self.n, self.n), dtype=complex)
            c[tuple(slice(0, None, 2) for _ in range(d))] = self.coeffs
            return TorusMap(c, 2, self.target, self.aliasing)
        odd = self.odd_part_mass()
        K, d = self.band, self.dim
        # even modes start at index 0 when K is even, at index 1 otherwise
        c = self.coeffs[tuple(slice(K % 2, None, 2) for _ in range(d))]
        return TorusMap(c, 1, self.target, self.aliasing + odd)

    def odd_part_mass(self):
        """Frobenius mass on modes with some odd component (period-2 maps)."""
        parity = (self.mode_grid() % 2).any(axis=-1)
        return float(np.sqrt((np.abs(self.coeffs[parity]) ** 2).sum(axis=(-2, -1))).sum())

    # -- arithmetic in coefficient space -----------------------------------
    def _aligned(self, other):
        if not isinstance(other, TorusMap):
            other = TorusMap.constant(np.asarray(other), self.dim, self.period, self.target)
        if other.dim != self.dim or other.n != self.n:
            raise ValueError("incompatible torus maps")
        P = max(self.period, other.period)
        a, b = self.to_period(P), other.to_period(P)
        K = max(a.band, b.band)
        return a.with_band(K), b.with_band(K)

    def __add__(self, other):
        a, b = self._aligned(other)
        tgt = a.target if a.target == b.target else _combined_target(a, b)
        return TorusMap(a.coeffs + b.coeffs, a.period, tgt, a.aliasing + b.aliasing)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self._aligned(other)
        tgt = a.target if a.target == b.target else _combined_target(a, b)
        return TorusMap(a.coeffs - b.coeffs, a.period, tgt, a.aliasing + b.aliasing)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return self.replace(coeffs=-self.coeffs)

    def __mul__(self, s):
        if isinstance(s, TorusMap):
            return multiply(self, s)
        return self.replace(coeffs=self.coeffs * s, aliasing=self.aliasing * abs(s))

    __rmul__ = __mul__

    def left(self, A):
        """Constant-matrix product ``A F``, exact in coefficients."""
        return self.replace(coeffs=np.einsum("ij,...jk->...ik", A, self.coeffs),
                            target=_target_after_const(self, A))

    def right(self, A):
        return self.replace(coeffs=np.einsum("...ij,jk->...ik", self.coeffs, A),
                            target=_target_after_const(self, A))

    def commutator_const(self, A):
        """``[A, F] = A F - F A`` for a constant matrix ``A``."""
        c = np.einsum("ij,...jk->...ik", A, self.coeffs) - np.einsum("...ij,jk->...ik", self.coeffs, A)
        return self.replace(coeffs=c)

    def __call__(self, theta):
        return evaluate(self, theta)

    def __repr__(self):
        return (f"TorusMap(d={self.dim}, n={self.n}, band={self.band}, period={self.period}, "
                f"target={self.target!r})")


def _combined_target(a, b):
    return "gl(n,R)" if a.is_real and b.is_real else "gl(n,C)"


def _target_after_const(F, A):
    if F.is_real and not np.any(np.imag(A)):
        return F.target
    return "gl(n,C)"


# -- mode norms ---------------------------------------------------------------

def mode_norm(modes, kind="l1"):
    """|m| for integer modes along the last axis: ``l1`` (default) or ``sup``."""
    modes = np.asarray(modes)
    if kind == "l1":
        return np.abs(modes).sum(axis=-1)
    if kind == "sup":
        return np.abs(modes).max(axis=-1)
    raise ValueError(f"unknown mode norm {kind!r}")


# -- evaluation and grids -------------------------------------------------------

def evaluate(F, theta, keep_complex=False):
    """Value of the trigonometric sum at one point or a stack of points."""
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    pts = np.atleast_2d(theta)
    if pts.shape[-1] != F.dim:
        raise ValueError("point dimension does not match map")
    modes, vals = [], []
    for m, c in F.items():
        modes.append(m)
        vals.append(c)
    side = 2 * F.band + 1
    if not modes:
        out = np.zeros((len(pts), F.n, F.n), dtype=complex)
    elif F.dim > 1 and 4 * len(modes) >= side ** F.dim:
        # dense: one exponential per (point, axis, frequency), outer products, one matmul
        ks = np.arange(-F.band, F.band + 1)
        axis = np.exp(2j * np.pi * pts[:, :, None] * ks / F.period)
        phase = axis[:, 0]
        for i in range(1, F.dim):
            phase = (phase[:, :, None] * axis[:, i, None, :]).reshape(len(pts), -1)
        out = (phase @ F.coeffs.reshape(side ** F.dim, F.n * F.n)).reshape(len(pts), F.n, F.n)
    else:
        modes = np.array(modes, dtype=float)
        vals = np.array(vals)
        phase = np.exp(2j * np.pi * (pts @ modes.T) / F.period)
        out = np.einsum("pm,mij->pij", phase, vals)
    if F.is_real and not keep_complex:
        out = out.real
    return out[0] if single else out


def grid_points(d, G, period=1):
    r = period * np.arange(G) / G
    return np.stack(np.meshgrid(*([r] * d), indexing="ij"), axis=-1)


def _fast_len(G):
    G = sfft.next_fast_len(int(G))
    return G + (G % 2)


def grid_values(F, G):
    """Values on the uniform ``G^d`` grid of ``[0, period)^d``."""
    K, d = F.band, F.dim
    if G < 2 * K + 1:
        raise ValueError(f"grid {G} too coarse for band {K}")
    idx = np.arange(-K, K + 1) % G
    buf = np.zeros((G,) * d + (F.n, F.n), dtype=complex)
    buf[np.ix_(*([idx] * d))] = F.coeffs
    vals = sfft.ifftn(buf, axes=tuple(range(d)), norm="forward")
    return vals.real if F.is_real else vals


def from_grid(values, band, period=1, target="gl(n,C)", prior_aliasing=0.0):
    """Fourier coefficients of grid samples, keeping ``|m_i| <= band``.

    The Frobenius mass of the discarded grid modes is added to ``aliasing``.
    """
    vals = np.asarray(values)
    d = vals.ndim - 2
    G = vals.shape[0]
    if target in REAL_TARGETS:
        vals = vals.real
    c = sfft.fftn(vals, axes=tuple(range(d)), norm="forward")
    band = min(band, (G - 1) // 2)
    idx = np.arange(-band, band + 1) % G
    kept = c[np.ix_(*([idx] * d))]
    total = np.sqrt((np.abs(c) ** 2).sum(axis=(-2, -1))).sum()
    inside = np.sqrt((np.abs(kept) ** 2).sum(axis=(-2, -1))).sum()
    dropped = max(float(total - inside), 0.0)
    if target in REAL_TARGETS:
        kept = _symmetrize(kept)
    return TorusMap(kept, period, target, prior_aliasing + dropped)


def _symmetrize(c):
    d = c.ndim - 2
    flipped = np.conj(np.flip(c, axis=tuple(range(d))))
    return 0.5 * (c + flipped)


def _grid_for(band):
    return _fast_len(max(4 * band, 8))


# -- calculus and norms ---------------------------------------------------------

def derive_omega(F, omega):
    """Derivative along the flow ``theta -> theta + t omega``."""
    omega = np.asarray(omega, dtype=float)
    mult = (2j * np.pi / F.period) * (F.mode_grid() @ omega)
    return F.replace(coeffs=F.coeffs * mult[..., None, None])


def partial(F, beta):
    """Mixed partial derivative with multi-index ``beta``."""
    m = F.mode_grid().astype(float)
    mult = np.ones(m.shape[:-1], dtype=complex)
    for i, b in enumerate(beta):
        if b:
            mult = mult * (2j * np.pi * m[..., i] / F.period) ** b
    return F.replace(coeffs=F.coeffs * mult[..., None, None])


def _opnorms(c):
    if c.shape[-1] == 1:
        return np.abs(c[..., 0, 0])
    return np.linalg.norm(c, ord=2, axis=(-2, -1))


@dataclass(frozen=True)
class NormSpec:
    """Either the analytic strip norm (``kind='analytic'``, half-width ``r``)
    or the C^k norm (``kind='ck'``, order ``k``)."""

    kind: str
    r: float = 0.0
    k: int = 0

    @classmethod
    def analytic(cls, r):
        if r <= 0:
            raise ValueError("strip half-width must be positive")
        return cls("analytic", r=float(r))

    @classmethod
    def ck(cls, k):
        if k < 0:
            raise ValueError("differentiability order must be >= 0")
        return cls("ck", k=int(k))


def analytic_norm(F, r, mode_norm_kind="l1"):
    """Weighted coefficient majorant ``sum_m ||F^(m)|| exp(2 pi r |m| / period)``."""
    w = np.exp(2 * np.pi * r * mode_norm(F.mode_grid(), mode_norm_kind) / F.period)
    return float((_opnorms(F.coeffs) * w).sum())


def multi_indices(d, k):
    """All multi-indices ``beta`` in N^d with ``|beta| <= k``."""
    out = []
    for total in range(k + 1):
        for combo in itertools.combinations_with_replacement(range(d), total):
            beta = [0] * d
            for i in combo:
                beta[i] += 1
            out.append(tuple(beta))
    return out


def ck_norm(F, k, grid=None):
    """max over ``|beta| <= k`` of the grid sup of the operator norm of the beta-partial."""
    G = grid or _grid_for(F.band)
    best = 0.0
    for beta in multi_indices(F.dim, k):
        vals = grid_values(partial(F, beta), G)
        best = max(best, float(_opnorms(vals).max()))
    return best


def norm(F, spec, mode_norm_kind="l1"):
    if spec.kind == "analytic":
        return analytic_norm(F, spec.r, mode_norm_kind)
    if spec.kind == "ck":
        return ck_norm(F, spec.k)
    raise ValueError(f"unknown norm kind {spec.kind!r}")


def sup_norm(F, grid=None):
    G = grid or _grid_for(F.band)
    return float(_opnorms(grid_values(F, G)).max())


def truncate(F, N, mode_norm_kind="l1"):
    """Split ``F`` into the modes with ``|m| <= N`` and the tail."""
    if N < 0:
        raise ValueError("truncation order must be >= 0")
    keep = mode_norm(F.mode_grid(), mode_norm_kind) <= N
    head = np.where(keep[..., None, None], F.coeffs, 0)
    tail = np.where(keep[..., None, None], 0, F.coeffs)
    K = min(F.band, int(np.floor(N)))
    return F.replace(coeffs=head).with_band(K), F.replace(coeffs=tail, aliasing=0.0)


# -- pointwise algebra ------------------------------------------------------------

def _promote(a, b):
    P = max(a.period, b.period)
    return a.to_period(P), b.to_period(P)


def multiply(a, b, band=None, target=None):
    """Pointwise matrix product via an oversampled grid."""
    if a.dim != b.dim or a.n != b.n:
        raise ValueError("incompatible torus maps")
    a, b = _promote(a, b)
    full = a.band + b.band
    K = min(full if band is None else band, MAX_BAND)
    G = _fast_len(max(4 * K, 2 * full + 2, 8))
    vals = np.matmul(grid_values(a, G), grid_values(b, G))
    tgt = target or _combined_target(a, b)
    return trim_noise(from_grid(vals, K, a.period, tgt, a.aliasing + b.aliasing))


def commutator(a, b, band=None):
    return multiply(a, b, band) - multiply(b, a, band)


def conjugate(P, F, Pinv=None, band=None, target=None):
    """``P^{-1} F P`` (or ``Pinv F P`` when the inverse is supplied)."""
    Pinv = invert(P) if Pinv is None else Pinv
    out = multiply(multiply(Pinv, F), P, band=band, target=target or F.target)
    return out


def _inv_values(v):
    if v.shape[-1] == 2:
        det = v[..., 0, 0] * v[..., 1, 1] - v[..., 0, 1] * v[..., 1, 0]
        adj = np.empty_like(v)
        adj[..., 0, 0] = v[..., 1, 1]
        adj[..., 1, 1] = v[..., 0, 0]
        adj[..., 0, 1] = -v[..., 0, 1]
        adj[..., 1, 0] = -v[..., 1, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            return adj / det[..., None, None], det
    det = np.linalg.det(v)
    if np.min(np.abs(det)) < 1e-10:
        return np.full_like(v, np.nan), det
    return np.linalg.inv(v), det


def _exp_values(v):
    if v.shape[-1] == 2:
        tr = (v[..., 0, 0] + v[..., 1, 1]) / 2
        w = v.copy()
        w[..., 0, 0] -= tr
        w[..., 1, 1] -= tr
        delta = -(w[..., 0, 0] * w[..., 1, 1] - w[..., 0, 1] * w[..., 1, 0])
        s = np.sqrt(delta.astype(complex))
        small = np.abs(s) < 1e-4
        s2 = np.where(small, 1.0, s)
        # sinh(s)/s with a series near zero
        sh = np.where(small, 1 + delta / 6 + delta ** 2 / 120 + delta ** 3 / 5040, np.sinh(s2) / s2)
        ch = np.where(small, 1 + delta / 2 + delta ** 2 / 24 + delta ** 3 / 720, np.cosh(s2))
        out = sh[..., None, None] * w
        out[..., 0, 0] += ch
        out[..., 1, 1] += ch
        out = out * np.exp(tr)[..., None, None]
        return out if np.iscomplexobj(v) else out.real
    return expm(v)


def _shell_profile(F):
    """Largest Frobenius coefficient norm on each box shell ``max|m_i| = s``."""
    fro = np.sqrt((np.abs(F.coeffs) ** 2).sum(axis=(-2, -1)))
    box = np.abs(F.mode_grid()).max(axis=-1)
    prof = np.zeros(F.band + 1)
    np.maximum.at(prof, box.ravel(), fro.ravel())
    return prof


def trim_noise(F, rel=1e-16):
    """Drop outer shells whose coefficients are all below ``rel`` times the largest one."""
    prof = _shell_profile(F)
    top = prof.max()
    if top == 0.0:
        return F.with_band(0)
    live = np.nonzero(prof > rel * top)[0]
    return F.trim(np.inf) if live.size == 0 else _crop(F, int(live[-1]))


def _crop(F, K):
    if K >= F.band:
        return F
    fro = np.sqrt((np.abs(F.coeffs) ** 2).sum(axis=(-2, -1)))
    box = np.abs(F.mode_grid()).max(axis=-1)
    dropped = float(fro[box > K].sum())
    return F.with_band(K).replace(aliasing=F.aliasing + dropped)


def _nonlinear(a, fn, band, target, rel_tol=1e-15):
    """Apply a pointwise matrix function and pick the output band adaptively.

    The band doubles until the coefficients have decayed below ``rel_tol`` of
    the largest one well inside the kept box.
    """
    K = band if band is not None else max(2 * a.band, 4)
    while True:
        K = min(K, MAX_BAND)
        G = _grid_for(K)
        out = from_grid(fn(grid_values(a, G)), K, a.period, target, a.aliasing)
        prof = _shell_profile(out)
        live = np.nonzero(prof > rel_tol * prof.max())[0] if prof.max() > 0 else np.array([0])
        last = int(live[-1])
        if band is not None or K >= MAX_BAND or last <= (3 * K) // 4:
            return _crop(out, last)
        K *= 2


def invert(a, band=None, target=None):
    """Pointwise inverse; raises :class:`SingularMapError` if ``|det| < 1e-10`` on the grid."""
    if a.band == 0:
        c0 = a.mean
        if abs(np.linalg.det(c0)) < 1e-10:
            raise SingularMapError("constant map is singular")
        return TorusMap.constant(np.linalg.inv(c0), a.dim, a.period, target or a.target)

    def fn(v):
        inv, det = _inv_values(v)
        if np.min(np.abs(det)) < 1e-10:
            raise SingularMapError(f"determinant {np.min(np.abs(det)):.3e} on the sampling grid")
        return inv

    return _nonlinear(a, fn, band, target or a.target)


def exponentiate(a, band=None, target=None):
    """Pointwise matrix exponential."""
    tgt = target or GROUP_OF.get(a.target, a.target)
    if a.band == 0:
        v = a.mean
        v = v.real if a.is_real else v
        return TorusMap.constant(_exp_values(v[None])[0], a.dim, a.period, tgt)
    return _nonlinear(a, _exp_values, band, tgt)


def pointwise(a, b=None, op="multiply", **kw):
    """Dispatch for ``add``, ``multiply``, ``invert`` and ``exponentiate``."""
    if op == "add":
        return a + b
    if op == "multiply":
        return multiply(a, b, **kw)
    if op == "invert":
        return invert(a, **kw)
    if op == "exponentiate":
        return exponentiate(a, **kw)
    raise ValueError(f"unknown pointwise op {op!r}")


def is_identity(F, tol=0.0):
    c = F.coeffs.copy()
    c[(F.band,) * F.dim] -= np.eye(F.n)
    return float(np.abs(c).max()) <= tol


# -- serialization ------------------------------------------------------------------

def dumps(F):
    """Structured-text form: a header block then one line per nonzero mode."""
    lines = [
        "# torusmap",
        f"dim {F.dim}",
        f"period {F.period}",
        f"target {F.target}",
        f"n {F.n}",
        f"band {F.band}",
        f"aliasing {F.aliasing!r}",
        "---",
    ]
    for m, c in F.items():
        parts = [str(x) for x in m]
        for z in c.ravel():
            parts += [repr(float(z.real)), repr(float(z.imag))]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def loads(text):
    header, _, body = text.partition("---\n")
    meta = {}
    for line in header.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, val = line.partition(" ")
        meta[key] = val.strip()
    d, n, K = int(meta["dim"]), int(meta["n"]), int(meta["band"])
    c = np.zeros((2 * K + 1,) * d + (n, n), dtype=complex)
    for line in body.splitlines():
        if not line.strip():
            continue
        tok = line.split()
        m = tuple(int(x) + K for x in tok[:d])
        nums = [float(x) for x in tok[d:]]
        c[m] = (np.array(nums[0::2]) + 1j * np.array(nums[1::2])).reshape(n, n)
    return TorusMap(c, int(meta["period"]), meta["target"], float(meta.get("aliasing", 0.0)))
