"""Analytic approximation of finitely smooth data by a smooth Fourier cutoff.

``F_j`` keeps the modes of ``F`` with weight ``u(|m|_1 / (c_band j))`` where
``u`` is a C-infinity step equal to 1 on ``[0, 1/2]`` and 0 on ``[1, inf)``.
The multiplier does not depend on the declared regularity ``k``; the
constants in the three approximation bounds are measured, not assumed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import torus_fourier as tf
from .torus_fourier import TorusMap


def _bump(t):
    out = np.zeros_like(t, dtype=float)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(x):
    """C-infinity cutoff: 1 for ``x <= 1/2``, 0 for ``x >= 1``, monotone between."""
    x = np.asarray(x, dtype=float)
    s = 2.0 * x - 1.0
    a, b = _bump(1.0 - s), _bump(s)
    with np.errstate(invalid="ignore"):
        u = a / (a + b)
    return np.where(x <= 0.5, 1.0, np.where(x >= 1.0, 0.0, u))


@dataclass(frozen=True)
class SmoothingKernel:
    c_band: float = 2.0

    def band(self, j):
        return self.c_band * j

    def weights(self, F, j):
        return smooth_step(tf.mode_norm(F.mode_grid()) / self.band(j))


def analytic_approximant(F, j, kernel=None):
    """The ``j``-th analytic approximant ``F_j`` (strip half-width ``1/j``)."""
    if j < 1:
        raise ValueError("j must be >= 1")
    if F.period != 1:
        raise ValueError("smoothing acts on 1-periodic maps")
    kernel = kernel or SmoothingKernel()
    w = kernel.weights(F, j)
    out = F.replace(coeffs=F.coeffs * w[..., None, None])
    K = min(F.band, int(np.floor(kernel.band(j))))
    return out.with_band(K)


@dataclass(frozen=True)
class SuiteRow:
    j: int
    approx_err: float   # ||F_j - F||_k
    strip_norm: float   # |F_j|_{1/j}
    step_norm: float    # |F_{j+1} - F_j|_{1/(j+1)}
    c_strip: float      # |F_j|_{1/j} / ||F||_k
    c_step: float       # |F_{j+1} - F_j|_{1/(j+1)} j^k / ||F||_k
    c_running: float    # max over l <= j of max(c_strip, c_step)

    @property
    def c_implied(self):
        return max(self.c_strip, self.c_step)


@dataclass
class SuiteReport:
    k: int
    norm_k: float
    kernel: SmoothingKernel
    rows: list = field(default_factory=list)

    @property
    def constant(self):
        """Smallest ``C'`` making the last two bounds hold for every tabulated j."""
        return self.rows[-1].c_running if self.rows else 0.0

    @property
    def drift(self):
        """Growth of the operative constant after the first row (1 means no growth)."""
        if not self.rows or self.rows[0].c_running == 0:
            return 1.0
        return self.constant / self.rows[0].c_running

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def to_records(self):
        keys = ("j", "approx_err", "strip_norm", "step_norm", "c_strip", "c_step", "c_running")
        return [{k: getattr(r, k) for k in keys} for r in self.rows]

    def to_csv(self, path):
        recs = self.to_records()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(recs[0]) if recs else ["j"])
            for rec in recs:
                w.writerow([rec["j"]] + [repr(float(v)) for k, v in rec.items() if k != "j"])


def suite_report(F, k, J, kernel=None, norm_k=None):
    """Tabulate the three approximation quantities for ``j = 2..J``.

    ``norm_k`` may be passed to reuse a precomputed ``||F||_k``.
    """
    if J < 2:
        raise ValueError("J must be >= 2")
    kernel = kernel or SmoothingKernel()
    nk = tf.ck_norm(F, k) if norm_k is None else norm_k
    rep = SuiteReport(k, nk, kernel)
    running = 0.0
    Fj = analytic_approximant(F, 2, kernel)
    for j in range(2, J + 1):
        Fn = analytic_approximant(F, j + 1, kernel)
        diff_k = _difference(Fj, F)
        approx = tf.ck_norm(diff_k, k) if np.any(diff_k.coeffs) else 0.0
        strip = tf.analytic_norm(Fj, 1.0 / j)
        step = tf.analytic_norm(_difference(Fn, Fj), 1.0 / (j + 1))
        if nk > 0:
            c_strip, c_step = strip / nk, step * float(j) ** k / nk
        else:
            c_strip = c_step = 0.0
        running = max(running, c_strip, c_step)
        rep.rows.append(SuiteRow(j, approx, strip, step, c_strip, c_step, running))
        Fj = Fn
    return rep


def _difference(a, b):
    K = max(a.band, b.band)
    return a.with_band(K) - b.with_band(K)


def decay_class_corpus(seed=0, k=10, dims=((1, 200), (1, 200), (1, 200), (2, 24), (2, 24))):
    """Random sl(2,R)-valued maps with coefficient norms ``~ |m|_1^{-(k+2)}``.

    Each entry of ``dims`` is ``(d, band)``.  The same seed gives the same corpus.
    """
    rng = np.random.default_rng(seed)
    out = []
    for d, band in dims:
        shape = (2 * band + 1,) * d
        grid = np.stack(np.meshgrid(*[np.arange(-band, band + 1)] * d, indexing="ij"), -1)
        l1 = np.abs(grid).sum(-1)
        c = rng.normal(size=shape + (2, 2)) + 1j * rng.normal(size=shape + (2, 2))
        c[..., 1, 1] = -c[..., 0, 0]
        with np.errstate(divide="ignore"):
            scale = np.where(l1 > 0, np.maximum(l1, 1).astype(float) ** -(k + 2), 0.0)
        c *= scale[..., None, None]
        c = 0.5 * (c + np.conj(np.flip(c, axis=tuple(range(d)))))
        c[(band,) * d] = rng.normal() * np.array([[1.0, 0.0], [0.0, -1.0]]) + \
            rng.normal() * np.array([[0.0, 1.0], [0.0, 0.0]])
        out.append(TorusMap(c, 1, "sl(2,R)"))
    return out
