"""Direct dynamics of the linear system ``X' = (A + F(theta + t omega)) X``.

Integration uses the classical fourth-order Runge-Kutta step written as a
per-step propagator matrix.  Propagators are generated for many steps at once,
multiplied together inside short blocks by a parallel prefix product, and the
blocks are chained sequentially with renormalization so that hyperbolic growth
never overflows.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import torus_fourier as tf
from .torus_fourier import TorusMap

TRACE_TOL = 1e-12
CHUNK_STEPS = 1 << 17
BLOCK_GROWTH = 20.0


class StepSizeError(RuntimeError):
    """The sampled local error estimate stays above tolerance."""


class CocycleSystem:
    """Constant part ``A``, perturbation ``F`` (period 1) and frequency ``omega``."""

    def __init__(self, A, F=None, omega=None, target="sl(2,R)", check=True):
        A = np.atleast_2d(np.asarray(A))
        if omega is None:
            raise ValueError("frequency vector required")
        omega = np.asarray(omega, dtype=float).ravel()
        if omega.size < 1 or not np.all(np.isfinite(omega)):
            raise ValueError("frequency vector must be finite and nonempty")
        if F is None:
            F = TorusMap.zeros(omega.size, A.shape[0], target=target)
        if F.period != 1:
            raise ValueError("perturbation must be 1-periodic")
        if F.dim != omega.size or F.n != A.shape[0]:
            raise ValueError("dimension mismatch between A, F and omega")
        self.A = A.real.astype(float) if np.isrealobj(A) or target in tf.REAL_TARGETS else A
        self.F = F
        self.omega = omega
        self.target = target
        self._has_f = bool(np.any(F.coeffs))
        if check and target in ("sl(2,R)", "sl(2,C)"):
            self._check_trace()

    def _check_trace(self):
        tr = abs(np.trace(self.A)) + np.abs(np.trace(self.F.coeffs, axis1=-2, axis2=-1)).sum()
        if tr > TRACE_TOL * max(1.0, self.max_norm):
            raise ValueError(f"system is not trace-free (|tr| = {tr:.3e})")

    @classmethod
    def from_map(cls, M, omega, target=None):
        """Split a period-1 map into its mean and the zero-mean remainder."""
        A = M.mean
        F = M - TorusMap.constant(A, M.dim, 1, M.target)
        tgt = target or ("sl(2,R)" if M.is_real and M.n == 2 else M.target)
        return cls(A.real if M.is_real else A, F.replace(target=tgt), omega, tgt)

    @property
    def d(self):
        return self.omega.size

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def is_real(self):
        return self.target in tf.REAL_TARGETS

    @property
    def is_sl2(self):
        return self.n == 2 and self.target in ("sl(2,R)", "sl(2,C)")

    @property
    def max_norm(self):
        """Upper bound for ``sup ||A + F||`` (operator norm plus coefficient majorant)."""
        return float(np.linalg.norm(self.A, 2) + tf.analytic_norm(self.F, 1e-300))

    def as_map(self):
        return self.F + TorusMap.constant(self.A, self.d, 1, self.F.target)

    def coefficient(self, t, theta0=None):
        """``A + F(theta0 + t omega)`` for an array of times."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        theta0 = np.zeros(self.d) if theta0 is None else np.asarray(theta0, dtype=float)
        out = np.broadcast_to(self.A, (t.size, self.n, self.n)).astype(
            float if self.is_real else complex)
        if self._has_f:
            pts = theta0[None, :] + t[:, None] * self.omega[None, :]
            vals = tf.evaluate(self.F, pts)
            out = out + vals
        return out

    def __repr__(self):
        return f"CocycleSystem(d={self.d}, n={self.n}, target={self.target!r})"


@dataclass
class Trajectory:
    """Output of :func:`propagate`."""

    T: float
    h: float
    steps: int
    X: np.ndarray  # normalized final matrix; the true one is exp(log_scale) * X
    log_scale: float
    det_drift: float  # |det - 1| of the un-renormalized product
    local_error: float
    times: np.ndarray | None = None
    lift: np.ndarray | None = None
    lognorm: np.ndarray | None = None

    @property
    def matrix(self):
        return self.X * math.exp(self.log_scale)


@dataclass(frozen=True)
class RotationEstimate:
    value: float
    T: float
    error_bound: float
    raw: float = 0.0  # lift(T) / T
    windows: tuple = ()
    classification: object = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.error_bound < 0:
            raise ValueError("error bound must be nonnegative")

    def to_record(self):
        rec = {"rho": self.value, "T": self.T, "error_bound": self.error_bound,
               "raw": self.raw, "windows": list(self.windows)}
        if self.classification is not None:
            rec["classification"] = self.classification.to_record()
        rec.update(self.extra)
        return rec


# -- integration --------------------------------------------------------------

def default_step(sys, scale=0.005):
    return scale / max(1.0, sys.max_norm)


def _rk4_propagators(sys, theta0, t0, h, count):
    """RK4 one-step propagators for ``count`` consecutive steps from ``t0``."""
    M = sys.coefficient(t0 + 0.5 * h * np.arange(2 * count + 1), theta0)
    M0, Mh, M1 = M[0:-1:2], M[1::2], M[2::2]
    eye = np.eye(sys.n)
    k1 = M0
    k2 = Mh @ (eye + 0.5 * h * k1)
    k3 = Mh @ (eye + 0.5 * h * k2)
    k4 = M1 @ (eye + h * k3)
    return eye + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _prefix_products(P):
    """``Q[..., i, :, :] = P_i ... P_0`` along axis -3 by recursive doubling."""
    Q = P.copy()
    s = 1
    B = Q.shape[-3]
    while s < B:
        Q[..., s:, :, :] = Q[..., s:, :, :] @ Q[..., :-s, :, :]
        s *= 2
    return Q


def _local_error(sys, theta0, h, total, samples=8):
    """Step-doubling estimate of the relative one-step error at sampled times."""
    starts = np.linspace(0, max(total - 1, 0), min(samples, total)).astype(int) * h
    errs = []
    for t in starts:
        big = _rk4_propagators(sys, theta0, t, h, 1)[0]
        half = _rk4_propagators(sys, theta0, t, h / 2, 2)
        two = half[1] @ half[0]
        errs.append(np.linalg.norm(big - two) / max(np.linalg.norm(two), 1e-300) / 15)
    return float(np.median(errs)) if errs else 0.0


def propagate(sys, theta0=None, T=1.0, h=None, phi0=None, record=False, local_tol=1e-6):
    """Integrate from ``X^0 = Id`` to ``X^T``.

    With ``record=True`` the argument lift of ``X^t phi0`` and ``log ||X^t||``
    are returned at every step (2x2 real systems only for the lift).
    """
    if not np.isfinite(T) or T < 0:
        raise ValueError("T must be finite and nonnegative")
    theta0 = np.zeros(sys.d) if theta0 is None else np.asarray(theta0, dtype=float)
    bound = sys.max_norm
    if h is None:
        h = default_step(sys)
    if h <= 0:
        raise ValueError("step must be positive")
    # keep the per-step rotation well below pi/2
    h = min(h, 1.0 / max(bound, 1e-300))
    steps = max(int(math.ceil(T / h - 1e-9)), 1) if T > 0 else 0
    h = T / steps if steps else h
    n = sys.n
    dtype = float if sys.is_real else complex
    X = np.eye(n, dtype=dtype)
    log_scale = 0.0
    logdet = 0.0
    if steps == 0:
        return Trajectory(T, h, 0, X, 0.0, 0.0, 0.0)
    lerr = _local_error(sys, theta0, h, steps)
    if lerr > local_tol:
        raise StepSizeError(f"local error {lerr:.3e} > {local_tol:.1e} with h = {h:.3e}")
    B = int(max(1, min(4096, BLOCK_GROWTH / max(h * bound, 1e-300))))
    chunk = max(B, (CHUNK_STEPS // B) * B)
    want_lift = record and sys.is_real and n == 2
    phi = np.array([1.0, 0.0]) if phi0 is None else np.asarray(phi0, dtype=float)
    if record and not np.any(phi):
        raise ValueError("phi0 must be nonzero")
    lifts, lognorms = [], []
    angle = math.atan2(phi[1], phi[0]) if want_lift else 0.0
    done = 0
    while done < steps:
        count = min(chunk, steps - done)
        P = _rk4_propagators(sys, theta0, done * h, h, count)
        if sys.is_sl2:
            det = P[:, 0, 0] * P[:, 1, 1] - P[:, 0, 1] * P[:, 1, 0]
            logdet += float(np.log(np.abs(det)).sum())
            P = P / np.sqrt(det)[:, None, None]
        else:
            logdet += float(np.log(np.abs(np.linalg.det(P))).sum())
        nb = -(-count // B)
        pad = nb * B - count
        if pad:
            P = np.concatenate([P, np.broadcast_to(np.eye(n, dtype=P.dtype), (pad, n, n))])
        Q = _prefix_products(P.reshape(nb, B, n, n))
        for b in range(nb):
            live = B if b < nb - 1 else B - pad
            Xs = Q[b, :live] @ X
            if record:
                nrm = np.linalg.norm(Xs, ord=2, axis=(-2, -1))
                lognorms.append(np.log(nrm) + log_scale)
            if want_lift:
                v = Xs @ phi
                a = np.arctan2(v[:, 1], v[:, 0])
                a = np.unwrap(np.concatenate([[angle], a]))[1:]
                lifts.append(a)
                angle = float(a[-1])
            X = Xs[-1]
            s = np.linalg.norm(X, 2)
            X = X / s
            log_scale += math.log(s)
        done += count
    traj = Trajectory(T, h, steps, X, log_scale, abs(math.expm1(logdet)), lerr)
    if record:
        traj.times = h * np.arange(0, steps + 1)
        traj.lognorm = np.concatenate([[0.0]] + lognorms)
        if want_lift:
            traj.lift = np.concatenate([[math.atan2(phi[1], phi[0])]] + lifts)
    return traj


def integrate(sys, theta0=None, T=1.0, h=None, return_info=False):
    """Fundamental solution ``X^T(theta0)``."""
    traj = propagate(sys, theta0, T, h)
    return (traj.matrix, traj) if return_info else traj.matrix


# -- rotation number and Lyapunov exponent ------------------------------------------

def _ls_slope(t, y):
    tc = t - t.mean()
    return float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))


def _window_slope(t, lift, a, b):
    i, j = np.searchsorted(t, a), min(np.searchsorted(t, b), t.size - 1)
    return _ls_slope(t[i:j + 1], lift[i:j + 1])


def rotation_number(sys, T=1000.0, h=None, theta0=None, phi0=(1.0, 0.0),
                    classify=None, trace_path=None):
    """Fibered rotation number from the continuous argument lift of ``X^t phi0``.

    The value is the least-squares slope of the lift against time; bounded
    oscillations of the argument then only enter at order ``1/T^2``.  The
    error bound is the spread of the least-squares slopes over the windows
    ``[T/8, T/4]``, ``[T/4, T/2]`` and ``[T/2, T]`` (a heuristic bracket).
    ``classify`` may be a dict of keyword arguments for
    :func:`kamreduce.diophantine.classify_rotation_number`.
    """
    if not (sys.n == 2 and sys.is_real):
        raise ValueError("rotation number is defined here for real 2x2 systems")
    if T <= 0:
        raise ValueError("T must be positive")
    if h is None:
        h = default_step(sys, 0.02)
    traj = propagate(sys, theta0, T, h, phi0=phi0, record=True)
    t, lift = traj.times, traj.lift
    slope = _ls_slope(t, lift)
    windows = tuple(_window_slope(t, lift, a * T, b * T)
                    for a, b in ((1 / 8, 1 / 4), (1 / 4, 1 / 2), (1 / 2, 1)))
    spread = max(windows) - min(windows)
    spread = max(spread, max(abs(w - slope) for w in windows))
    err = spread + 8 * np.finfo(float).eps * abs(slope) + 1e-12
    raw = float((lift[-1] - lift[0]) / T)
    cls = None
    if classify is not None:
        from .diophantine import classify_rotation_number
        cls = classify_rotation_number(slope, sys.omega, **classify)
    if trace_path is not None:
        write_trace_csv(traj, trace_path)
    return RotationEstimate(slope, float(T), float(err), raw, windows, cls,
                            {"h": traj.h, "det_drift": traj.det_drift})


def lyapunov_exponent(sys, T=1000.0, h=None, theta0=None):
    """``(1/T) log ||X^T||`` with the frame renormalized along the way."""
    if T <= 0:
        raise ValueError("T must be positive")
    if h is None:
        h = default_step(sys, 0.02)
    traj = propagate(sys, theta0, T, h)
    return (traj.log_scale + math.log(np.linalg.norm(traj.X, 2))) / T


def write_trace_csv(traj, path, stride=None):
    """CSV of ``(t, arg_lift, log_norm)`` sampled every ``stride`` steps."""
    if traj.times is None:
        raise ValueError("trajectory was not recorded")
    stride = stride or max(1, traj.steps // 2000)
    lift = traj.lift if traj.lift is not None else np.full(traj.times.shape, np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "arg_lift", "log_norm"])
        for i in range(0, traj.times.size, stride):
            w.writerow([repr(float(traj.times[i])), repr(float(lift[i])), repr(float(traj.lognorm[i]))])


# -- conjugacy residual ----------------------------------------------------------------

def _as_map(x, d, n, omega=None):
    if isinstance(x, CocycleSystem):
        return x.as_map()
    if isinstance(x, TorusMap):
        return x
    return TorusMap.constant(np.asarray(x), d, 1, "gl(n,C)")


def conjugation_residual(Z, lhs, rhs, omega=None, grid=64):
    """Grid sup of ``||d_omega Z - (L Z - Z R)||``.

    ``lhs`` may be a :class:`CocycleSystem` (its ``A + F`` is used) or a map;
    ``rhs`` a map or a constant matrix.  Maps of different periods are
    compared on the double torus.
    """
    if omega is None:
        if not isinstance(lhs, CocycleSystem):
            raise ValueError("omega required when lhs is not a CocycleSystem")
        omega = lhs.omega
    d, n = Z.dim, Z.n
    L = _as_map(lhs, d, n)
    R = _as_map(rhs, d, n)
    P = max(Z.period, L.period, R.period)
    Z, L, R = (m.to_period(P) for m in (Z, L, R))
    K = max(Z.band, L.band, R.band)
    G = max(int(grid) * P, 2 * K + 2)
    dZ = tf.grid_values(tf.derive_omega(Z, omega), G)
    vz, vl, vr = (tf.grid_values(m, G) for m in (Z, L, R))
    res = dZ - (vl @ vz - vz @ vr)
    return float(np.linalg.norm(res, ord=2, axis=(-2, -1)).max())
