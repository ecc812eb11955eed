"""Characteristic flows driven by resolvent trace fields.

A drift field is any callable (t, w) -> complex approximating a resolvent
trace mean.  The forward characteristic solves

    d/dt gamma(t, z) = -field(t, gamma),    gamma(0, z) = z,

along which the trace process <R(t, gamma)> is approximately conserved;
lambda is its time reversal, run upward from the evaluation window so
that gamma(1, lambda(1, z)) = z.  Curves are stopped (time and value
frozen) the moment Im falls to eta/4, matching the stopped-process
semantics of the estimates being tested.

Fields come in two flavors: the deterministic frozen-semicircle stand-in
(closed-form checks) and PathTraceEvaluator, which couples the flow to a
matrix path through cached eigenvalue tables at the checkpoint times and
the midpoints the integrator visits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .domains import SpectralDomain
from .martingale import MatrixPath
from .resolvent import resolvent, t_op


class ODEStepFailure(Exception):
    """Flow integration produced a non-finite position."""


@dataclass
class CharacteristicCurve:
    """One flow trajectory with its trace series and drift diagnostics.

    For reverse_time curves (lambda), times are the reversed-flow variable
    s and positions move upward; physical time is 1 - s.
    """

    z0: complex
    times: np.ndarray
    xi: np.ndarray
    r: np.ndarray
    stopped: bool = False
    tau: float | None = None        # first time Im xi reaches eta/4
    tau_half: float | None = None   # first time Im xi reaches eta/2
    drift_sup: float = 0.0          # sup_t |<R(t)> - <R(0)>|
    ratio: float = 0.0              # drift_sup * sqrt(N eta)
    reverse_time: bool = False

    @property
    def endpoint(self) -> complex:
        return complex(self.xi[-1])

    @property
    def u(self) -> np.ndarray:
        """Diagnostic u(t) = 1 + Im <R>."""
        return 1.0 + self.r.imag


class PathTraceEvaluator:
    """Resolvent trace field of a matrix path.

    Eigenvalues of H(t) are cached at the ODE grid times (t = 0 plus the
    path checkpoints) and at interval midpoints, with H interpolated
    linearly between checkpoints.  Off-table times (reached only by
    stopping-time bisection) decompose on demand and join the cache.
    """

    def __init__(self, path: MatrixPath):
        self._path = path
        states = path.states
        if len(states) < 2:
            raise ValueError("path must retain at least two checkpoints")
        self.n = states[0].n
        cpt = [s.t for s in states]
        self.ode_times = np.concatenate([[0.0], cpt])
        self._lam = {}
        zero = np.zeros(self.n)
        self._lam[0.0] = zero
        prev_H = None
        prev_t = 0.0
        for s in states:
            mid = prev_t + 0.5 * (s.t - prev_t)
            Hmid = 0.5 * s.H if prev_H is None else 0.5 * (prev_H + s.H)
            self._lam[mid] = linalg.eigvalsh(Hmid, check_finite=False)
            self._lam[s.t] = linalg.eigvalsh(s.H, check_finite=False)
            prev_H, prev_t = s.H, s.t
        self._keys = np.array(sorted(self._lam))

    def _eigenvalues(self, t: float) -> np.ndarray:
        lam = self._lam.get(t)
        if lam is not None:
            return lam
        # tolerant match against cached keys (reverse-flow midpoints can
        # differ from forward ones in the last bit)
        i = np.searchsorted(self._keys, t)
        for j in (i - 1, i):
            if 0 <= j < len(self._keys) and abs(self._keys[j] - t) <= 1e-9:
                return self._lam[self._keys[j]]
        return self._insert(t)

    def _insert(self, t: float) -> np.ndarray:
        states = self._path.states
        cpt = np.array([s.t for s in states])
        if not 0.0 <= t <= cpt[-1]:
            raise ValueError(f"time {t} outside the path range")
        j = int(np.searchsorted(cpt, t))
        if j == 0:
            frac = t / cpt[0]
            H = frac * states[0].H
        else:
            t0, t1 = cpt[j - 1], cpt[j]
            frac = (t - t0) / (t1 - t0)
            H = (1.0 - frac) * states[j - 1].H + frac * states[j].H
        lam = linalg.eigvalsh(H, check_finite=False)
        self._lam[t] = lam
        self._keys = np.array(sorted(self._lam))
        return lam

    def __call__(self, t: float, w: complex) -> complex:
        return complex(np.mean(1.0 / (self._eigenvalues(t) - w)))


def _rk4(f, t, x, dt):
    k1 = f(t, x)
    k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = f(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _interp_crossing(times, imag_vals, level):
    below = np.nonzero(imag_vals <= level)[0]
    if below.size == 0:
        return None
    k = int(below[0])
    if k == 0:
        return float(times[0])
    t0, t1 = times[k - 1], times[k]
    y0, y1 = imag_vals[k - 1], imag_vals[k]
    return float(t0 + (y0 - level) / (y0 - y1) * (t1 - t0))


def flow_gamma(drift_field, z0: complex, dom: SpectralDomain,
               t_grid: np.ndarray) -> CharacteristicCurve:
    """Forward characteristic from z0, stopped at Im = eta/4.

    Fixed-step classical fourth-order integration on t_grid; the stopping
    time is located by bisection on the final step's length, after which
    position and trace value are frozen.
    """
    z0 = complex(z0)
    if not dom.in_D0(z0):
        raise ValueError(f"initial point {z0:.6g} outside the initial domain")
    t_grid = np.asarray(t_grid, dtype=float)
    eta4 = 0.25 * dom.eta

    def f(t, w):
        return -drift_field(t, w)

    m = t_grid.size
    xi = np.empty(m, dtype=complex)
    r = np.empty(m, dtype=complex)
    xi[0] = z0
    r[0] = drift_field(t_grid[0], z0)
    stopped = False
    tau = None
    for k in range(m - 1):
        t, dt = t_grid[k], t_grid[k + 1] - t_grid[k]
        nxt = _rk4(f, t, xi[k], dt)
        if not np.isfinite(nxt):
            raise ODEStepFailure(f"non-finite position at t = {t_grid[k + 1]:.6g}")
        if nxt.imag > eta4:
            xi[k + 1] = nxt
            r[k + 1] = drift_field(t_grid[k + 1], nxt)
            continue
        # locate the crossing on the step fraction; root evaluations reuse
        # the cached field times at the interval ends and midpoint
        def gap(s):
            return _rk4(f, t, xi[k], s * dt).imag - eta4

        s_stop = optimize.brentq(gap, 0.0, 1.0, xtol=1e-14, rtol=1e-15)
        y = _rk4(f, t, xi[k], s_stop * dt) if s_stop > 0.0 else xi[k]
        tau = float(t + s_stop * dt)
        frozen_r = drift_field(tau, y)
        xi[k + 1:] = y
        r[k + 1:] = frozen_r
        stopped = True
        break
    drift_sup = float(np.max(np.abs(r - r[0])))
    curve = CharacteristicCurve(
        z0=z0, times=t_grid, xi=xi, r=r, stopped=stopped, tau=tau,
        tau_half=_interp_crossing(t_grid, xi.imag, 0.5 * dom.eta),
        drift_sup=drift_sup, ratio=drift_sup * np.sqrt(dom.n * dom.eta))
    return curve


def flow_lambda(drift_field, zeta: complex, dom: SpectralDomain,
                t_grid: np.ndarray) -> CharacteristicCurve:
    """Time-reversed characteristic from zeta in the evaluation window.

    Solves d/ds lambda = +field(1 - s, lambda) upward on s in [0, 1]; the
    s-grid mirrors t_grid so field evaluations land on the same times.
    """
    zeta = complex(zeta)
    if not dom.in_D(zeta):
        raise ValueError(f"initial point {zeta:.6g} outside the evaluation window")
    t_grid = np.asarray(t_grid, dtype=float)
    s_grid = 1.0 - t_grid[::-1]

    def f(s, lam):
        return drift_field(1.0 - s, lam)

    m = s_grid.size
    xi = np.empty(m, dtype=complex)
    r = np.empty(m, dtype=complex)
    xi[0] = zeta
    r[0] = drift_field(1.0, zeta)
    for k in range(m - 1):
        s, ds = s_grid[k], s_grid[k + 1] - s_grid[k]
        nxt = _rk4(f, s, xi[k], ds)
        if not np.isfinite(nxt):
            raise ODEStepFailure(f"non-finite position at s = {s_grid[k + 1]:.6g}")
        xi[k + 1] = nxt
        r[k + 1] = drift_field(1.0 - s_grid[k + 1], nxt)
    drift_sup = float(np.max(np.abs(r - r[0])))
    return CharacteristicCurve(
        z0=zeta, times=s_grid, xi=xi, r=r, drift_sup=drift_sup,
        ratio=drift_sup * np.sqrt(dom.n * dom.eta), reverse_time=True)


@dataclass
class MapResult:
    """Initial point recovered by the reversed flow, with diagnostics."""

    w: complex
    residual: float     # |w + 1/w - z|, the semicircle-map defect
    in_D0: bool
    curve: CharacteristicCurve


def map_to_initial(drift_field, z: complex, dom: SpectralDomain,
                   t_grid: np.ndarray) -> MapResult:
    curve = flow_lambda(drift_field, z, dom, t_grid)
    w = curve.endpoint
    return MapResult(w=w, residual=float(abs(w + 1.0 / w - z)),
                     in_D0=dom.in_D0(w), curve=curve)


def stopped_process(path_or_field, z0: complex, dom: SpectralDomain,
                    t_grid: np.ndarray | None = None) -> CharacteristicCurve:
    """Trace process along the stopped forward characteristic of a path."""
    if isinstance(path_or_field, MatrixPath):
        path_or_field = PathTraceEvaluator(path_or_field)
    if t_grid is None:
        t_grid = getattr(path_or_field, "ode_times", None)
        if t_grid is None:
            raise ValueError("t_grid required for a bare drift field")
    return flow_gamma(path_or_field, z0, dom, t_grid)


@dataclass
class DriftDecomposition:
    """Cumulative trace drifts <F> and <A> with the reconstruction defect."""

    times: np.ndarray
    F: np.ndarray
    A: np.ndarray
    reconstruction_residual: float


def drift_decomposition(path: MatrixPath, curve: CharacteristicCurve) -> DriftDecomposition:
    """Split the trace evolution along a curve into its two drift pieces.

    Discrete increments, accumulated as trace means with R evaluated at
    the step's left endpoint:

        dF = -<R (dH - T[sigma, R] dt) R>
        dA =  <R (S[sigma, R] - <R>) R> dt

    The reconstruction defect |<R(t)> - <R(0)> - F - A| is limited by the
    step size and the second-order resolvent remainder.
    """
    if curve.reverse_time:
        raise ValueError("decomposition runs along forward curves")
    states = path.states
    n = states[0].n
    ode_times = np.concatenate([[0.0], [s.t for s in states]])
    if not np.array_equal(curve.times, ode_times):
        raise ValueError("curve grid does not match the path checkpoints")
    m = curve.times.size
    F = np.zeros(m, dtype=complex)
    A = np.zeros(m, dtype=complex)
    last = m - 1
    if curve.stopped:
        last = int(np.nonzero(curve.times >= curve.tau)[0][0]) - 1
    for k in range(last):
        t0 = curve.times[k]
        dt = curve.times[k + 1] - t0
        H0 = np.zeros((n, n)) if k == 0 else states[k - 1].H
        H1 = states[k].H
        sig = states[0].sigma if k == 0 else states[k - 1].sigma
        R = resolvent(H0, curve.xi[k], check=False).G
        RR = R @ R
        X = (H1 - H0) - dt * t_op(sig, R)
        F[k + 1] = F[k] - np.einsum("ij,ji->", X, RR) / n
        dev = (sig - 1.0 / n) @ R.diagonal()
        A[k + 1] = A[k] + (dev * RR.diagonal()).sum() * dt / n
    if last < m - 1:
        F[last + 1:] = F[last]
        A[last + 1:] = A[last]
    recon = np.max(np.abs((curve.r - curve.r[0]) - F - A)[:last + 1])
    return DriftDecomposition(times=curve.times, F=F, A=A,
                              reconstruction_residual=float(recon))


def contraction_check(curve_z: CharacteristicCurve, curve_w: CharacteristicCurve) -> float:
    """Worst ratio of |gamma(t,z) - gamma(t,w)| to its contraction bound.

    The bound is sqrt(Im z Im w / (Im gamma_t(z) Im gamma_t(w))) |z - w|;
    values <= 1 + slack certify the pathwise contraction inequality.
    Curves must share a grid; only the common unstopped prefix counts.
    """
    if not np.array_equal(curve_z.times, curve_w.times):
        raise ValueError("curves must share a time grid")
    z, w = curve_z.z0, curve_w.z0
    if z == w:
        return 0.0
    good = np.ones(curve_z.times.size, dtype=bool)
    for c in (curve_z, curve_w):
        if c.stopped:
            good &= curve_z.times < c.tau
    num = np.abs(curve_z.xi - curve_w.xi)[good]
    den = (np.sqrt(z.imag * w.imag
                   / (curve_z.xi.imag * curve_w.xi.imag))[good] * abs(z - w))
    return float(np.max(num / den))
