"""Scalar and matrix-entry martingales with prescribed marginals.

The scalar SDE  dh = a(h/sqrt(t))^{1/2} db  keeps h(t)/sqrt(t) distributed
as the calibrated density rho at every time.  The matrix version applies
the same dynamics entrywise at scale N^{-1/2},

    dH_ij = N^{-1/2} a(sqrt(N/t) H_ij)^{1/2} dB_ij,     B_ij = B_ji,

so that H(1) is a Wigner matrix with entry law rho and entry variance 1/N.
The instantaneous variance rates sigma_ij = a(sqrt(N/t) H_ij)/N form the
profile that feeds the self-energy operator.

The SDE is singular at t = 0 (the coefficient argument is 0/0), so paths
are initialized at a small t_init > 0 by sampling the known marginal
sqrt(t_init) * rho directly; the marginal law at every later grid time is
then inherited from the construction rather than from integrating through
the singular start.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import streams
from .density import CalibratedDensity, sample_iid


class InvalidStep(Exception):
    """Nonpositive step or a step overshooting the terminal time."""


def geometric_uniform_schedule(t_init: float = 1e-3, n_steps: int = 2000,
                               t_switch: float = 0.05,
                               geometric_frac: float = 0.25) -> np.ndarray:
    """Strictly increasing times from t_init to 1.

    The first geometric_frac of the steps refine geometrically up to
    t_switch, where the coefficient argument sqrt(N/t) H varies fastest;
    the remainder is uniform.
    """
    if not 0.0 < t_init < t_switch < 1.0:
        raise ValueError("need 0 < t_init < t_switch < 1")
    n_geo = max(1, int(round(n_steps * geometric_frac)))
    if n_geo >= n_steps:
        raise ValueError("geometric_frac leaves no uniform steps")
    geo = np.geomspace(t_init, t_switch, n_geo + 1)
    uni = np.linspace(t_switch, 1.0, n_steps - n_geo + 1)[1:]
    return np.concatenate([geo, uni])


def checkpoint_times(schedule: np.ndarray, n_checkpoints: int = 51) -> np.ndarray:
    """A coarse subset of schedule times (log near the start, then uniform).

    Every returned time is an exact element of the schedule, so paths land
    on checkpoints without interpolation.
    """
    t0, t1 = schedule[0], schedule[-1]
    n_log = max(2, n_checkpoints // 6)
    want = np.concatenate([np.geomspace(t0, 0.05, n_log),
                           np.linspace(0.05, t1, n_checkpoints - n_log)])
    idx = np.unique(np.searchsorted(schedule, want, side="left").clip(0, len(schedule) - 1))
    idx[-1] = len(schedule) - 1
    return schedule[np.unique(idx)]


@dataclass
class PathConfig:
    """Dimension, time grid, and stream identity of one matrix path."""

    n: int
    base_seed: int
    trial: int = 0
    t_init: float = 1e-3
    schedule: np.ndarray = field(default=None)
    checkpoints: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 < self.t_init < 1.0:
            raise ValueError("t_init must lie in (0, 1)")
        if self.schedule is None:
            self.schedule = geometric_uniform_schedule(self.t_init)
        self.schedule = np.asarray(self.schedule, dtype=float)
        if self.schedule[0] != self.t_init:
            raise ValueError("schedule must start at t_init")
        if np.any(np.diff(self.schedule) <= 0):
            raise ValueError("schedule must be strictly increasing")
        if self.schedule[-1] != 1.0:
            raise ValueError("schedule must end at 1")
        if self.checkpoints is None:
            self.checkpoints = checkpoint_times(self.schedule)
        self.checkpoints = np.asarray(self.checkpoints, dtype=float)
        missing = np.setdiff1d(self.checkpoints, self.schedule)
        if missing.size:
            raise ValueError(f"checkpoints not on the schedule: {missing[:3]}")


@dataclass
class MatrixState:
    """H(t) with its variance profile at one time.  Exactly symmetric."""

    t: float
    H: np.ndarray
    sigma: np.ndarray
    clamp_count: int = 0

    @property
    def n(self) -> int:
        return self.H.shape[0]


@dataclass
class MatrixPath:
    """Checkpoint states of one trial, in increasing time order."""

    config: PathConfig
    states: list
    total_clamps: int = 0

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def state_at(self, t: float) -> MatrixState:
        for s in self.states:
            if s.t == t:
                return s
        raise KeyError(f"no checkpoint at t = {t}")


def _upper(n: int):
    return np.triu_indices(n)


def _sym_from_upper(vec: np.ndarray, n: int, iu) -> np.ndarray:
    M = np.zeros((n, n))
    M[iu] = vec
    M.T[iu] = vec
    return M


def _sigma_upper(cd: CalibratedDensity, hu: np.ndarray, t: float, n: int):
    x = np.sqrt(n / t) * hu
    a, clamps = cd.a_clamped(x)
    return a / n, clamps


def init_exact(cd: CalibratedDensity, n: int, t_init: float,
               gen: np.random.Generator) -> MatrixState:
    """Sample H(t_init) from its exact marginal and attach sigma."""
    iu = _upper(n)
    x = sample_iid(cd, iu[0].size, gen)
    hu = np.sqrt(t_init / n) * x
    su, clamps = _sigma_upper(cd, hu, t_init, n)
    return MatrixState(t=float(t_init), H=_sym_from_upper(hu, n, iu),
                       sigma=_sym_from_upper(su, n, iu), clamp_count=clamps)


def sigma_profile(cd: CalibratedDensity, state: MatrixState) -> np.ndarray:
    """Recompute sigma_ij = a(sqrt(N/t) H_ij)/N from the state."""
    if state.t <= 0:
        raise ValueError("sigma profile needs t > 0")
    n = state.n
    iu = _upper(n)
    su, _ = _sigma_upper(cd, state.H[iu], state.t, n)
    return _sym_from_upper(su, n, iu)


def step(cd: CalibratedDensity, state: MatrixState, dt: float,
         gen: np.random.Generator) -> MatrixState:
    """One Euler-Maruyama step of the matrix SDE."""
    if dt <= 0:
        raise InvalidStep(f"dt = {dt} must be positive")
    t_new = state.t + dt
    if t_new > 1.0 + 1e-12:
        raise InvalidStep(f"step to t = {t_new} overshoots the terminal time 1")
    n = state.n
    iu = _upper(n)
    hu = state.H[iu] + np.sqrt(state.sigma[iu] * dt) * gen.standard_normal(iu[0].size)
    su, clamps = _sigma_upper(cd, hu, min(t_new, 1.0), n)
    return MatrixState(t=min(t_new, 1.0), H=_sym_from_upper(hu, n, iu),
                       sigma=_sym_from_upper(su, n, iu), clamp_count=clamps)


def evolve(cd: CalibratedDensity, config: PathConfig,
           gen: np.random.Generator | None = None, keep: str = "checkpoints") -> MatrixPath:
    """Integrate the matrix SDE over the configured schedule.

    keep selects which checkpoint states are materialized: "checkpoints"
    stores every configured checkpoint, "last" only the terminal state
    (memory-lean mode for large N).
    """
    if keep not in ("checkpoints", "last"):
        raise ValueError(f"unknown keep mode {keep!r}")
    if gen is None:
        gen = streams.path_stream(config.base_seed, config.n, config.trial)
    n = config.n
    iu = _upper(n)
    sched = config.schedule
    is_checkpoint = np.isin(sched, config.checkpoints)

    hu = np.sqrt(config.t_init / n) * sample_iid(cd, iu[0].size, gen)
    su, clamps = _sigma_upper(cd, hu, config.t_init, n)
    total_clamps = clamps
    states = []

    def materialize(t, hu, su, clamps):
        states.append(MatrixState(t=float(t), H=_sym_from_upper(hu, n, iu),
                                  sigma=_sym_from_upper(su, n, iu),
                                  clamp_count=clamps))

    if keep == "checkpoints" and is_checkpoint[0]:
        materialize(sched[0], hu, su, clamps)
    for k in range(len(sched) - 1):
        dt = sched[k + 1] - sched[k]
        hu = hu + np.sqrt(su * dt) * gen.standard_normal(hu.size)
        su, clamps = _sigma_upper(cd, hu, sched[k + 1], n)
        total_clamps += clamps
        if is_checkpoint[k + 1] and (keep == "checkpoints" or k + 1 == len(sched) - 1):
            materialize(sched[k + 1], hu, su, clamps)
    if keep == "last" and (not states or states[-1].t != sched[-1]):
        materialize(sched[-1], hu, su, clamps)
    return MatrixPath(config=config, states=states, total_clamps=total_clamps)


def evolve_scalar(cd: CalibratedDensity, t_grid: np.ndarray,
                  gen: np.random.Generator, n_paths: int = 1) -> np.ndarray:
    """Euler-Maruyama paths of the scalar martingale; shape (times, paths).

    h(t_grid[0]) is sampled from its exact marginal sqrt(t) * rho, so the
    statistical contract h(t)/sqrt(t) ~ rho holds at the start by
    construction and approximately (to discretization order) afterwards.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[0] <= 0:
        raise ValueError("t_grid must start at a positive time")
    out = np.empty((t_grid.size, n_paths))
    h = np.sqrt(t_grid[0]) * sample_iid(cd, n_paths, gen)
    out[0] = h
    for k in range(t_grid.size - 1):
        dt = t_grid[k + 1] - t_grid[k]
        a, _ = cd.a_clamped(h / np.sqrt(t_grid[k]))
        h = h + np.sqrt(a * dt) * gen.standard_normal(n_paths)
        out[k + 1] = h
    return out
