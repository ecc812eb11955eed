"""Monte Carlo experiment orchestration with deterministic reports.

Four experiments, each a pure function of an ExperimentConfig:

  run_lsc            trace-mean error |<G(1,z)> - msc(z)| over the z-grid,
                     with a log-log slope fit against N * Im z
  run_marginal       two-sample KS of pooled rescaled entries against the
                     direct density sampler, per (N, checkpoint time)
  run_entrywise      per-matrix diagonal / off-diagonal / self-consistency
                     maxima over the z-grid (run_entrywise_sweep adds the
                     trial loop and slope fits)
  run_characteristic reversed-flow inversion, stopped-process drift,
                     pairwise contraction ratios, and self-energy ratios
                     at the curve endpoints and along thinned curves

Trials are independent work units; a fork-based pool may execute them,
but results are reduced in task-submission order, so reports are byte
identical at any pool size.  CSV rows hold Python floats serialized with
repr (shortest round-trip form), which makes the files reproducible at
the byte level.
"""

from __future__ import annotations

import multiprocessing
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, stats

from . import streams
from .density import CalibratedDensity, DensitySpec, calibrate, sample_iid
from .domains import SpectralDomain, msc
from .flows import PathTraceEvaluator, contraction_check, flow_gamma, map_to_initial
from .martingale import (PathConfig, checkpoint_times, evolve,
                         geometric_uniform_schedule)
from .resolvent import EigenResolvent, resolvent, self_energy_error, self_energy_from_diag


class ConfigError(Exception):
    """Malformed or contradictory experiment configuration."""


class DegenerateFit(Exception):
    """Scaling fit attempted on data with no spread in the predictor."""


class EmptySample(Exception):
    """Quantile requested from an empty sample."""


EXPERIMENT_NAMES = ("lsc", "characteristics", "marginal", "entrywise")

LSC_COLUMNS = ("n", "trial", "re_z", "im_z", "abs_err", "normalizer")
MARGINAL_COLUMNS = ("n", "t", "pooled", "ks_stat", "p_value", "rejected_1pct")
ENTRYWISE_COLUMNS = ("n", "trial", "re_z", "im_z",
                     "max_diag_err", "max_offdiag", "max_schur_residual")
CHAR_MAP_COLUMNS = ("n", "trial", "re_z", "im_z", "re_w", "im_w",
                    "map_residual", "roundtrip_err", "in_D0",
                    "drift_sup", "drift_ratio", "stopped", "tau")
CHAR_PAIR_COLUMNS = ("n", "trial", "re_z1", "re_z2", "im_z", "contraction_ratio")
CHAR_SENERGY_COLUMNS = ("n", "trial", "t", "re_z", "im_z",
                        "abs_error", "normalizer", "ratio")

_PATH_KEYS = {"n_steps", "t_init", "t_switch", "geometric_frac", "n_checkpoints"}
_DOMAIN_KEYS = {"theta", "kappa", "W", "n_im", "n_re"}
_EXPERIMENT_KEYS = {"n_values", "trials", "seed", "marginal_times", "char_im",
                    "senergy_times", "ode_tolerance", "run"}
_TOP_KEYS = {"density", "path", "domain", "experiments", "output"}


def _reject_unknown(section: str, mapping: Mapping, allowed: set) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section!r} section: {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    """Everything an experiment run depends on, seeds included."""

    density: DensitySpec
    n_values: tuple = (500,)
    trials: int = 10
    base_seed: int = 0
    theta: float = 0.5
    kappa: float = 0.5
    W: tuple = (-1.5, 1.5)
    n_im: int = 8
    n_re: int = 9
    n_steps: int = 2000
    t_init: float = 1e-3
    t_switch: float = 0.05
    geometric_frac: float = 0.25
    n_checkpoints: int = 51
    marginal_times: tuple = (0.25, 1.0)
    char_im: float = 0.5
    senergy_times: int = 4
    ode_tolerance: float = 1e-6
    threads: int = 1
    experiments: tuple = ("lsc",)

    def __post_init__(self):
        self.n_values = tuple(int(n) for n in self.n_values)
        self.W = tuple(float(w) for w in self.W)
        self.marginal_times = tuple(float(t) for t in self.marginal_times)
        self.experiments = tuple(str(e) for e in self.experiments)
        if not self.n_values:
            raise ConfigError("n_values must not be empty")
        if min(self.n_values) < 32:
            raise ConfigError("all N values must be >= 32")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.n_im < 2 or self.n_re < 2:
            raise ConfigError("z-grid needs at least 2 x 2 points")
        if self.senergy_times < 1:
            raise ConfigError("senergy_times must be >= 1")
        if not 2 <= self.n_checkpoints <= self.n_steps + 1:
            raise ConfigError("n_checkpoints must lie in [2, n_steps + 1]")
        if self.ode_tolerance <= 0:
            raise ConfigError("ode_tolerance must be positive")
        for t in self.marginal_times:
            if not 0.0 < t <= 1.0:
                raise ConfigError(f"marginal time {t} outside (0, 1]")
        bad = set(self.experiments) - set(EXPERIMENT_NAMES)
        if bad:
            raise ConfigError(f"unknown experiments: {sorted(bad)}")
        try:
            probe = self.domain(min(self.n_values))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not probe.eta <= self.char_im <= 1.0:
            raise ConfigError(
                f"char_im = {self.char_im} outside [eta, 1] at N = {min(self.n_values)}")

    @classmethod
    def from_sections(cls, doc: Mapping) -> "ExperimentConfig":
        """Build from a parsed JSON document with fixed top-level sections."""
        if not isinstance(doc, Mapping):
            raise ConfigError("config document must be a JSON object")
        _reject_unknown("top-level", doc, _TOP_KEYS)
        if "density" not in doc:
            raise ConfigError("config requires a 'density' section")
        try:
            density = DensitySpec.from_config(doc["density"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"density section: {exc}") from exc
        path = dict(doc.get("path", {}))
        domain = dict(doc.get("domain", {}))
        exper = dict(doc.get("experiments", {}))
        _reject_unknown("path", path, _PATH_KEYS)
        _reject_unknown("domain", domain, _DOMAIN_KEYS)
        _reject_unknown("experiments", exper, _EXPERIMENT_KEYS)
        kwargs = {"density": density}
        for key in ("n_steps", "t_init", "t_switch", "geometric_frac", "n_checkpoints"):
            if key in path:
                kwargs[key] = path[key]
        for src, dst in (("theta", "theta"), ("kappa", "kappa"), ("W", "W"),
                         ("n_im", "n_im"), ("n_re", "n_re")):
            if src in domain:
                kwargs[dst] = domain[src]
        for src, dst in (("n_values", "n_values"), ("trials", "trials"),
                         ("seed", "base_seed"), ("marginal_times", "marginal_times"),
                         ("char_im", "char_im"), ("senergy_times", "senergy_times"),
                         ("ode_tolerance", "ode_tolerance"), ("run", "experiments")):
            if src in exper:
                kwargs[dst] = exper[src]
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def domain(self, n: int) -> SpectralDomain:
        return SpectralDomain(n=n, theta=self.theta, kappa=self.kappa, W=self.W)

    def schedule(self) -> np.ndarray:
        return geometric_uniform_schedule(
            t_init=self.t_init, n_steps=self.n_steps,
            t_switch=self.t_switch, geometric_frac=self.geometric_frac)

    def path_config(self, n: int, trial: int,
                    checkpoints: np.ndarray | None = None) -> PathConfig:
        sched = self.schedule()
        if checkpoints is None:
            checkpoints = checkpoint_times(sched, n_checkpoints=self.n_checkpoints)
        return PathConfig(n=n, base_seed=self.base_seed, trial=trial,
                          t_init=self.t_init, schedule=sched, checkpoints=checkpoints)

    def trial_streams(self) -> list:
        """Documented stream derivation, one entry per (N, trial)."""
        return [(n, t, (streams.PURPOSE_PATH, n, t))
                for n in self.n_values for t in range(self.trials)]


# ------------------------------------------------------------- fitting


@dataclass
class ScalingFit:
    """OLS of log y against log x."""

    slope: float
    intercept: float
    stderr: float
    n_points: int

    @property
    def ci95(self) -> tuple:
        half = 1.96 * self.stderr
        return (self.slope - half, self.slope + half)

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept,
                "stderr": self.stderr, "n_points": self.n_points,
                "ci95": list(self.ci95)}


def fit_scaling(xs: Sequence[float], ys: Sequence[float]) -> ScalingFit:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size != y.size or x.size < 3:
        raise DegenerateFit("scaling fit needs at least 3 paired points")
    if np.any(x <= 0.0) or np.any(y <= 0.0):
        raise ValueError("scaling fit requires positive data")
    lx, ly = np.log(x), np.log(y)
    if np.ptp(lx) == 0.0:
        raise DegenerateFit("predictor has zero spread")
    res = stats.linregress(lx, ly)
    return ScalingFit(slope=float(res.slope), intercept=float(res.intercept),
                      stderr=float(res.stderr), n_points=int(x.size))


def domination_quantile(ratios: Sequence[float], q: float, n: int) -> float:
    """Exponent e with quantile_q(ratios) = n**e; small e stands in for "<<"."""
    r = np.asarray(ratios, dtype=float)
    if r.size == 0:
        raise EmptySample("no ratio samples")
    if np.any(r < 0.0):
        raise ValueError("ratio samples must be nonnegative")
    if not 0.0 < q < 1.0:
        raise ValueError("quantile must lie in (0, 1)")
    if n < 2:
        raise ValueError("n must be >= 2")
    qv = float(np.quantile(r, q))
    if qv == 0.0:
        # a flat variance profile makes the statistic vanish identically
        raise DegenerateFit("quantile of ratios is zero, exponent undefined")
    return float(np.log(qv) / np.log(n))


# ------------------------------------------------------- worker plumbing


@dataclass
class TrialFailure:
    n: int
    trial: int
    message: str

    def to_dict(self) -> dict:
        return {"n": self.n, "trial": self.trial, "message": self.message}


_STATE = None          # (cd, cfg) for the current trial map
_THREAD_LIMIT = None   # keep the limiter alive for the worker lifetime


def _worker_init(cd, cfg):
    global _STATE, _THREAD_LIMIT
    _STATE = (cd, cfg)
    if _THREAD_LIMIT is None:
        try:
            from threadpoolctl import threadpool_limits
            _THREAD_LIMIT = threadpool_limits(limits=1)
        except Exception:
            _THREAD_LIMIT = False


def _map_trials(worker, cd, cfg, tasks):
    """Run (n, trial) tasks, results in task order at any pool size."""
    global _STATE
    if cfg.threads <= 1 or len(tasks) <= 1:
        _STATE = (cd, cfg)
        try:
            return [worker(t) for t in tasks]
        finally:
            _STATE = None
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(processes=min(cfg.threads, len(tasks)),
                  initializer=_worker_init, initargs=(cd, cfg)) as pool:
        return list(pool.imap(worker, tasks, chunksize=1))


def _collect(results, unpack):
    """Split ok/fail worker results, preserving order."""
    failures = []
    for res in results:
        if res[0] == "fail":
            failures.append(TrialFailure(n=res[1], trial=res[2], message=res[3]))
        else:
            unpack(res)
    return failures


# ------------------------------------------------------------------ lsc


def _lsc_trial(task):
    n, trial = task
    cd, cfg = _STATE
    try:
        dom = cfg.domain(n)
        path = evolve(cd, cfg.path_config(n, trial), keep="last")
        lam = linalg.eigvalsh(path.states[-1].H, check_finite=False)
        rows = []
        for z in dom.z_grid(cfg.n_im, cfg.n_re).ravel():
            tm = np.mean(1.0 / (lam - z))
            rows.append((n, trial, float(z.real), float(z.imag),
                         float(abs(tm - msc(z))),
                         float(1.0 / np.sqrt(n * z.imag))))
        return ("ok", n, trial, rows)
    except Exception as exc:
        return ("fail", n, trial, f"{type(exc).__name__}: {exc}")


@dataclass
class LscReport:
    """Trace-law errors with their scaling fit.

    sup_table rows are (n, im_z, sup_err, normalizer): the per-(N, Im z)
    sup over Re z of the median-over-trials error, the points the slope
    is fitted through.
    """

    density_kind: str
    n_values: tuple
    trials: int
    base_seed: int
    theta: float
    grid_shape: tuple
    rows: list
    sup_table: list
    per_n: dict
    fit: ScalingFit
    trial_streams: list
    failures: list = field(default_factory=list)

    def csv_tables(self) -> list:
        return [("lsc", LSC_COLUMNS, self.rows)]

    def summary(self) -> dict:
        return {
            "experiment": "lsc",
            "density": self.density_kind,
            "n_values": list(self.n_values),
            "trials": self.trials,
            "seed": self.base_seed,
            "theta": self.theta,
            "grid_shape": list(self.grid_shape),
            "fit": self.fit.to_dict(),
            "sup_table": [list(r) for r in self.sup_table],
            "per_n": {str(n): v for n, v in self.per_n.items()},
            "failures": [f.to_dict() for f in self.failures],
        }


def aggregate_lsc(rows, trials):
    """Median over trials per z, sup over Re per Im level, slope fit.

    Shared by run_lsc and the acceptance suite so both see the identical
    reduction.  Returns (sup_table, per_n, fit).
    """
    cells = {}
    raw_per_n = {}
    for n, _trial, re, im, err, norm in rows:
        cells.setdefault((n, im, re), []).append(err)
        raw_per_n.setdefault(n, []).append(err)
    med = {}
    for (n, im, re), v in cells.items():
        med.setdefault((n, im), {})[re] = float(np.median(v))
    sup_table = []
    xs, ys = [], []
    for (n, im), by_re in med.items():
        sup = max(by_re.values())
        sup_table.append((n, im, sup, float(1.0 / np.sqrt(n * im))))
        xs.append(n * im)
        ys.append(sup)
    per_n = {}
    for n, errs in raw_per_n.items():
        e = np.asarray(errs)
        top = [s for (nn, _im, s, _norm) in sup_table if nn == n]
        per_n[n] = {"sup": float(max(top)),
                    "median": float(np.median(e)),
                    "q95": float(np.quantile(e, 0.95)),
                    "observations": int(e.size),
                    "trials": trials}
    return sup_table, per_n, fit_scaling(xs, ys)


def run_lsc(config: ExperimentConfig,
            cd: CalibratedDensity | None = None) -> LscReport:
    """Evolve to t = 1 per trial, sweep the z-grid, fit the error slope."""
    if cd is None:
        cd = calibrate(config.density)
    tasks = [(n, t) for n in config.n_values for t in range(config.trials)]
    rows = []
    failures = _collect(_map_trials(_lsc_trial, cd, config, tasks),
                        lambda res: rows.extend(res[3]))
    if not rows:
        raise RuntimeError("all trials failed; no rows to aggregate")
    sup_table, per_n, fit = aggregate_lsc(rows, config.trials)
    return LscReport(
        density_kind=config.density.kind, n_values=config.n_values,
        trials=config.trials, base_seed=config.base_seed, theta=config.theta,
        grid_shape=(config.n_im, config.n_re), rows=rows, sup_table=sup_table,
        per_n=per_n, fit=fit, trial_streams=config.trial_streams(),
        failures=failures)


# ------------------------------------------------------------- marginal


def nearest_schedule_times(schedule: np.ndarray, targets: Sequence[float]) -> list:
    """Closest schedule entries to the requested times, sorted, deduplicated."""
    out = []
    for t in targets:
        k = int(np.argmin(np.abs(schedule - t)))
        out.append(float(schedule[k]))
    return sorted(set(out))


def _marginal_trial(task):
    n, trial = task
    cd, cfg = _STATE
    try:
        t_values = nearest_schedule_times(cfg.schedule(), cfg.marginal_times)
        path = evolve(cd, cfg.path_config(n, trial, checkpoints=np.array(t_values)))
        iu = np.triu_indices(n)
        ent = {s.t: s.H[iu].copy() for s in path.states}
        return ("ok", n, trial, ent)
    except Exception as exc:
        return ("fail", n, trial, f"{type(exc).__name__}: {exc}")


@dataclass
class MarginalReport:
    """Two-sample KS of pooled rescaled entries against the direct sampler."""

    density_kind: str
    n_values: tuple
    trials: int
    base_seed: int
    rows: list
    failures: list = field(default_factory=list)

    def csv_tables(self) -> list:
        return [("marginal", MARGINAL_COLUMNS, self.rows)]

    def summary(self) -> dict:
        return {
            "experiment": "marginal",
            "density": self.density_kind,
            "n_values": list(self.n_values),
            "trials": self.trials,
            "seed": self.base_seed,
            "rows": [dict(zip(MARGINAL_COLUMNS, r)) for r in self.rows],
            "failures": [f.to_dict() for f in self.failures],
        }


def run_marginal(config: ExperimentConfig,
                 cd: CalibratedDensity | None = None) -> MarginalReport:
    """Pool sqrt(N/t) H_ij(t) over trials and KS-test against sample_iid.

    Entries include the diagonal (same marginal law).  The reference
    sample is drawn from a dedicated stream keyed by (N, time index) and
    matches the pooled sample size.
    """
    if cd is None:
        cd = calibrate(config.density)
    tasks = [(n, t) for n in config.n_values for t in range(config.trials)]
    pooled = {}
    def unpack(res):
        _tag, n, _trial, ent = res
        for t, vec in ent.items():
            pooled.setdefault((n, t), []).append(vec)
    failures = _collect(_map_trials(_marginal_trial, cd, config, tasks), unpack)
    rows = []
    for n in config.n_values:
        t_list = sorted(t for (nn, t) in pooled if nn == n)
        for ti, t in enumerate(t_list):
            sample = np.sqrt(n / t) * np.concatenate(pooled[(n, t)])
            gen = streams.stream(config.base_seed, streams.PURPOSE_DIRECT, n, ti)
            direct = sample_iid(cd, sample.size, gen)
            ks = stats.ks_2samp(sample, direct)
            rows.append((n, float(t), int(sample.size),
                         float(ks.statistic), float(ks.pvalue),
                         int(ks.pvalue < 0.01)))
    return MarginalReport(density_kind=config.density.kind,
                          n_values=config.n_values, trials=config.trials,
                          base_seed=config.base_seed, rows=rows,
                          failures=failures)


# ------------------------------------------------------------ entrywise


@dataclass
class EntrywiseReport:
    """Per-matrix entrywise maxima over the z-grid."""

    rows: list                    # (re_z, im_z, max_diag_err, max_offdiag, max_schur)
    max_diag_err: float
    max_offdiag: float
    max_schur_residual: float


def run_entrywise(H1: np.ndarray, dom: SpectralDomain,
                  n_im: int = 8, n_re: int = 9) -> EntrywiseReport:
    """Entrywise resolvent statistics of one t = 1 matrix.

    Per z: max_k |G_kk - msc|, max_{j != k} |G_jk|, and the
    self-consistency defect max_k |1/G_kk + z + msc| divided by the
    sqrt((1 + Im msc)/(N Im z)) normalizer.
    """
    n = H1.shape[0]
    er = EigenResolvent(H1)
    rows = []
    for z in dom.z_grid(n_im, n_re).ravel():
        m = msc(z)
        G = er.full(z)
        gd = G.diagonal()
        off = G.copy()
        np.fill_diagonal(off, 0.0)
        norm = np.sqrt((1.0 + m.imag) / (n * z.imag))
        rows.append((float(z.real), float(z.imag),
                     float(np.max(np.abs(gd - m))),
                     float(np.max(np.abs(off))),
                     float(np.max(np.abs(1.0 / gd + z + m)) / norm)))
    arr = np.asarray([r[2:] for r in rows])
    return EntrywiseReport(rows=rows,
                           max_diag_err=float(arr[:, 0].max()),
                           max_offdiag=float(arr[:, 1].max()),
                           max_schur_residual=float(arr[:, 2].max()))


def _entrywise_trial(task):
    n, trial = task
    cd, cfg = _STATE
    try:
        path = evolve(cd, cfg.path_config(n, trial), keep="last")
        rep = run_entrywise(path.states[-1].H, cfg.domain(n), cfg.n_im, cfg.n_re)
        rows = [(n, trial) + r for r in rep.rows]
        return ("ok", n, trial, rows)
    except Exception as exc:
        return ("fail", n, trial, f"{type(exc).__name__}: {exc}")


@dataclass
class EntrywiseSweepReport:
    """Entrywise maxima across trials with slope fits per statistic.

    fits maps statistic name to the ScalingFit of the per-(N, Im z)
    median (over trials) of the sup over Re z, against N * Im z.
    """

    density_kind: str
    n_values: tuple
    trials: int
    base_seed: int
    rows: list
    fits: dict
    failures: list = field(default_factory=list)

    def csv_tables(self) -> list:
        return [("entrywise", ENTRYWISE_COLUMNS, self.rows)]

    def summary(self) -> dict:
        return {
            "experiment": "entrywise",
            "density": self.density_kind,
            "n_values": list(self.n_values),
            "trials": self.trials,
            "seed": self.base_seed,
            "fits": {k: (f.to_dict() if f else None) for k, f in self.fits.items()},
            "failures": [f.to_dict() for f in self.failures],
        }


def aggregate_entrywise(rows):
    """Slope fits of the entrywise maxima against N * Im z."""
    fits = {}
    for idx, name in ((4, "diag"), (5, "offdiag"), (6, "schur")):
        cells = {}
        for r in rows:
            cells.setdefault((r[0], r[3], r[2]), []).append(r[idx])
        level = {}
        for (n, im, re), v in cells.items():
            level.setdefault((n, im), {})[re] = float(np.median(v))
        xs, ys = [], []
        for (n, im), by_re in level.items():
            xs.append(n * im)
            ys.append(max(by_re.values()))
        try:
            fits[name] = fit_scaling(xs, ys)
        except DegenerateFit:
            fits[name] = None
    return fits


def run_entrywise_sweep(config: ExperimentConfig,
                        cd: CalibratedDensity | None = None) -> EntrywiseSweepReport:
    if cd is None:
        cd = calibrate(config.density)
    tasks = [(n, t) for n in config.n_values for t in range(config.trials)]
    rows = []
    failures = _collect(_map_trials(_entrywise_trial, cd, config, tasks),
                        lambda res: rows.extend(res[3]))
    if not rows:
        raise RuntimeError("all trials failed; no rows to aggregate")
    return EntrywiseSweepReport(
        density_kind=config.density.kind, n_values=config.n_values,
        trials=config.trials, base_seed=config.base_seed, rows=rows,
        fits=aggregate_entrywise(rows), failures=failures)


# ------------------------------------------------------- characteristic


def _characteristic_trial(task):
    n, trial = task
    cd, cfg = _STATE
    try:
        dom = cfg.domain(n)
        path = evolve(cd, cfg.path_config(n, trial))
        ev = PathTraceEvaluator(path)
        tg = ev.ode_times
        z_row = np.linspace(cfg.W[0], cfg.W[1], cfg.n_re) + 1j * cfg.char_im

        map_rows, pair_rows, sen_rows = [], [], []
        curves = []
        for z in z_row:
            mr = map_to_initial(ev, z, dom, tg)
            if mr.in_D0:
                fc = flow_gamma(ev, mr.w, dom, tg)
                rt = float(abs(fc.endpoint - z))
                drift, ratio = fc.drift_sup, float(fc.ratio)
                stopped, tau = int(fc.stopped), (fc.tau if fc.stopped else float("nan"))
            else:
                fc, rt = None, float("nan")
                drift = ratio = float("nan")
                stopped, tau = 0, float("nan")
            curves.append(fc)
            map_rows.append((n, trial, float(z.real), float(z.imag),
                             float(mr.w.real), float(mr.w.imag),
                             float(mr.residual), rt, int(mr.in_D0),
                             drift, ratio, stopped, tau))
        for i in range(len(curves) - 1):
            if curves[i] is not None and curves[i + 1] is not None:
                ratio = contraction_check(curves[i], curves[i + 1])
                pair_rows.append((n, trial, float(z_row[i].real),
                                  float(z_row[i + 1].real), float(cfg.char_im),
                                  float(ratio)))

        # self-energy ratios at the curve endpoints: t = 1 over the z-grid
        H1 = path.states[-1].H
        sig1 = path.states[-1].sigma
        er = EigenResolvent(H1)
        for z in dom.z_grid(cfg.n_im, cfg.n_re).ravel():
            st = self_energy_from_diag(sig1, er.diag(z), z)
            sen_rows.append((n, trial, 1.0, float(z.real), float(z.imag),
                             st.error, st.normalizer, st.ratio))
        # and along two curves at thinned interior checkpoints
        idxs = sorted(set(np.linspace(1, tg.size - 2, cfg.senergy_times).astype(int)))
        for ci in (0, cfg.n_re // 2):
            fc = curves[ci]
            if fc is None:
                continue
            for k in idxs:
                if fc.stopped and tg[k] >= fc.tau:
                    break
                state = path.states[k - 1]
                sample = resolvent(state.H, complex(fc.xi[k]), check=False)
                st = self_energy_error(state.sigma, sample)
                sen_rows.append((n, trial, float(tg[k]),
                                 float(fc.xi[k].real), float(fc.xi[k].imag),
                                 st.error, st.normalizer, st.ratio))
        return ("ok", n, trial, map_rows, pair_rows, sen_rows)
    except Exception as exc:
        return ("fail", n, trial, f"{type(exc).__name__}: {exc}")


@dataclass
class CharacteristicReport:
    """Flow inversion, drift, contraction, and self-energy diagnostics."""

    density_kind: str
    n_values: tuple
    trials: int
    base_seed: int
    theta: float
    map_rows: list
    pair_rows: list
    senergy_rows: list
    per_n: dict
    failures: list = field(default_factory=list)

    def csv_tables(self) -> list:
        return [("characteristics", CHAR_MAP_COLUMNS, self.map_rows),
                ("characteristics_pairs", CHAR_PAIR_COLUMNS, self.pair_rows),
                ("characteristics_senergy", CHAR_SENERGY_COLUMNS, self.senergy_rows)]

    def summary(self) -> dict:
        return {
            "experiment": "characteristics",
            "density": self.density_kind,
            "n_values": list(self.n_values),
            "trials": self.trials,
            "seed": self.base_seed,
            "theta": self.theta,
            "per_n": {str(n): v for n, v in self.per_n.items()},
            "failures": [f.to_dict() for f in self.failures],
        }


def aggregate_characteristic(map_rows, pair_rows, senergy_rows,
                             contraction_slack: float = 0.05) -> dict:
    """Per-N quantiles for drift, contraction, inversion, self-energy."""
    per_n = {}
    n_set = sorted({r[0] for r in map_rows})
    for n in n_set:
        drift_sups = {}
        rt_errs, residuals, in_d0 = [], [], 0
        rows_n = [r for r in map_rows if r[0] == n]
        for r in rows_n:
            if r[8]:
                in_d0 += 1
                drift_sups.setdefault(r[1], []).append(r[10])
                rt_errs.append(r[7])
            residuals.append(r[6])
        trial_ratio = [max(v) for _t, v in sorted(drift_sups.items())]
        pn = {"z_count": len(rows_n),
              "in_D0_fraction": in_d0 / len(rows_n),
              "map_residual_q95": float(np.quantile(residuals, 0.95)),
              "roundtrip_q95": float(np.quantile(rt_errs, 0.95)) if rt_errs else float("nan"),
              "drift_ratio_q95": float(np.quantile(trial_ratio, 0.95)) if trial_ratio else float("nan")}
        pairs = [r[5] for r in pair_rows if r[0] == n]
        pn["contraction_worst"] = float(max(pairs)) if pairs else float("nan")
        pn["contraction_violations"] = int(sum(p > 1.0 + contraction_slack for p in pairs))
        end = [r[7] for r in senergy_rows if r[0] == n and r[2] == 1.0]
        along = [r[7] for r in senergy_rows if r[0] == n and r[2] != 1.0]
        if end:
            try:
                pn["senergy_eps_hat"] = domination_quantile(end, 0.95, n)
            except DegenerateFit:
                pn["senergy_eps_hat"] = None
            pn["senergy_ratio_q95"] = float(np.quantile(end, 0.95))
        if along:
            pn["senergy_curve_q95"] = float(np.quantile(along, 0.95))
        per_n[n] = pn
    return per_n


def run_characteristic(config: ExperimentConfig,
                       cd: CalibratedDensity | None = None) -> CharacteristicReport:
    """Invert the flow from Im z = char_im, then run the forward curves.

    Per trial: map_to_initial per grid point, forward stopped curves from
    the recovered points (round-trip error and drift), contraction checks
    on adjacent pairs, and self-energy ratios at t = 1 plus thinned
    interior checkpoints.
    """
    if cd is None:
        cd = calibrate(config.density)
    tasks = [(n, t) for n in config.n_values for t in range(config.trials)]
    map_rows, pair_rows, sen_rows = [], [], []
    def unpack(res):
        map_rows.extend(res[3])
        pair_rows.extend(res[4])
        sen_rows.extend(res[5])
    failures = _collect(_map_trials(_characteristic_trial, cd, config, tasks), unpack)
    if not map_rows:
        raise RuntimeError("all trials failed; no rows to aggregate")
    return CharacteristicReport(
        density_kind=config.density.kind, n_values=config.n_values,
        trials=config.trials, base_seed=config.base_seed, theta=config.theta,
        map_rows=map_rows, pair_rows=pair_rows, senergy_rows=sen_rows,
        per_n=aggregate_characteristic(map_rows, pair_rows, sen_rows),
        failures=failures)


# ------------------------------------------------------------- reports


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[tuple]) -> None:
    lines = [",".join(columns)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_report_csv(report, out_dir) -> list:
    """One file per (table, N): {experiment}-{N}-{seed}.csv.  Returns paths."""
    paths = []
    for exp, columns, rows in report.csv_tables():
        by_n = {}
        for row in rows:
            by_n.setdefault(int(row[0]), []).append(row)
        for n in sorted(by_n):
            path = os.path.join(out_dir, f"{exp}-{n}-{report.base_seed}.csv")
            write_csv(path, columns, by_n[n])
            paths.append(path)
    return paths


def failure_fraction(report) -> float:
    total = len(report.n_values) * report.trials
    return len(report.failures) / total if total else 0.0
