"""Monte Carlo ensembles and three-valued statistical verdicts."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import math
import os
from typing import Optional

import numpy as np

from .sde import simulate_batch

DEFAULT_N = 4096
DEFAULT_WINDOW = 0.2
CHUNK = 256
MAX_DIVERGED_FRACTION = 0.01
Z_PASS = 3.0
# beyond Z_PASS the error bar may still straddle the threshold: inconclusive
Z_FAIL = 6.0

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


class EnsembleDiverged(RuntimeError):
    def __init__(self, count, total):
        self.count, self.total = int(count), int(total)
        super().__init__(f"{count}/{total} paths diverged (limit "
                         f"{MAX_DIVERGED_FRACTION:.0%})")


def _se(v):
    """Standard error along axis 0; exactly zero where all paths agree."""
    se = v.std(axis=0, ddof=1) / math.sqrt(v.shape[0])
    return np.where(np.all(v == v[0], axis=0), 0.0, se)


def resolve_threads(threads=None):
    """Explicit value, else SHHLAB_THREADS, else 1; 0 means all cores."""
    if threads is None:
        threads = int(os.environ.get("SHHLAB_THREADS", "1") or 1)
    threads = int(threads)
    if threads < 0:
        raise ValueError("threads must be >= 0")
    return (os.cpu_count() or 1) if threads == 0 else threads


def path_rng(master_seed, index):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))))


def path_increments(master_seed, indices, steps, dim, h):
    """Brownian increments (paths, steps, dim) from per-path seeded streams."""
    sq = math.sqrt(h)
    return np.stack([path_rng(master_seed, i).standard_normal((steps, dim)) * sq
                     for i in indices])


@dataclass
class TrajectoryEnsemble:
    times: np.ndarray
    norms: np.ndarray            # (N, steps + 1), NaN rows for diverged paths
    diverged: np.ndarray
    diverged_at: np.ndarray
    master_seed: int
    safeguard_hits: int = 0
    thresholds: tuple = ()
    final_states: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    controls: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.norms.shape[0]

    @property
    def valid(self):
        return ~self.diverged

    @property
    def n_valid(self):
        return int(self.valid.sum())

    @property
    def n_diverged(self):
        return int(self.diverged.sum())

    def _stats(self, values):
        v = values[self.valid]
        n = v.shape[0]
        mean = v.mean(axis=0)
        se = _se(v) if n > 1 else np.full_like(mean, np.nan)
        return mean, se

    @property
    def mean_norm(self):
        return self._stats(self.norms)[0]

    @property
    def se_norm(self):
        return self._stats(self.norms)[1]

    @property
    def mean_sq(self):
        return self._stats(self.norms ** 2)[0]

    @property
    def se_sq(self):
        return self._stats(self.norms ** 2)[1]

    @property
    def path_sup(self):
        """sup over the horizon of |X_t| per valid path."""
        return np.max(self.norms[self.valid], axis=1)

    def running_sup(self):
        return np.maximum.accumulate(self.norms[self.valid], axis=1)

    def exceedance(self, c):
        """Fraction of valid paths whose running sup exceeds c, per time."""
        return np.mean(self.running_sup() > c, axis=0)

    def window_mask(self, window=DEFAULT_WINDOW):
        t = self.times
        return t >= t[-1] - window * (t[-1] - t[0]) - 1e-12

    def windowed(self, window=DEFAULT_WINDOW, power=1):
        """Mean over the final window and its SE from per-path time averages."""
        per_path = np.mean(self.norms[self.valid][:, self.window_mask(window)] ** power, axis=1)
        n = per_path.shape[0]
        se = float(_se(per_path)) if n > 1 else math.nan
        return float(per_path.mean()), se

    def statistics_table(self):
        cols = {"t": self.times, "mean_norm": self.mean_norm, "se_norm": self.se_norm,
                "mean_sq": self.mean_sq, "se_sq": self.se_sq}
        for c in self.thresholds:
            cols[f"sup_exceed_frac@{c!r}"] = self.exceedance(c)
        return cols

    def to_csv(self, path):
        cols = self.statistics_table()
        names = list(cols)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(names) + "\n")
            for row in zip(*(cols[k] for k in names)):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _run_chunk(system, policy, config, master_seed, indices, keep):
    plant = getattr(system, "plant", system)
    inc = path_increments(master_seed, indices, config.total_steps, plant.noise_dim,
                          config.substep)
    batch = simulate_batch(system, policy, config, inc)
    norms = np.linalg.norm(batch.states, axis=2)
    out = {"norms": norms, "diverged": batch.diverged, "diverged_at": batch.diverged_at,
           "final": batch.states[:, -1], "hits": batch.safeguard_hits}
    if keep:
        out.update(states=batch.states, noise=batch.noise, controls=batch.controls)
    return out


def run_ensemble(system, policy, config, N=DEFAULT_N, master_seed=0, thresholds=(),
                 threads=None, keep_states=False, chunk=CHUNK, allow_divergence=False):
    """Simulate N paths; path i uses the stream SeedSequence(master_seed, spawn_key=(i,)).

    Chunks are fixed by path index, so results do not depend on ``threads``.
    Diverged paths are excluded from statistics; more than 1% raises
    :class:`EnsembleDiverged` unless ``allow_divergence``.
    """
    if N < 2:
        raise ValueError("ensemble needs N >= 2")
    starts = list(range(0, N, chunk))
    jobs = [range(s, min(s + chunk, N)) for s in starts]
    nthreads = min(resolve_threads(threads), len(jobs))
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            parts = list(pool.map(
                lambda idx: _run_chunk(system, policy, config, master_seed, idx, keep_states),
                jobs))
    else:
        parts = [_run_chunk(system, policy, config, master_seed, idx, keep_states)
                 for idx in jobs]

    def cat(key):
        if parts[0].get(key) is None:
            return None
        return np.concatenate([p[key] for p in parts])

    ens = TrajectoryEnsemble(
        times=config.times(), norms=cat("norms"), diverged=cat("diverged"),
        diverged_at=cat("diverged_at"), master_seed=int(master_seed),
        safeguard_hits=sum(p["hits"] for p in parts), thresholds=tuple(thresholds),
        final_states=cat("final"), states=cat("states"), noise=cat("noise"),
        controls=cat("controls"),
        meta={"delta": config.delta, "substep": config.substep, "horizon": config.horizon})
    if not allow_divergence and ens.n_diverged > MAX_DIVERGED_FRACTION * N:
        raise EnsembleDiverged(ens.n_diverged, N)
    return ens


@dataclass
class Verdict:
    name: str
    status: str
    statistic: float
    threshold: float
    tolerance: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.status == PASS

    def to_dict(self):
        def clean(v):
            if isinstance(v, (float, np.floating)):
                return float(v) if math.isfinite(v) else repr(float(v))
            if isinstance(v, np.integer):
                return int(v)
            return v
        return {"name": self.name, "status": self.status,
                "statistic": clean(self.statistic), "threshold": clean(self.threshold),
                "tolerance": clean(self.tolerance),
                "details": {k: clean(v) for k, v in self.details.items()}}


def _upper_verdict(name, stat, threshold, se, details):
    """Pass iff stat <= threshold + 3 se; fail iff stat > threshold + 6 se."""
    if not (math.isfinite(stat) and math.isfinite(se)):
        return Verdict(name, FAIL if not math.isfinite(stat) else INCONCLUSIVE,
                       stat, threshold, math.nan, details)
    tol = Z_PASS * se
    if stat <= threshold + tol:
        status = PASS
    elif stat > threshold + Z_FAIL * se:
        status = FAIL
    else:
        status = INCONCLUSIVE
    return Verdict(name, status, stat, threshold, tol, details)


def reaching_time(times, curve, level):
    inside = np.flatnonzero(curve <= level)
    return float(times[inside[0]]) if inside.size else math.inf


def verdict_convergence_in_mean(ens, r, rho=0.0, window=DEFAULT_WINDOW):
    """Final-window E|X_t| against r v rho, plus the empirical reaching time."""
    target = max(r, rho)
    if ens.n_valid < 2:
        return Verdict("convergence_in_mean", FAIL, math.inf, target, math.nan,
                       {"reason": "fewer than two valid paths"})
    m, se = ens.windowed(window)
    t_reach = reaching_time(ens.times, ens.mean_norm, target)
    return _upper_verdict("convergence_in_mean", m, target, se,
                          {"reaching_time": t_reach, "window": window, "r": r, "rho": rho})


def verdict_mean_square(ens, r, rho=0.0, window=DEFAULT_WINDOW):
    """As the mean verdict with E|X_t|^2 against r v rho (squared radii expected)."""
    target = max(r, rho)
    if ens.n_valid < 2:
        return Verdict("mean_square", FAIL, math.inf, target, math.nan,
                       {"reason": "fewer than two valid paths"})
    m, se = ens.windowed(window, power=2)
    t_reach = reaching_time(ens.times, ens.mean_sq, target)
    return _upper_verdict("mean_square", m, target, se,
                          {"reaching_time": t_reach, "window": window, "r": r, "rho": rho})


def _lower_fraction_verdict(name, successes, n, p0, details):
    """Pass iff p_hat >= p0 - 3 se, se the binomial SE at p0; fail below p0 - 6 se."""
    p_hat = successes / n if n else math.nan
    se = math.sqrt(max(p0 * (1.0 - p0), 0.0) / n) if n else math.nan
    tol = Z_PASS * se
    if not math.isfinite(p_hat):
        status = FAIL
    elif p_hat >= p0 - tol:
        status = PASS
    elif p_hat < p0 - Z_FAIL * se:
        status = FAIL
    else:
        status = INCONCLUSIVE
    return Verdict(name, status, p_hat, p0, tol, details)


def verdict_stability_in_probability(ens, eps, c):
    """Fraction of paths with sup |X_t| <= c eps against 1 - eps."""
    level = c * eps
    ok = int(np.sum(ens.path_sup <= level))
    return _lower_fraction_verdict("stability_in_probability", ok, ens.n_valid, 1.0 - eps,
                                   {"eps": eps, "c": c, "level": level})


def verdict_doob(ens, c, R_star):
    """Fraction with sup |X_t| <= c against the bound 1 - R*/c."""
    ok = int(np.sum(ens.path_sup <= c))
    return _lower_fraction_verdict("doob_bound", ok, ens.n_valid, max(1.0 - R_star / c, 0.0),
                                   {"c": c, "R_star": R_star})


def monotone_containment(ens, r, rho=0.0):
    """After first entry of E|X_t| into r v rho it never exceeds r v rho + 3 SE."""
    target = max(r, rho)
    mean, se = ens.mean_norm, ens.se_norm
    t_in = reaching_time(ens.times, mean, target)
    if not math.isfinite(t_in):
        return Verdict("monotone_containment", FAIL, math.inf, target, math.nan,
                       {"reason": "mean norm never enters the target"})
    after = ens.times >= t_in
    excess = mean[after] - (target + Z_PASS * se[after])
    worst = float(np.max(excess))
    status = PASS if worst <= 0 else FAIL
    return Verdict("monotone_containment", status, float(np.max(mean[after])), target,
                   float(Z_PASS * np.max(se[after])), {"entry_time": t_in,
                                                       "worst_excess": worst})


@dataclass
class SweepRow:
    delta: float
    mean: float
    se: float
    verdict: str
    n_valid: int


@dataclass
class SweepTable:
    rows: list
    improvement: float
    plateau: bool
    plateau_threshold: float = 0.2

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("delta,final_mean_norm,se,verdict,n_valid\n")
            for r in self.rows:
                fh.write(f"{r.delta!r},{r.mean!r},{r.se!r},{r.verdict},{r.n_valid}\n")

    def to_dict(self):
        return {"rows": [r.__dict__ for r in self.rows],
                "improvement": self.improvement, "plateau": self.plateau,
                "plateau_threshold": self.plateau_threshold}


def relative_improvement(coarse, fine):
    return (coarse - fine) / coarse if coarse > 0 else 0.0


def delta_sweep(system, policy, template, deltas, N=DEFAULT_N, master_seed=0, r=0.0,
                rho=0.0, window=DEFAULT_WINDOW, threads=None, substeps=None,
                plateau_threshold=0.2):
    """Final windowed E|X_t| per delta.

    A plateau is reported when going from the second-smallest to the smallest
    delta improves the final mean norm by less than ``plateau_threshold``.
    ``substeps`` fixes delta/h; by default the template's ratio is kept.
    """
    deltas = sorted((float(d) for d in deltas), reverse=True)
    ratio = substeps or template.steps_per_hold
    rows = []
    for d in deltas:
        cfg = replace(template, delta=d, substep=d / ratio)
        ens = run_ensemble(system, policy, cfg, N, master_seed, threads=threads)
        m, se = ens.windowed(window)
        v = verdict_convergence_in_mean(ens, r, rho, window) if r > 0 else None
        rows.append(SweepRow(d, m, se, v.status if v else "", ens.n_valid))
    if len(rows) >= 2:
        imp = relative_improvement(rows[-2].mean, rows[-1].mean)
    else:
        imp = 0.0
    return SweepTable(rows, imp, len(rows) >= 2 and imp < plateau_threshold,
                      plateau_threshold)
