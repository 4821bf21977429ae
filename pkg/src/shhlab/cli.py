"""Command-line harness: params | simulate | ensemble | sweep."""
import hashlib
import json
import math
import os
import platform
import sys
import time

import click
import numpy as np

from . import __version__, analysis, config as cfgmod
from .analysis import EnsembleDiverged, path_increments
from .benchmarks import robot_comparison
from .lyapunov import GrowthConditionError
from .noise import NoiseBoundaryError
from .nonsmooth import ProxSolverError, compute_nonsmooth_settings
from .params import InfeasibleSettings, compute_settings, doob_confidence
from .sde import AugmentedSde, IntegrationDiverged, simulate_batch

EXIT_OK, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3, 4, 5


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


def exit_code(verdicts):
    status = {v["status"] for v in verdicts}
    if "fail" in status:
        return EXIT_FAIL
    if "inconclusive" in status:
        return EXIT_INCONCLUSIVE
    return EXIT_OK


class Run:
    """Collects outputs and timings; writes the manifest last."""

    def __init__(self, command, cfg, out, threads):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.outputs = []
        self.timings = {}
        self.params = None
        self.verdicts = []
        self.extra = {}
        self.error = None
        os.makedirs(out, exist_ok=True)

    def path(self, name):
        self.outputs.append(name)
        return os.path.join(self.out, name)

    def timed(self, label, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.timings[label] = time.perf_counter() - t0

    def finish(self, code):
        manifest = {
            "tool": "shhlab",
            "version": __version__,
            "command": self.command,
            "config": self.cfg,
            "seed": self.cfg["ensemble"]["seed"],
            "threads": self.threads,
            "params": self.params,
            "verdicts": self.verdicts,
            "results": self.extra,
            "error": self.error,
            "exit_code": code,
            "numba": os.environ.get("SHHLAB_DISABLE_NUMBA", "") or "enabled",
            "python": platform.python_version(),
            "numpy": np.__version__,
            "timings": self.timings,
            "outputs": {name: _sha256(os.path.join(self.out, name)) for name in self.outputs},
        }
        with open(os.path.join(self.out, "manifest.json"), "w") as fh:
            json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return code


def _ledger(cfg, b, system):
    """Stabilization ledger for the configured benchmark, or None."""
    if b is None or not cfg["ledger"]["enabled"]:
        return None
    radii = cfg.get("radii", {})
    r, R = radii.get("r", b.radii[0]), radii.get("R", b.radii[1])
    led = cfg["ledger"]
    if hasattr(b.pair_or_clf, "alpha1"):
        return compute_settings(b.pair_or_clf, system, r, R, led["grid_density"],
                                led["safety"], led.get("r_prime"))
    ic, p = cfgmod.inf_convolution(cfg, b)
    a1, a2 = robot_comparison(safety=led["safety"])
    return compute_nonsmooth_settings(ic, system, a1, a2, r, R,
                                      min(led["grid_density"], 2 ** 12), led["safety"],
                                      led.get("r_prime"), p["control_grid_density"],
                                      p["evaluate_at"])


def _write_params(run, params):
    with open(run.path("params.txt"), "w") as fh:
        fh.write(params.report())
    run.params = params.to_dict()


def _setup(cfg):
    b = cfgmod.build_benchmark(cfg)
    system = cfgmod.system_of(cfg, b)
    return b, system


def cmd_params(run):
    cfg = run.cfg
    b, system = _setup(cfg)
    if b is None or not cfg["ledger"]["enabled"]:
        raise cfgmod.ConfigError("params needs a benchmark with the ledger enabled")
    params = run.timed("params", _ledger, cfg, b, system)
    _write_params(run, params)
    click.echo(params.report(), nl=False)
    return EXIT_OK


def _trajectory_csv(path, batch, steps_per_hold):
    states = batch.states[0]
    ctrl = np.repeat(batch.controls[0], steps_per_hold, axis=0)
    ctrl = np.concatenate([ctrl, ctrl[-1:]])
    cols = [batch.times[:, None], states, ctrl]
    names = ["t"] + [f"x{i}" for i in range(states.shape[1])] + \
            [f"u{i}" for i in range(ctrl.shape[1])]
    if batch.noise is not None:
        cols.append(batch.noise[0])
        names += [f"z{i}" for i in range(batch.noise.shape[2])]
    table = np.concatenate(cols, axis=1)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_simulate(run):
    """One path: the same stream as path 0 of an ensemble with this seed."""
    cfg = run.cfg
    b, system = _setup(cfg)
    policy = cfgmod.build_policy(cfg, b, system)
    sh = cfgmod.build_sample_hold(cfg)
    plant = getattr(system, "plant", system)
    inc = path_increments(cfg["ensemble"]["seed"], [0], sh.total_steps, plant.noise_dim,
                          sh.substep)
    batch = run.timed("simulate", simulate_batch, system, policy, sh, inc)
    _trajectory_csv(run.path("trajectory.csv"), batch, sh.steps_per_hold)
    run.extra = {"final_state": batch.states[0, -1], "safeguard_hits": batch.safeguard_hits}
    if batch.diverged[0]:
        raise IntegrationDiverged(batch.diverged_at[0])
    return EXIT_OK


def _ensemble_verdicts(cfg, ens, params):
    ecfg = cfg["ensemble"]
    radii = cfg.get("radii")
    out = []
    if params is not None:
        r, rho = params.r, params.rho
    elif radii is not None:
        r, rho = radii["r"], 0.0
    else:
        return out
    window = ecfg["window"]
    v = analysis.verdict_convergence_in_mean(ens, r, rho, window)
    out.append(v)
    out.append(analysis.verdict_mean_square(ens, r * r, rho * rho, window))
    out.append(analysis.monotone_containment(ens, r, rho))
    if params is not None:
        v.details["reaching_time_bound"] = params.T_bound
        v.details["reaching_time_within_bound"] = bool(
            v.details["reaching_time"] <= params.T_bound)
        for eps in ecfg["eps"]:
            c = params.R_star / eps
            out.append(analysis.verdict_doob(ens, c, params.R_star))
            out.append(analysis.verdict_stability_in_probability(ens, eps, c))
            out[-1].details["doob_bound"] = doob_confidence(params, c)
    return out


def cmd_ensemble(run):
    cfg = run.cfg
    b, system = _setup(cfg)
    policy = cfgmod.build_policy(cfg, b, system)
    sh = cfgmod.build_sample_hold(cfg)
    params = run.timed("params", _ledger, cfg, b, system)
    if params is not None:
        _write_params(run, params)
    ecfg = cfg["ensemble"]
    thresholds = list(ecfg["thresholds"])
    if params is not None:
        thresholds += [params.R_star / e for e in ecfg["eps"]]
    ens = run.timed("ensemble", analysis.run_ensemble, system, policy, sh, ecfg["N"],
                    ecfg["seed"], tuple(thresholds), run.threads)
    ens.to_csv(run.path("statistics.csv"))
    verdicts = _ensemble_verdicts(cfg, ens, params)
    run.verdicts = [v.to_dict() for v in verdicts]
    m, se = ens.windowed(ecfg["window"])
    run.extra = {"N": ens.N, "n_valid": ens.n_valid, "n_diverged": ens.n_diverged,
                 "windowed_mean_norm": m, "windowed_se": se,
                 "safeguard_hits": ens.safeguard_hits}
    for v in run.verdicts:
        click.echo(f"{v['name']}: {v['status']} (statistic={v['statistic']}, "
                   f"threshold={v['threshold']}, tolerance={v['tolerance']})")
    return exit_code(run.verdicts)


def cmd_sweep(run, deltas=None):
    cfg = run.cfg
    b, system = _setup(cfg)
    policy = cfgmod.build_policy(cfg, b, system)
    sh = cfgmod.build_sample_hold(cfg)
    deltas = deltas or cfg["sweep"].get("deltas") or [sh.delta]
    radii = cfg.get("radii", {})
    table = run.timed("sweep", analysis.delta_sweep, system, policy, sh, deltas,
                      cfg["ensemble"]["N"], cfg["ensemble"]["seed"],
                      radii.get("r", 0.0), 0.0, cfg["ensemble"]["window"], run.threads,
                      None, cfg["sweep"]["plateau_threshold"])
    table.to_csv(run.path("sweep.csv"))
    run.extra = table.to_dict()
    if len(table.rows) >= 2:
        status = "pass" if table.plateau else "fail"
        run.verdicts = [{"name": "plateau", "status": status,
                         "statistic": table.improvement,
                         "threshold": table.plateau_threshold, "tolerance": 0.0,
                         "details": {"deltas": [r.delta for r in table.rows]}}]
    for r in table.rows:
        click.echo(f"delta={r.delta!r} mean={r.mean!r} se={r.se!r} {r.verdict}")
    click.echo(f"improvement={table.improvement!r} plateau={table.plateau}")
    return exit_code(run.verdicts)


def _execute(command, config_path, out, seed, threads, body):
    try:
        cfg = cfgmod.load(config_path)
        if seed is not None:
            cfg["ensemble"]["seed"] = int(seed)
        out = out or cfg.get("output") or os.path.join("runs", command)
        if threads is None:
            threads = int(os.environ.get("SHHLAB_THREADS", "1") or 1)
        if threads < 0:
            raise cfgmod.ConfigError("--threads must be >= 0")
    except (cfgmod.ConfigError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    run = Run(command, cfg, out, threads)
    try:
        code = body(run)
    except (cfgmod.ConfigError, KeyError) as exc:
        run.error = f"config error: {exc}"
        code = EXIT_CONFIG
    except (InfeasibleSettings, GrowthConditionError) as exc:
        witness = getattr(exc, "witness", None)
        run.error = f"infeasible: {exc}"
        run.extra = {"witness": None if witness is None else np.asarray(witness).tolist()}
        code = EXIT_FAIL
    except (IntegrationDiverged, EnsembleDiverged, ProxSolverError,
            NoiseBoundaryError) as exc:
        run.error = f"divergence: {exc}"
        code = EXIT_DIVERGED
    if run.error:
        click.echo(run.error, err=True)
        if run.extra.get("witness") is not None:
            click.echo(f"witness: {run.extra['witness']}", err=True)
    return run.finish(code)


_common = [
    click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                 help="Run config (JSON) or a previous manifest."),
    click.option("--out", type=click.Path(file_okay=False), default=None,
                 help="Output directory."),
    click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None,
                 help="Master seed; overrides the config."),
    click.option("--threads", type=int, default=None,
                 help="Worker threads, 0 = all cores (default: SHHLAB_THREADS or 1)."),
]


def common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Sample-and-hold stochastic stabilization lab."""


@main.command()
@common
def params(config_path, out, seed, threads):
    """Compute the stabilization ledger."""
    sys.exit(_execute("params", config_path, out, seed, threads, cmd_params))


@main.command()
@common
def simulate(config_path, out, seed, threads):
    """Simulate one sample-and-hold trajectory."""
    sys.exit(_execute("simulate", config_path, out, seed, threads, cmd_simulate))


@main.command()
@common
def ensemble(config_path, out, seed, threads):
    """Run an ensemble and evaluate the verdicts."""
    sys.exit(_execute("ensemble", config_path, out, seed, threads, cmd_ensemble))


@main.command()
@common
@click.option("--deltas", default=None, help="Comma-separated sampling steps.")
def sweep(config_path, out, seed, threads, deltas):
    """Sweep the sampling step and look for a plateau."""
    parsed = None
    if deltas:
        try:
            parsed = [float(d) for d in deltas.split(",") if d.strip()]
        except ValueError:
            click.echo("config error: --deltas must be numbers", err=True)
            sys.exit(EXIT_CONFIG)
    sys.exit(_execute("sweep", config_path, out, seed, threads,
                      lambda run: cmd_sweep(run, parsed)))


if __name__ == "__main__":  # pragma: no cover
    main()
