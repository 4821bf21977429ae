"""Controlled SDEs under sample-and-hold feedback.

Drift, diffusion and policy callables must broadcast over leading axes:
``drift(x, u)`` with ``x`` of shape (..., n) and ``u`` of shape (..., m)
returns (..., n), ``diffusion`` returns (..., n, d) and ``policy(x)``
returns (..., m).  This lets one code path integrate a single trajectory or
a whole ensemble.
"""
from dataclasses import dataclass, field
import math
from typing import Callable, Optional

import numpy as np

from .noise import NoiseModel, bounded_paths

DIVERGENCE_FACTOR = 1e6
DEFAULT_SUBSTEPS = 16


class IntegrationDiverged(RuntimeError):
    def __init__(self, time, message=None):
        self.time = float(time)
        super().__init__(message or f"state diverged at t={self.time:.6g}")


@dataclass(frozen=True)
class ControlledSde:
    state_dim: int
    control_dim: int
    noise_dim: int
    drift: Callable
    diffusion: Callable
    name: str = ""
    # optional numba scalar twin: drift_jit(x, u, out) writes f(x, u) into out
    drift_jit: Optional[Callable] = None

    def __post_init__(self):
        for k in ("state_dim", "control_dim", "noise_dim"):
            if int(getattr(self, k)) < 1:
                raise ValueError(f"{k} must be a positive integer")

    def f(self, x, u):
        return np.asarray(self.drift(x, u), dtype=float)

    def sigma(self, x, u):
        return np.asarray(self.diffusion(x, u), dtype=float)

    def check(self, x, u):
        """Evaluate both coefficients once and verify shapes and finiteness."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        fx, sx = self.f(x, u), self.sigma(x, u)
        lead = x.shape[:-1]
        if fx.shape != lead + (self.state_dim,):
            raise ValueError(f"drift returned shape {fx.shape}")
        if sx.shape != lead + (self.state_dim, self.noise_dim):
            raise ValueError(f"diffusion returned shape {sx.shape}")
        if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(sx))):
            raise ValueError("non-finite drift or diffusion")
        return fx, sx


@dataclass(frozen=True)
class AugmentedSde:
    """Plant driven by a bounded noise state: dX = (f + sigma Z) dt."""
    plant: ControlledSde
    noise: NoiseModel
    z0: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.noise.bounded:
            raise ValueError("augmented systems need a bounded noise model")

    @property
    def noise_dim(self):
        return self.plant.noise_dim

    def noise_drift(self, z):
        return self.noise.drift(z)

    def noise_diffusion(self, z):
        return self.noise.diffusion(z)

    def initial_noise(self):
        if self.z0 is None:
            return np.zeros(self.noise_dim)
        return np.asarray(self.z0, dtype=float)


@dataclass(frozen=True)
class SampleHoldConfig:
    delta: float
    horizon: float
    initial_state: tuple
    substep: Optional[float] = None

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("sampling step delta must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        h = self.delta / DEFAULT_SUBSTEPS if self.substep is None else float(self.substep)
        if not 0 < h <= self.delta * (1 + 1e-12):
            raise ValueError("substep must satisfy 0 < h <= delta")
        ratio = self.delta / h
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError(f"delta/h = {ratio} is not an integer")
        object.__setattr__(self, "substep", h)
        x0 = tuple(float(v) for v in np.atleast_1d(self.initial_state))
        if not all(math.isfinite(v) for v in x0):
            raise ValueError("initial state must be finite")
        object.__setattr__(self, "initial_state", x0)

    @property
    def steps_per_hold(self):
        return int(round(self.delta / self.substep))

    @property
    def n_holds(self):
        return int(math.ceil(self.horizon / self.delta - 1e-9))

    @property
    def total_steps(self):
        return self.n_holds * self.steps_per_hold

    @property
    def x0(self):
        return np.array(self.initial_state)

    def times(self):
        return np.arange(self.total_steps + 1) * self.substep

    def hold_times(self):
        return np.arange(self.n_holds) * self.delta


@dataclass
class MarkovPolicy:
    map: Callable
    control_bound: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        if self.control_bound is not None and self.control_bound < 0:
            raise ValueError("control bound must be nonnegative")

    def __call__(self, x):
        return np.asarray(self.map(np.asarray(x, dtype=float)), dtype=float)


def zero_policy(m):
    return MarkovPolicy(lambda x: np.zeros(np.shape(x)[:-1] + (m,)), 0.0, "zero")


def linear_policy(gain):
    """u = -gain * x (requires m == n)."""
    return MarkovPolicy(lambda x: -gain * x, None, f"linear(k={gain})")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    hold_times: np.ndarray
    controls: np.ndarray
    noise: Optional[np.ndarray] = None
    safeguard_hits: int = 0
    meta: dict = field(default_factory=dict)

    def control_at_substeps(self, steps_per_hold):
        """Held control value in force on each substep interval."""
        return np.repeat(self.controls, steps_per_hold, axis=0)

    @property
    def final_state(self):
        return self.states[-1]


@dataclass
class PathBatch:
    times: np.ndarray
    states: np.ndarray          # (paths, steps + 1, n)
    hold_times: np.ndarray
    controls: np.ndarray        # (paths, holds, m)
    diverged: np.ndarray        # (paths,) bool
    diverged_at: np.ndarray     # (paths,) time, nan if never
    noise: Optional[np.ndarray] = None
    safeguard_hits: int = 0


def _em_step(system, x, u, h, dw):
    s = system.sigma(x, u)
    return x + h * system.f(x, u) + np.matmul(s, dw[..., None])[..., 0]


def _plant_step(plant, x, u, h, z):
    s = plant.sigma(x, u)
    return x + h * (plant.f(x, u) + np.matmul(s, z[..., None])[..., 0])


def integrate_hold_interval(system, x_start, u_held, delta, substep, rng, limit=None):
    """Euler-Maruyama over one hold interval with the control frozen at ``u_held``.

    Exactly delta/substep Gaussian d-vectors with variance ``substep`` are
    drawn from ``rng``.  ``x_start`` may carry leading batch axes.
    """
    x = np.array(x_start, dtype=float)
    u = np.asarray(u_held, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("held control must be finite")
    steps = delta / substep
    if abs(steps - round(steps)) > 1e-9 * steps:
        raise ValueError("substep must divide delta")
    steps = int(round(steps))
    if limit is None:
        limit = DIVERGENCE_FACTOR * max(1.0, float(np.max(np.linalg.norm(x, axis=-1))))
    sq = math.sqrt(substep)
    shape = x.shape[:-1] + (system.noise_dim,)
    with np.errstate(all="ignore"):
        for j in range(steps):
            dw = rng.standard_normal(shape) * sq
            x = _em_step(system, x, u, substep, dw)
            if not (np.all(np.isfinite(x)) and np.all(np.linalg.norm(x, axis=-1) <= limit)):
                raise IntegrationDiverged((j + 1) * substep)
    return x


def simulate_batch(system, policy, config, increments):
    """Integrate many paths from pre-drawn increments of shape (paths, steps, d).

    Increments are already scaled by sqrt(h).  For an :class:`AugmentedSde`
    they drive the noise model; otherwise they are the Brownian increments of
    the plant.  Diverged paths are frozen at NaN and flagged, never raised.
    """
    augmented = isinstance(system, AugmentedSde)
    plant = system.plant if augmented else system
    h = config.substep
    s = config.steps_per_hold
    nsteps = config.total_steps
    npath = increments.shape[0]
    if increments.shape[1:] != (nsteps, plant.noise_dim):
        raise ValueError(f"increments shape {increments.shape} does not match config")
    x0 = config.x0
    if x0.shape != (plant.state_dim,):
        raise ValueError("initial state has wrong dimension")
    limit = DIVERGENCE_FACTOR * max(1.0, float(np.linalg.norm(x0)))

    noise = None
    hits = 0
    if augmented:
        z0 = np.broadcast_to(system.initial_noise(), (npath, plant.noise_dim))
        npaths = bounded_paths(system.noise, z0, increments, h)
        noise, hits = npaths.values, npaths.safeguard_hits

    states = np.empty((npath, nsteps + 1, plant.state_dim))
    controls = np.empty((npath, config.n_holds, plant.control_dim))
    diverged = np.zeros(npath, dtype=bool)
    diverged_at = np.full(npath, np.nan)
    x = np.broadcast_to(x0, (npath, plant.state_dim)).copy()
    states[:, 0] = x
    j = 0
    with np.errstate(all="ignore"):
        for k in range(config.n_holds):
            u = np.zeros((npath, plant.control_dim))
            alive = ~diverged
            if alive.any():
                u[alive] = policy(x[alive])
            controls[:, k] = u
            for _ in range(s):
                if augmented:
                    x = _plant_step(plant, x, u, h, noise[:, j])
                else:
                    x = _em_step(plant, x, u, h, increments[:, j])
                j += 1
                bad = ~np.isfinite(x).all(axis=1)
                bad |= np.linalg.norm(np.where(np.isfinite(x), x, 0.0), axis=1) > limit
                new = bad & ~diverged
                if new.any():
                    diverged |= new
                    diverged_at[new] = j * h
                x[diverged] = np.nan
                states[:, j] = x
    return PathBatch(config.times(), states, config.hold_times(), controls,
                     diverged, diverged_at, noise, hits)


def _draw(system, config, rng):
    d = system.noise_dim
    return rng.standard_normal((1, config.total_steps, d)) * math.sqrt(config.substep)


def _single(batch):
    if batch.diverged[0]:
        raise IntegrationDiverged(batch.diverged_at[0])
    noise = None if batch.noise is None else batch.noise[0]
    return Trajectory(batch.times, batch.states[0], batch.hold_times,
                      batch.controls[0], noise, batch.safeguard_hits)


def simulate_sample_hold(system, policy, config, rng):
    """One S&H trajectory: U_k = policy(X_{k delta}) held on each interval."""
    if isinstance(system, AugmentedSde):
        raise TypeError("use simulate_augmented for bounded-noise systems")
    return _single(simulate_batch(system, policy, config, _draw(system, config, rng)))


def simulate_augmented(system, policy, config, rng):
    """One S&H trajectory of a plant driven by bounded noise."""
    if not isinstance(system, AugmentedSde):
        raise TypeError("simulate_augmented needs an AugmentedSde")
    return _single(simulate_batch(system, policy, config, _draw(system, config, rng)))
