"""Inf-convolution control for non-smooth control Lyapunov functions.

L_beta(x) = min_y L(y) + |y - x|^2 / (2 beta^2) is computed by multi-start
compass search, v_beta(x) = (x - y_beta(x)) / beta^2 is the proximal
subgradient, and the feedback minimises <v_beta, f(., u)> over a grid on the
control box.
"""
from dataclasses import dataclass, field
from functools import lru_cache
import itertools
from typing import Callable, Optional

import numpy as np

from . import grids, kernels
from ._accel import numba_enabled
from .lyapunov import KInfFunction, spectral_norm
from .params import (BRANCH_RTOL, SAFETY, InfeasibleSettings, StabilizationParameters,
                     lipschitz_estimate, reaching_time_bound)
from .sde import AugmentedSde, MarkovPolicy

DEFAULT_BETA = 0.1
BETA_SWEEP = (0.5, 0.25, 0.1, 0.05)
DEFAULT_CONTROL_DENSITY = 41


class ProxSolverError(RuntimeError):
    def __init__(self, best, residual):
        self.best = np.asarray(best)
        self.residual = np.asarray(residual)
        super().__init__(f"inner minimisation did not converge "
                         f"(final mesh {np.max(self.residual):.3g})")


@dataclass(frozen=True)
class NonsmoothClf:
    """Continuous CLF; ``value_jit`` is an optional numba scalar twin of ``value``."""
    state_dim: int
    value: Callable
    alpha3: Optional[KInfFunction] = None
    control_low: tuple = (-1.0,)
    control_high: tuple = (1.0,)
    value_jit: Optional[Callable] = None
    name: str = ""

    def L(self, x):
        return np.asarray(self.value(np.asarray(x, dtype=float)), dtype=float)

    @property
    def control_dim(self):
        return len(self.control_low)


@dataclass(frozen=True)
class InnerSolver:
    starts: int = 8
    radius_factor: float = 3.0
    tol: float = 1e-8
    max_iter: int = 10_000


@dataclass(frozen=True)
class InfConvolution:
    base: NonsmoothClf
    beta: float = DEFAULT_BETA
    solver: InnerSolver = field(default_factory=InnerSolver)

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")

    def with_beta(self, beta):
        return InfConvolution(self.base, beta, self.solver)


def _solver_args(ic):
    # final mesh bounds the minimiser error, so tol is the accuracy of v_beta
    min_step = 0.5 * ic.solver.tol * ic.beta ** 2
    return _offsets(ic.base.state_dim, ic.solver.starts, ic.solver.radius_factor), min_step


@lru_cache(maxsize=32)
def _offsets(dim, starts, radius_factor):
    offsets = grids.start_offsets(dim, starts)
    # kernel starts sit at 3 beta (1 + |x|); rescale for other radius factors
    offsets = np.ascontiguousarray(offsets * (radius_factor / 3.0))
    offsets.setflags(write=False)
    return offsets


def _solve(ic, x):
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1, ic.base.state_dim)
    offsets, min_step = _solver_args(ic)
    ys, vals, steps = kernels.prox_batch((ic.base.value, ic.base.value_jit), flat,
                                         offsets, ic.beta, min_step, ic.solver.max_iter)
    if np.any(steps >= min_step):
        raise ProxSolverError(ys, steps)
    return vals.reshape(x.shape[:-1]), ys.reshape(x.shape)


def inf_conv_value(ic, x):
    """(L_beta(x), y_beta(x)); batched over leading axes of ``x``."""
    return _solve(ic, x)


def proximal_subgradient(ic, x, y=None):
    x = np.asarray(x, dtype=float)
    if y is None:
        _, y = _solve(ic, x)
    return (x - y) / ic.beta ** 2


@lru_cache(maxsize=32)
def _grid(low, high, density):
    axes = [np.linspace(lo, hi, density) for lo, hi in zip(low, high)]
    g = np.array(list(itertools.product(*axes)))
    g.setflags(write=False)
    return g


def control_grid(low, high, density=DEFAULT_CONTROL_DENSITY):
    """Lexicographically ordered tensor grid on the box [low, high] (read-only)."""
    return _grid(tuple(float(v) for v in low), tuple(float(v) for v in high), int(density))


def _grid_argmin(system, v, at, grid):
    nb, n = v.shape
    g = grid.shape[0]
    vv = np.broadcast_to(v[:, None, :], (nb, g, n))
    xx = np.broadcast_to(at[:, None, :], (nb, g, n))
    uu = np.broadcast_to(grid[None], (nb, g, grid.shape[1]))
    obj = np.sum(vv * system.f(xx, uu), axis=-1)
    return grid[np.argmin(obj, axis=1)]


def inf_conv_control(ic, system, x, control_grid_density=DEFAULT_CONTROL_DENSITY,
                     evaluate_at="subgradient", v=None):
    """argmin over the control grid of <v_beta(x), f(., u)>.

    ``evaluate_at="subgradient"`` evaluates the drift at v_beta(x), the law as
    usually stated; ``"state"`` evaluates it at x.  Ties go to the
    lexicographically smallest control.
    """
    plant = system.plant if isinstance(system, AugmentedSde) else system
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1, plant.state_dim)
    if evaluate_at not in ("subgradient", "state"):
        raise ValueError(f"evaluate_at must be 'subgradient' or 'state', got {evaluate_at!r}")
    grid = control_grid(ic.base.control_low, ic.base.control_high, control_grid_density)
    if (v is None and numba_enabled() and ic.base.value_jit is not None
            and plant.drift_jit is not None):
        offsets, min_step = _solver_args(ic)
        u, steps = kernels.inf_conv_control_nb(
            ic.base.value_jit, plant.drift_jit, np.ascontiguousarray(flat), offsets,
            float(ic.beta), min_step, int(ic.solver.max_iter), grid,
            evaluate_at == "state")
        if np.any(steps >= min_step):
            raise ProxSolverError(flat, steps)
        return u.reshape(x.shape[:-1] + (plant.control_dim,))
    if v is None:
        v = proximal_subgradient(ic, flat)
    v = np.asarray(v, dtype=float).reshape(flat.shape)
    at = v if evaluate_at == "subgradient" else flat
    u = _grid_argmin(plant, v, at, grid)
    return u.reshape(x.shape[:-1] + (plant.control_dim,))


class InfConvPolicy(MarkovPolicy):
    """Markov policy wrapping :func:`inf_conv_control`."""

    def __init__(self, ic, system, control_grid_density=DEFAULT_CONTROL_DENSITY,
                 evaluate_at="subgradient"):
        self.ic = ic
        self.system = system
        self.density = control_grid_density
        self.evaluate_at = evaluate_at
        bound = float(np.linalg.norm(np.maximum(np.abs(ic.base.control_low),
                                                np.abs(ic.base.control_high))))
        super().__init__(self._map, bound, f"inf-conv(beta={ic.beta})")

    def _map(self, x):
        return inf_conv_control(self.ic, self.system, x, self.density, self.evaluate_at)


def nonsmooth_taylor_check(ic, x, y, eps):
    """rhs - lhs of L_b(x + eps y) <= L_b(x) + eps <v_b(x), y> + eps^2 |y|^2 / (2 b^2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    eps = np.asarray(eps, dtype=float)
    val, yb = _solve(ic, x)
    v = (x - yb) / ic.beta ** 2
    lhs, _ = _solve(ic, x + eps[..., None] * y)
    rhs = (val + eps * np.sum(v * y, axis=-1)
           + eps ** 2 * np.sum(y * y, axis=-1) / (2.0 * ic.beta ** 2))
    return rhs - lhs


@dataclass
class DecayDecomposition:
    """Terms bounding L_beta(X_t) - L_beta(X_k) over part of one hold interval."""
    dt: float
    delta_L: np.ndarray
    drift_pivot: np.ndarray
    remainder: np.ndarray
    noise_term: np.ndarray
    quadratic: np.ndarray
    remainder_norm: np.ndarray
    increment: np.ndarray

    @property
    def bound(self):
        return self.drift_pivot + self.remainder + self.noise_term + self.quadratic

    @property
    def residual(self):
        return self.bound - self.delta_L


def decay_terms(ic, plant, states, noise, u, h):
    """Decomposition from substep states (..., s+1, n) and noise (..., s+1, d).

    Quadratures use left Riemann sums, the same rule as the Euler integrator,
    so Phi + Sigma reproduces X_t - X_k up to rounding.
    """
    states = np.asarray(states, dtype=float)
    u = np.asarray(u, dtype=float)
    xk = states[..., 0, :]
    xs = states[..., :-1, :]
    steps = xs.shape[-2]
    uu = np.broadcast_to(u[..., None, :], xs.shape[:-1] + u.shape[-1:])
    f_path = plant.f(xs, uu)
    phi = h * np.sum(f_path, axis=-2)
    if noise is None:
        sig = np.zeros_like(phi)
    else:
        z = np.asarray(noise, dtype=float)[..., :-1, :]
        sig = h * np.sum(np.matmul(plant.sigma(xs, uu), z[..., None])[..., 0], axis=-2)
    dt = steps * h
    fk = plant.f(xk, u)
    lk, yk = _solve(ic, xk)
    vk = (xk - yk) / ic.beta ** 2
    lt, _ = _solve(ic, states[..., -1, :])
    rem_vec = phi - dt * fk
    incr = phi + sig
    return DecayDecomposition(
        dt=dt,
        delta_L=lt - lk,
        drift_pivot=dt * np.sum(vk * fk, axis=-1),
        remainder=np.sum(vk * rem_vec, axis=-1),
        noise_term=np.sum(vk * sig, axis=-1),
        quadratic=np.sum(incr * incr, axis=-1) / (2.0 * ic.beta ** 2),
        remainder_norm=np.linalg.norm(rem_vec, axis=-1),
        increment=incr,
    )


def sampled_decay_decomposition(ic, system, trajectory, k, steps_per_hold, upto=None):
    """Decomposition over [k delta, k delta + upto h] of a recorded trajectory."""
    plant = system.plant if isinstance(system, AugmentedSde) else system
    s = steps_per_hold if upto is None else int(upto)
    if not 0 < s <= steps_per_hold:
        raise ValueError("upto must lie in 1..steps_per_hold")
    a = k * steps_per_hold
    h = trajectory.times[1] - trajectory.times[0]
    seg = trajectory.states[a:a + s + 1]
    noise = None if trajectory.noise is None else trajectory.noise[a:a + s + 1]
    return decay_terms(ic, plant, seg, noise, trajectory.controls[k], h)


@dataclass
class NonsmoothParameters(StabilizationParameters):
    beta: float = DEFAULT_BETA
    v_bar: float = float("nan")
    noise_bound: float = 0.0
    growth: float = float("nan")
    quad_constant: float = float("nan")


def compute_nonsmooth_settings(ic, system, alpha1, alpha2, r, R,
                               grid_density=2 ** 12, safety=SAFETY, r_prime=None,
                               control_grid_density=DEFAULT_CONTROL_DENSITY,
                               evaluate_at="subgradient"):
    """Sampling-time ledger for inf-convolution feedback under bounded noise.

    Mirrors the smooth construction with the non-smooth Taylor bound: the
    per-point decay is -<v_b(x), f(x, mu(x))> minus the worst bounded-noise
    contribution |v_b(x)| sigma_bar sqrt(d); increments over a hold are at most
    (f_bar + sigma_bar sqrt(d)) dt.
    """
    if not 0 < r < R:
        raise ValueError("need 0 < r < R")
    plant = system.plant if isinstance(system, AugmentedSde) else system
    bounded = isinstance(system, AugmentedSde)
    n, m = plant.state_dim, plant.control_dim
    clf = ic.base
    p = NonsmoothParameters(r=float(r), R=float(R), safety=safety, beta=ic.beta)
    p.L_bar = float(np.max(clf.L(grids.ball(n, R, grid_density))))
    p.R_star = float(max(R, float(alpha1.inverse(p.L_bar))))
    xs = grids.ball(n, p.R_star, grid_density)
    box = control_grid(clf.control_low, clf.control_high, 5)
    p.u_bar = float(np.max(np.linalg.norm(box, axis=1)))
    ug = np.resize(box, (len(xs), m))
    p.f_bar = safety * max(float(np.max(np.linalg.norm(plant.f(xs[:, None], box[None]), axis=-1))),
                           0.0)
    p.sigma_bar = safety * float(np.max(spectral_norm(plant.sigma(xs, ug))))
    p.noise_bound = p.sigma_bar * np.sqrt(plant.noise_dim) if bounded else 0.0
    p.growth = p.f_bar + p.noise_bound

    _, ys = _solve(ic, xs)
    v = (xs - ys) / ic.beta ** 2
    vnorm = np.linalg.norm(v, axis=1)
    p.v_bar = safety * float(np.max(vnorm))
    u = inf_conv_control(ic, system, xs, control_grid_density, evaluate_at, v=v)
    decay = -np.sum(v * plant.f(xs, u), axis=1)
    noise = vnorm * p.noise_bound
    net = decay - noise
    rad = np.linalg.norm(xs, axis=1)

    p.l_star = float(alpha1(r))
    p.r_star = float(alpha2.inverse(p.l_star / 2.0))
    bad = net <= 0
    p.r_tilde = float(np.max(rad[bad])) if bad.any() else 0.0
    p.noise_offset = float(np.max(noise)) if len(noise) else 0.0
    if p.r_tilde < p.r_star * (1.0 - BRANCH_RTOL):
        p.branch = "r_tilde < r_star"
        p.core_radius, p.core_level, p.rho = p.r_star, p.l_star, 0.0
    else:
        p.branch = "r_tilde >= r_star"
        p.core_radius = p.r_tilde + (0.1 * r if r_prime is None else r_prime)
        p.core_level = 2.0 * float(alpha2(p.core_radius))
        p.rho = p.r_tilde
    p.r_effective = max(p.r, float(alpha1.inverse(p.core_level)))
    ring = (rad >= p.core_radius) & (rad <= p.R_star)
    if not ring.any():
        raise InfeasibleSettings("empty annulus between core ball and R*")
    p.alpha3_bar = float(np.min(decay[ring]))
    p.alpha3_net = float(np.min(net[ring]))
    if not p.alpha3_net > 0:
        i = np.flatnonzero(ring)[int(np.argmin(net[ring]))]
        raise InfeasibleSettings(f"net decay {p.alpha3_net:.4g} <= 0", xs[i])

    p.lip_L = safety * lipschitz_estimate(clf.L, xs, p.R_star)
    p.lip_f = safety * lipschitz_estimate(lambda x: plant.f(x, ug[:len(x)]), xs, p.R_star)
    p.quad_constant = p.growth ** 2 / (2.0 * ic.beta ** 2)
    c = p.v_bar * p.lip_f * p.growth / 2.0 + p.quad_constant
    p.delta_1 = p.alpha3_net / (2.0 * c)
    p.delta_2 = p.core_level / (4.0 * p.lip_L * p.growth)
    p.delta_bar = min(p.delta_1, p.delta_2)
    p.T_bound = reaching_time_bound(p)
    return p
