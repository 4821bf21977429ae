"""Smooth stochastic Lyapunov pairs and their grid verification."""
import csv
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from . import grids
from .sde import MarkovPolicy

# rounding slack when a margin is analytically zero
MARGIN_ATOL = 1e-12


class GrowthConditionError(ValueError):
    def __init__(self, witness, lhs, rhs):
        self.witness = np.asarray(witness)
        self.lhs, self.rhs = float(lhs), float(rhs)
        super().__init__(
            f"growth condition fails at x={self.witness.tolist()}: "
            f"alpha3={self.lhs:.6g} < 0.5|s'Hs|={self.rhs:.6g}")


@dataclass(frozen=True)
class KInfFunction:
    """Comparison function s -> forward(s) with an (optional) exact inverse."""
    forward: Callable
    inverse_fn: Optional[Callable] = None
    name: str = ""

    def __call__(self, s):
        return np.asarray(self.forward(np.asarray(s, dtype=float)), dtype=float)

    def inverse(self, y):
        if self.inverse_fn is not None:
            return np.asarray(self.inverse_fn(np.asarray(y, dtype=float)), dtype=float)
        y = np.asarray(y, dtype=float)
        return np.vectorize(self._invert_scalar, otypes=[float])(y)

    def _invert_scalar(self, y):
        if y <= 0:
            return 0.0
        hi = 1.0
        while float(self(hi)) < y:
            hi *= 2.0
            if hi > 1e300:
                raise ValueError("comparison function does not reach level")
        return brentq(lambda s: float(self(s)) - y, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)

    def validate(self, upper=10.0, count=2001, tol=1e-9):
        """Check forward(0)=0, strict increase and forward(inverse(y)) = y on a grid."""
        s = np.linspace(0.0, upper, count)
        v = self(s)
        if abs(float(self(0.0))) > tol:
            return False
        if np.any(np.diff(v) <= 0):
            return False
        back = self(self.inverse(v[1:]))
        return bool(np.all(np.abs(back - v[1:]) <= tol * np.maximum(1.0, np.abs(v[1:]))))


def power_kinf(coef, power):
    """s -> coef * s**power."""
    return KInfFunction(lambda s: coef * s ** power,
                        lambda y: (y / coef) ** (1.0 / power),
                        f"{coef:g}*s^{power:g}")


def quadratic_kinf(coef=1.0):
    return power_kinf(coef, 2.0)


@dataclass(frozen=True)
class SmoothLyapunovPair:
    state_dim: int
    value: Callable
    gradient: Callable
    hessian: Callable
    alpha1: KInfFunction
    alpha2: KInfFunction
    alpha3: KInfFunction
    sigma_bar: float
    policy: MarkovPolicy

    def L(self, x):
        return np.asarray(self.value(np.asarray(x, dtype=float)), dtype=float)


@dataclass
class MarginReport:
    """Per-point verification table; pass iff every margin >= -MARGIN_ATOL."""
    label: str
    points: np.ndarray
    values: np.ndarray
    bounds: np.ndarray
    margins: np.ndarray

    @property
    def worst_margin(self):
        return float(np.min(self.margins))

    @property
    def worst_point(self):
        return self.points[int(np.argmin(self.margins))]

    @property
    def max_excess(self):
        return -self.worst_margin

    @property
    def passed(self):
        return self.worst_margin >= -MARGIN_ATOL * max(1.0, float(np.max(np.abs(self.values))))

    def to_csv(self, path):
        n = self.points.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(n)] + ["value", "bound", "margin"])
            for p, v, b, m in zip(self.points, self.values, self.bounds, self.margins):
                w.writerow([repr(float(c)) for c in p] + [repr(float(v)), repr(float(b)),
                                                          repr(float(m))])


def spectral_norm(m, iterations=50):
    """Largest singular value of (..., p, q) matrices by power iteration."""
    m = np.asarray(m, dtype=float)
    q = m.shape[-1]
    v = 1.0 / np.arange(1, q + 1)
    v = np.broadcast_to(v / np.linalg.norm(v), m.shape[:-2] + (q,)).copy()
    mtm = np.matmul(np.swapaxes(m, -1, -2), m)
    for _ in range(iterations):
        w = np.matmul(mtm, v[..., None])[..., 0]
        nrm = np.linalg.norm(w, axis=-1, keepdims=True)
        v = np.where(nrm > 0, w / np.where(nrm > 0, nrm, 1.0), v)
    return np.linalg.norm(np.matmul(m, v[..., None])[..., 0], axis=-1)


def generator(pair, system, x):
    """grad L . f(x, mu(x)) + 0.5 tr(sigma' Hess L sigma), batched over x."""
    x = np.asarray(x, dtype=float)
    u = pair.policy(x)
    g = np.asarray(pair.gradient(x), dtype=float)
    hess = np.asarray(pair.hessian(x), dtype=float)
    s = system.sigma(x, u)
    drift_part = np.sum(g * system.f(x, u), axis=-1)
    diff_part = 0.5 * np.einsum("...ij,...ik,...kj->...", s, hess, s)
    return drift_part + diff_part


def check_positive_definiteness(pair, radius, grid_density=grids.DEFAULT_DENSITY):
    if not radius > 0:
        raise ValueError("radius must be positive")
    pts = grids.ball(pair.state_dim, radius, grid_density)
    val = pair.L(pts)
    s = np.linalg.norm(pts, axis=1)
    lo = pair.alpha1(s)
    hi = pair.alpha2(s)
    lower, upper = val - lo, hi - val
    bound = np.where(lower <= upper, lo, hi)
    return MarginReport("positive-definiteness", pts, val, bound, np.minimum(lower, upper))


def check_decay(pair, system, radius, grid_density=grids.DEFAULT_DENSITY, inner=0.0):
    """Margins of  A L(x) <= -alpha3(|x|) + sigma_bar  on inner <= |x| <= radius."""
    n = system.state_dim
    if inner > 0:
        pts = grids.annulus(n, inner, radius, grid_density)
    else:
        pts = grids.ball(n, radius, grid_density)
    val = generator(pair, system, pts)
    bound = -pair.alpha3(np.linalg.norm(pts, axis=1)) + pair.sigma_bar
    return MarginReport("decay", pts, val, bound, bound - val)


def _curvature_term(pair, system, x):
    u = pair.policy(x)
    s = system.sigma(x, u)
    return np.matmul(np.matmul(np.swapaxes(s, -1, -2), pair.hessian(x)), s)


def lift_noiseless_pair(pair, system, r_tilde, outer_radius=None,
                        grid_density=grids.DEFAULT_DENSITY):
    """Turn a noiseless Lyapunov pair into a stochastic one.

    ``pair.alpha3`` must bound the noiseless decay grad L . f <= -alpha3.  The
    growth condition alpha3(|x|) >= 0.5 |sigma' Hess L sigma| is verified on an
    annulus outside the r_tilde ball; the returned pair carries
    sigma_bar = 0.5 sup_{|x| <= r_tilde} |sigma' Hess L sigma| and the reduced
    decay alpha3(s) - 0.5 max_{|x| = s} tr(sigma' Hess L sigma).
    """
    n = system.state_dim
    outer = 10.0 * r_tilde if outer_radius is None else outer_radius
    ring = grids.annulus(n, r_tilde, outer, grid_density)
    lhs = pair.alpha3(np.linalg.norm(ring, axis=1))
    rhs = 0.5 * spectral_norm(_curvature_term(pair, system, ring))
    bad = lhs < rhs
    if bad.any():
        i = int(np.argmax(np.where(bad, rhs - lhs, -np.inf)))
        raise GrowthConditionError(ring[i], lhs[i], rhs[i])
    core = grids.ball(n, r_tilde, grid_density)
    sigma_bar = 0.5 * float(np.max(spectral_norm(_curvature_term(pair, system, core))))

    sphere = grids.unit_sphere(n, 256)
    alpha3 = pair.alpha3

    def reduced(s):
        s = np.asarray(s, dtype=float)
        flat = np.atleast_1d(s).ravel()
        pts = flat[:, None, None] * sphere[None]
        tr = np.trace(_curvature_term(pair, system, pts), axis1=-2, axis2=-1)
        out = alpha3(flat) - 0.5 * np.max(tr, axis=1)
        return out.reshape(s.shape)

    hat = KInfFunction(reduced, None, f"{alpha3.name} - curvature")
    return replace(pair, alpha3=hat, sigma_bar=sigma_bar)


def finite_difference_errors(pair, points, step=1e-4):
    """Max relative error of the supplied gradient and Hessian vs central differences."""
    pts = np.asarray(points, dtype=float)
    n = pts.shape[1]
    eye = np.eye(n) * step
    g = np.asarray(pair.gradient(pts))
    hess = np.asarray(pair.hessian(pts))
    g_fd = np.stack([(pair.L(pts + e) - pair.L(pts - e)) / (2 * step) for e in eye], axis=-1)
    h_fd = np.stack([(np.asarray(pair.gradient(pts + e)) - np.asarray(pair.gradient(pts - e)))
                     / (2 * step) for e in eye], axis=-1)
    g_err = np.max(np.linalg.norm(g - g_fd, axis=-1) / np.maximum(1.0, np.linalg.norm(g, axis=-1)))
    scale = np.maximum(1.0, np.linalg.norm(hess, axis=(-2, -1)))
    h_err = np.max(np.linalg.norm(hess - h_fd, axis=(-2, -1)) / scale)
    return float(g_err), float(h_err)


def sublevel_radius(alpha, level, upper, count=4097):
    """Radius of the smallest ball containing {x : alpha(|x|) <= level}, searched on [0, upper]."""
    if level <= 0:
        return 0.0
    s = np.linspace(0.0, upper, count)
    inside = alpha(s) <= level
    if inside.all():
        return float(upper)
    last = int(np.flatnonzero(inside)[-1])
    a, b = s[last], s[last + 1]
    return float(brentq(lambda t: float(alpha(t)) - level, a, b, xtol=1e-14))


def dynkin_estimate(pair, system, x, h, n_paths, rng):
    """Monte Carlo (E L(X_h) - L(x)) / h after one Euler step from ``x``, and its SE.

    The control is mu(x), held over the step; the estimate tends to the
    generator as h -> 0 with an O(h) bias.
    """
    x = np.asarray(x, dtype=float)
    u = pair.policy(x[None])[0]
    dw = rng.standard_normal((n_paths, system.noise_dim)) * np.sqrt(h)
    x1 = x + h * system.f(x, u) + dw @ np.asarray(system.sigma(x, u)).T
    diff = (pair.L(x1) - pair.L(x)) / h
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_paths))
