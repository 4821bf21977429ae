"""Constructive stabilization ledger for a smooth stochastic Lyapunov pair.

Given target/start radii 0 < r < R, every constant needed to bound the
admissible sampling time is estimated on low-discrepancy grids.  Suprema feeding
the sampling-time bound are inflated by a safety factor, so the estimates err
towards a smaller, still sufficient, delta.
"""
from dataclasses import asdict, dataclass, fields
import math
import warnings

import numpy as np

from . import grids
from .lyapunov import (check_decay, check_positive_definiteness, spectral_norm,
                       sublevel_radius)

SAFETY = 1.25
LIP_SCALES = (1e-1, 1e-2, 1e-3)
# relative slack when comparing r_tilde with r_star (equal in closed form)
BRANCH_RTOL = 1e-9


class InfeasibleSettings(ValueError):
    def __init__(self, message, witness=None):
        self.witness = None if witness is None else np.asarray(witness)
        super().__init__(message)


class VacuousBoundWarning(UserWarning):
    pass


nan = float("nan")


@dataclass
class StabilizationParameters:
    r: float = nan
    R: float = nan
    L_bar: float = nan
    R_star: float = nan
    u_bar: float = nan
    f_bar: float = nan
    sigma_bar: float = nan
    L_grad_bar: float = nan
    L_hess_bar: float = nan
    l_star: float = nan
    r_star: float = nan
    noise_offset: float = nan
    r_tilde: float = nan
    branch: str = ""
    core_radius: float = nan
    core_level: float = nan
    rho: float = 0.0
    r_effective: float = nan
    alpha3_bar: float = nan
    alpha3_net: float = nan
    lip_L: float = nan
    lip_f: float = nan
    lip_sigma: float = 0.0
    lip_gradL: float = 0.0
    lip_hessL: float = 0.0
    delta_1: float = nan
    delta_2: float = nan
    delta_bar: float = nan
    T_bound: float = nan
    safety: float = SAFETY

    @property
    def bracket(self):
        """Constant multiplying f_bar * delta in the smooth mean-value bound."""
        return (self.lip_gradL * self.f_bar + self.L_grad_bar * self.lip_f
                + self.sigma_bar * self.L_hess_bar * self.lip_sigma
                + 0.5 * self.sigma_bar ** 2 * self.lip_hessL)

    @property
    def target(self):
        """Radius r v rho the mean norm is expected to settle in."""
        return max(self.r, self.rho)

    def to_dict(self):
        return {k: (v if not isinstance(v, float) or math.isfinite(v) else repr(v))
                for k, v in asdict(self).items()}

    def report(self):
        width = max(len(f.name) for f in fields(self))
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            text = f"{v:.10g}" if isinstance(v, float) else str(v)
            lines.append(f"{f.name.ljust(width)} = {text}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DeltaBound:
    delta_1: float
    delta_2: float

    @property
    def delta_bar(self):
        return min(self.delta_1, self.delta_2)


def _norms(a):
    a = np.asarray(a, dtype=float)
    return np.linalg.norm(a.reshape(a.shape[0], -1), axis=1)


def lipschitz_estimate(fn, points, radius, scales=LIP_SCALES, seed=29):
    """max |fn(x) - fn(y)| / |x - y| over grid pairs at several separations.

    ``fn`` maps (k, n) points to (k, ...) values; differences use the
    Euclidean (Frobenius for matrices) norm.  Partners are pulled back into
    the ball of the given radius.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[1]
    dirs = grids.unit_sphere(n, len(pts), seed)
    base = fn(pts)
    best = 0.0
    for s in scales:
        other = pts + s * radius * dirs
        nrm = np.linalg.norm(other, axis=1)
        over = nrm > radius
        other[over] *= (radius / nrm[over])[:, None]
        dist = np.linalg.norm(other - pts, axis=1)
        ok = dist > 1e-14 * max(radius, 1.0)
        diff = _norms(np.asarray(fn(other)) - base)
        if ok.any():
            best = max(best, float(np.max(diff[ok] / dist[ok])))
    return best


def compute_settings(pair, system, r, R, grid_density=grids.DEFAULT_DENSITY,
                     safety=SAFETY, r_prime=None, verify=True):
    """Fill every field of :class:`StabilizationParameters`.

    Raises :class:`InfeasibleSettings` when the net decay rate on the annulus
    between the core ball and R* is not positive.
    """
    if not 0 < r < R:
        raise ValueError("need 0 < r < R")
    n, m = system.state_dim, system.control_dim
    if verify:
        pd = check_positive_definiteness(pair, R, grid_density)
        if not pd.passed:
            raise InfeasibleSettings("positive-definiteness fails", pd.worst_point)
        dec = check_decay(pair, system, R, grid_density)
        if not dec.passed:
            raise InfeasibleSettings("decay condition fails", dec.worst_point)

    p = StabilizationParameters(r=float(r), R=float(R), safety=safety,
                                noise_offset=float(pair.sigma_bar))
    p.L_bar = float(np.max(pair.L(grids.ball(n, R, grid_density))))
    p.R_star = float(max(R, float(pair.alpha1.inverse(p.L_bar))))

    xs = grids.ball(n, p.R_star, grid_density)
    mu = pair.policy(xs)
    p.u_bar = safety * float(np.max(np.linalg.norm(mu, axis=-1)))
    us = grids.ball(m, p.u_bar, grid_density, seed=17)[:len(xs)]
    if len(us) < len(xs):
        us = np.resize(us, (len(xs), m))
    xx = np.concatenate([xs, xs])
    uu = np.concatenate([us, mu])
    p.f_bar = safety * float(np.max(np.linalg.norm(system.f(xx, uu), axis=-1)))
    p.sigma_bar = safety * float(np.max(spectral_norm(system.sigma(xx, uu))))
    p.L_grad_bar = safety * float(np.max(np.linalg.norm(pair.gradient(xs), axis=-1)))
    p.L_hess_bar = safety * float(np.max(spectral_norm(pair.hessian(xs))))

    p.l_star = float(pair.alpha1(r))
    p.r_star = float(pair.alpha2.inverse(p.l_star / 2.0))
    p.r_tilde = sublevel_radius(pair.alpha3, p.noise_offset, p.R_star)
    if p.r_tilde < p.r_star * (1.0 - BRANCH_RTOL):
        p.branch = "r_tilde < r_star"
        p.core_radius = p.r_star
        p.core_level = p.l_star
        p.rho = 0.0
    else:
        p.branch = "r_tilde >= r_star"
        p.core_radius = p.r_tilde + (0.1 * r if r_prime is None else r_prime)
        p.core_level = 2.0 * float(pair.alpha2(p.core_radius))
        p.rho = p.r_tilde
    p.r_effective = max(p.r, float(pair.alpha1.inverse(p.core_level)))
    if p.core_radius >= p.R_star:
        raise InfeasibleSettings("core ball reaches the overshoot ball",
                                 np.eye(n)[0] * p.core_radius)

    s = grids.radii(p.core_radius, p.R_star)
    a3 = pair.alpha3(s)
    p.alpha3_bar = float(np.min(a3 + p.noise_offset))
    p.alpha3_net = float(np.min(a3)) - p.noise_offset
    if not p.alpha3_net > 0:
        raise InfeasibleSettings(
            f"net decay rate {p.alpha3_net:.6g} <= 0 on the annulus",
            np.eye(n)[0] * s[int(np.argmin(a3))])

    p.lip_L = safety * lipschitz_estimate(pair.L, xs, p.R_star)
    p.lip_gradL = safety * lipschitz_estimate(pair.gradient, xs, p.R_star)
    p.lip_hessL = safety * lipschitz_estimate(pair.hessian, xs, p.R_star)
    p.lip_f = safety * lipschitz_estimate(lambda x: system.f(x, us[:len(x)]), xs, p.R_star)
    p.lip_sigma = safety * lipschitz_estimate(lambda x: system.sigma(x, us[:len(x)]),
                                              xs, p.R_star)
    d = delta_bound(p)
    p.delta_1, p.delta_2, p.delta_bar = d.delta_1, d.delta_2, d.delta_bar
    p.T_bound = reaching_time_bound(p)
    return p


def delta_bound(params):
    """Admissible sampling time: min of the decay-preserving and level-keeping bounds."""
    a3 = params.alpha3_net
    if not a3 > 0:
        raise InfeasibleSettings("sampling bound needs a positive decay rate")
    fb = params.f_bar
    if fb == 0:
        return DeltaBound(math.inf, math.inf)
    c = params.bracket
    d1 = math.inf if c == 0 else a3 / (2.0 * fb * c)
    d2 = math.inf if params.lip_L == 0 else params.core_level / (4.0 * params.lip_L * fb)
    return DeltaBound(d1, d2)


def reaching_time_bound(params):
    """(4 L_bar - 3 l*) / (2 alpha3), with the core level standing in for l*."""
    a3 = params.alpha3_net
    if not a3 > 0:
        raise InfeasibleSettings("reaching time needs a positive decay rate")
    return (4.0 * params.L_bar - 3.0 * params.core_level) / (2.0 * a3)


def doob_confidence(params, c):
    """Lower bound 1 - R*/c on P(sup_t |X_t| <= c)."""
    value = 1.0 - params.R_star / c
    if c <= params.R_star:
        warnings.warn(f"c={c} <= R*={params.R_star}: Doob bound is vacuous",
                      VacuousBoundWarning, stacklevel=2)
    return value
