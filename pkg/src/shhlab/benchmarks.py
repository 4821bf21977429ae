"""Benchmark systems with analytic oracles."""
from dataclasses import dataclass, field
import math
from typing import Callable, Optional, Union

import numpy as np

from . import grids
from ._accel import njit
from .lyapunov import SmoothLyapunovPair, power_kinf, quadratic_kinf
from .noise import NoiseModel
from .nonsmooth import NonsmoothClf
from .sde import AugmentedSde, ControlledSde, linear_policy, zero_policy


@dataclass(frozen=True)
class Oracle:
    """Closed-form moments as functions of (t, x0)."""
    mean: Callable
    second_moment: Callable
    stationary_second_moment: float


@dataclass(frozen=True)
class Benchmark:
    name: str
    system: Union[ControlledSde, AugmentedSde]
    pair_or_clf: Union[SmoothLyapunovPair, NonsmoothClf]
    oracle: Optional[Oracle] = None
    radii: tuple = (0.2, 2.0)
    noise: dict = field(default_factory=dict)

    @property
    def plant(self):
        return self.system.plant if isinstance(self.system, AugmentedSde) else self.system


def _quadratic_value(x):
    return np.sum(x * x, axis=-1)


def _quadratic_gradient(x):
    return 2.0 * x


def _quadratic_hessian(x):
    n = x.shape[-1]
    return np.broadcast_to(2.0 * np.eye(n), x.shape[:-1] + (n, n))


def ou_benchmark(n=1, a=1.0, sigma0=1.0, k=0.0, radii=(0.2, 2.0)):
    """dX = (-a X + u) dt + sigma0 dB with u = -k X and L = |x|^2."""
    if n < 1:
        raise ValueError("n must be positive")
    if not a + k > 0:
        raise ValueError("closed loop needs a + k > 0")
    if sigma0 < 0:
        raise ValueError("sigma0 must be nonnegative")
    eye = np.eye(n)
    system = ControlledSde(
        n, n, n,
        lambda x, u: -a * np.asarray(x) + np.asarray(u),
        lambda x, u: np.broadcast_to(sigma0 * eye, np.shape(x)[:-1] + (n, n)),
        f"ou(n={n})")
    policy = linear_policy(k) if k else zero_policy(n)
    lam = a + k
    pair = SmoothLyapunovPair(n, _quadratic_value, _quadratic_gradient, _quadratic_hessian,
                              quadratic_kinf(), quadratic_kinf(), quadratic_kinf(2.0 * lam),
                              n * sigma0 ** 2, policy)
    var = sigma0 ** 2 / (2.0 * lam)

    def mean(t, x0):
        return np.multiply.outer(np.exp(-lam * np.asarray(t, dtype=float)), np.asarray(x0))

    def second(t, x0):
        e = np.exp(-2.0 * lam * np.asarray(t, dtype=float))
        return e * float(np.dot(x0, x0)) + n * var * (1.0 - e)

    oracle = Oracle(mean, second, n * var)
    return Benchmark(f"ou{n}", system, pair, oracle, radii, {"sigma0": sigma0})


def quartic_benchmark(sigma0=1.0, radii=(0.2, 2.0)):
    """Scalar dX = (-X + u) dt + sigma0 dB with L = x^4 and u = 0.

    A L = -4 x^4 + 6 sigma0^2 x^2 <= -2 x^4 + 4.5 sigma0^4 by Young's inequality.
    """
    system = ControlledSde(1, 1, 1, lambda x, u: -np.asarray(x) + np.asarray(u),
                           lambda x, u: np.broadcast_to(sigma0 * np.ones((1, 1)),
                                                        np.shape(x)[:-1] + (1, 1)),
                           "quartic")
    pair = SmoothLyapunovPair(
        1,
        lambda x: np.sum(x ** 4, axis=-1),
        lambda x: 4.0 * x ** 3,
        lambda x: (12.0 * x ** 2)[..., None],
        power_kinf(1.0, 4.0), power_kinf(1.0, 4.0), power_kinf(2.0, 4.0),
        4.5 * sigma0 ** 4, zero_policy(1))
    return Benchmark("quartic", system, pair, None, radii, {"sigma0": sigma0})


# --------------------------------------------------------------------------
# nonholonomic integrator
# --------------------------------------------------------------------------

def robot_clf_value(x):
    x = np.asarray(x, dtype=float)
    rho = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
    a = np.abs(x[..., 2])
    return x[..., 0] ** 2 + x[..., 1] ** 2 + 2.0 * x[..., 2] ** 2 - 2.0 * a * rho


@njit
def robot_clf_scalar(y):
    rho = math.sqrt(y[0] * y[0] + y[1] * y[1])
    a = abs(y[2])
    return y[0] * y[0] + y[1] * y[1] + 2.0 * y[2] * y[2] - 2.0 * a * rho


def _robot_drift(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    x, u = np.broadcast_arrays(x[..., :2], u)
    return np.stack([u[..., 0], u[..., 1],
                     x[..., 0] * u[..., 1] - x[..., 1] * u[..., 0]], axis=-1)


@njit
def robot_drift_scalar(x, u, out):
    out[0] = u[0]
    out[1] = u[1]
    out[2] = x[0] * u[1] - x[1] * u[0]


def robot_plant(sigma0):
    eye = np.eye(3)
    return ControlledSde(
        3, 2, 3, _robot_drift,
        lambda x, u: np.broadcast_to(sigma0 * eye,
                                     np.broadcast_shapes(np.shape(x)[:-1],
                                                         np.shape(u)[:-1]) + (3, 3)),
        "nonholonomic", robot_drift_scalar)


def robot_comparison(density=2 ** 14, safety=None):
    """alpha1 = c1 s^2, alpha2 = c2 s^2 from the extrema of L on the unit sphere.

    L is positively homogeneous of degree two, so the sphere extrema bound it
    everywhere.  The grid minimum is shrunk and the maximum inflated by the
    safety factor.
    """
    from .params import SAFETY
    safety = SAFETY if safety is None else safety
    vals = robot_clf_value(grids.unit_sphere(3, density))
    c1 = float(np.min(vals)) / safety
    c2 = float(np.max(vals)) * safety
    return quadratic_kinf(c1), quadratic_kinf(c2)


def nonholonomic_benchmark(noise=None, sigma0=0.1, radii=(0.2, 1.5), z0=None):
    """Brockett integrator with u in [-1, 1]^2; bounded noise enters as sigma0 * Z.

    ``noise=None`` gives the noiseless plant (sigma0 ignored).
    """
    clf = NonsmoothClf(3, robot_clf_value, None, (-1.0, -1.0), (1.0, 1.0),
                       robot_clf_scalar, "nonholonomic")
    if noise is None:
        system = robot_plant(0.0)
        params = {}
    else:
        model = noise if isinstance(noise, NoiseModel) else NoiseModel(*noise)
        system = AugmentedSde(robot_plant(sigma0), model, z0)
        params = {"sigma0": sigma0, "model": model.to_dict()}
    return Benchmark("nonholonomic", system, clf, None, radii, params)


REGISTRY = {
    "ou": ou_benchmark,
    "quartic": quartic_benchmark,
    "nonholonomic": nonholonomic_benchmark,
}


def get_benchmark(name, **kwargs):
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; choose from {sorted(REGISTRY)}") from None
    return factory(**kwargs)
