"""Driving noise: Brownian increments, sine-Wiener and three bounded SDE models.

The bounded models (DCL, TSB, KS) are stepped with Euler-Maruyama.  Continuous
paths never touch +-1, but a discrete step can overshoot; every such step is
folded back into ``(-1 + eps, 1 - eps)`` and counted.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import kernels

BOUNDARY_EPS = 1e-9

TAGS = ("brownian", "sine_wiener", "dcl", "tsb", "ks")
BOUNDED_TAGS = ("sine_wiener", "dcl", "tsb", "ks")
_KIND = {"sine_wiener": kernels.SINE_WIENER, "dcl": kernels.DCL,
         "tsb": kernels.TSB, "ks": kernels.KS}
_DEFAULTS = {
    "brownian": {},
    "sine_wiener": {"tau_a": 1.0},
    "dcl": {"gamma": 0.0, "theta": 1.0},
    "tsb": {"theta": 1.0, "q": 0.0},
    "ks": {"theta": 1.0, "gamma": 0.0},
}


class NoiseDomainError(ValueError):
    """Noise state or parameter outside its admissible domain."""


class NoiseBoundaryError(RuntimeError):
    """A bounded noise path left (-1, 1) even after the safeguard."""


@dataclass(frozen=True)
class NoiseModel:
    tag: str = "brownian"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise NoiseDomainError(f"unknown noise model {self.tag!r}")
        merged = dict(_DEFAULTS[self.tag])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise NoiseDomainError(f"unknown parameters for {self.tag}: {sorted(unknown)}")
        merged.update({k: float(v) for k, v in self.params.items()})
        object.__setattr__(self, "params", merged)
        p = merged
        if self.tag == "sine_wiener" and not p["tau_a"] > 0:
            raise NoiseDomainError("sine-Wiener needs tau_a > 0")
        if self.tag == "dcl" and not (p["gamma"] > -1 and p["theta"] > 0):
            raise NoiseDomainError("DCL needs gamma > -1 and theta > 0")
        if self.tag == "tsb" and not (p["theta"] > 0 and p["q"] < 1):
            raise NoiseDomainError("TSB needs theta > 0 and q < 1")
        if self.tag == "ks" and not (p["theta"] > 0 and p["gamma"] >= 0):
            raise NoiseDomainError("KS needs theta > 0 and gamma >= 0")

    @property
    def bounded(self):
        return self.tag in BOUNDED_TAGS

    @property
    def vartheta(self):
        """KS shape parameter (2 gamma + 1) / (gamma + 1)."""
        return ks_vartheta(self.params["gamma"])

    def kernel_args(self):
        p = self.params
        if self.tag == "sine_wiener":
            return _KIND[self.tag], math.sqrt(2.0 / p["tau_a"]), 0.0
        if self.tag == "dcl":
            return _KIND[self.tag], p["theta"], p["gamma"]
        if self.tag == "tsb":
            return _KIND[self.tag], p["theta"], p["q"]
        if self.tag == "ks":
            return _KIND[self.tag], p["theta"], p["gamma"]
        raise NoiseDomainError("Brownian motion has no bounded state")

    def drift(self, z):
        """Noise-model drift zeta(z); zero for the memoryless tags."""
        if self.tag in ("brownian", "sine_wiener"):
            return np.zeros_like(np.asarray(z, dtype=float))
        return coefficients(self, z)[0]

    def diffusion(self, z):
        if self.tag in ("brownian", "sine_wiener"):
            return np.ones_like(np.asarray(z, dtype=float))
        return np.broadcast_to(coefficients(self, z)[1], np.shape(z)).astype(float)

    def to_dict(self):
        return {"tag": self.tag, "params": dict(self.params)}


def ks_vartheta(gamma):
    return (2.0 * gamma + 1.0) / (gamma + 1.0)


def coefficients(model, z):
    """Drift and diffusion of a bounded SDE noise model at ``z``."""
    kind, p1, p2 = model.kernel_args()
    z = np.asarray(z, dtype=float)
    return kernels._coefficients_np(kind, z, p1, p2, 1.0 / (p1 * BOUNDARY_EPS))


def brownian_increment(dim, h, rng):
    if not h > 0:
        raise ValueError(f"increment length must be positive, got {h}")
    return rng.standard_normal(dim) * math.sqrt(h)


def sine_wiener_value(b_t, tau_a):
    if not tau_a > 0:
        raise NoiseDomainError("tau_a must be positive")
    return np.sin(np.sqrt(2.0 / tau_a) * np.asarray(b_t, dtype=float))


def _scalar_step(model, z, h, rng):
    if not -1.0 < z < 1.0:
        raise NoiseDomainError(f"noise state {z} outside (-1, 1)")
    if not h > 0:
        raise ValueError("step must be positive")
    kind, p1, p2 = model.kernel_args()
    dw = np.array([[[rng.standard_normal() * math.sqrt(h)]]])
    out, _, bad = kernels.bounded_paths_np(kind, np.array([[z]]), dw, h, p1, p2,
                                           BOUNDARY_EPS)
    if bad:
        raise NoiseBoundaryError("non-finite noise state")
    return float(out[0, 1, 0])


def dcl_step(z, h, gamma, theta, rng):
    """One Euler step of dZ = -Z/theta dt + sqrt((1 - Z^2) / (theta (gamma + 1))) dB."""
    return _scalar_step(NoiseModel("dcl", {"gamma": gamma, "theta": theta}), z, h, rng)


def tsb_step(z, h, theta, q, rng):
    """One Euler step of dZ = -Z / (theta (1 - Z^2)) dt + sqrt((1 - q) / theta) dB."""
    return _scalar_step(NoiseModel("tsb", {"theta": theta, "q": q}), z, h, rng)


def ks_step(z, h, theta, gamma, rng):
    """One Euler step of the Kessler-Sorensen model."""
    return _scalar_step(NoiseModel("ks", {"theta": theta, "gamma": gamma}), z, h, rng)


@dataclass
class NoisePaths:
    values: np.ndarray          # (paths, steps + 1, dim)
    safeguard_hits: int
    steps: int

    @property
    def activation_rate(self):
        n = self.values.shape[0] * self.values.shape[2] * self.steps
        return self.safeguard_hits / n if n else 0.0


def bounded_paths(model, z0, increments, h):
    """Generate bounded noise paths from pre-drawn Brownian increments.

    ``increments`` has shape (paths, steps, dim) and is already scaled by
    sqrt(h); ``z0`` has shape (paths, dim).  Components are independent scalar
    copies of the model.
    """
    if not model.bounded:
        raise NoiseDomainError(f"{model.tag} is not a bounded noise model")
    z0 = np.asarray(z0, dtype=float)
    if np.any(np.abs(z0) >= 1.0):
        raise NoiseDomainError("initial noise state outside (-1, 1)")
    kind, p1, p2 = model.kernel_args()
    values, hits, bad = kernels.bounded_paths(kind, z0, increments, h, p1, p2,
                                              BOUNDARY_EPS)
    if bad or not np.all(np.abs(values) < 1.0):
        raise NoiseBoundaryError(
            f"{model.tag}: {bad} non-finite states; path left (-1, 1)")
    return NoisePaths(values, hits, increments.shape[1])


def simulate_noise(model, steps, h, rng, dim=1, paths=1, z0=None):
    """Convenience wrapper drawing its own increments from ``rng``."""
    dw = rng.standard_normal((paths, steps, dim)) * math.sqrt(h)
    if z0 is None:
        z0 = np.zeros((paths, dim))
    return bounded_paths(model, np.broadcast_to(z0, (paths, dim)), dw, h)
