"""Deterministic low-discrepancy point sets on balls, spheres and annuli."""
from functools import lru_cache

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

DEFAULT_DENSITY = 2 ** 14


@lru_cache(maxsize=64)
def _unit_halton(dim, count, seed):
    pts = qmc.Halton(d=dim, scramble=True, seed=seed).random(count)
    pts.setflags(write=False)
    return pts


def _directions(u):
    g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    nrm[nrm == 0] = 1.0
    return g / nrm


def unit_sphere(dim, count, seed=7):
    if dim == 1:
        return np.repeat(np.array([[-1.0], [1.0]]), (count + 1) // 2, axis=0)[:count]
    return _directions(_unit_halton(dim, count, seed))


def unit_ball(dim, count, seed=11, shell_fraction=0.125, include_origin=True):
    """Points filling the closed unit ball.

    Radii follow u**(1/dim) so the set is uniform in volume; a further
    ``shell_fraction`` of points sits exactly on the sphere, where radial
    suprema are attained.
    """
    u = _unit_halton(dim + 1, count, seed)
    pts = _directions(u[:, :dim]) * u[:, dim:] ** (1.0 / dim)
    parts = [pts]
    nshell = int(count * shell_fraction)
    if nshell:
        parts.append(unit_sphere(dim, nshell, seed + 1))
    if include_origin:
        parts.append(np.zeros((1, dim)))
    return np.concatenate(parts)


def ball(dim, radius, count=DEFAULT_DENSITY, seed=11):
    return radius * unit_ball(dim, count, seed)


def annulus(dim, inner, outer, count=DEFAULT_DENSITY, seed=13):
    """Points with inner <= |x| <= outer, including both bounding spheres."""
    u = _unit_halton(dim + 1, count, seed)
    lo, hi = inner ** dim, outer ** dim
    radii = (lo + (hi - lo) * u[:, dim]) ** (1.0 / dim)
    pts = _directions(u[:, :dim]) * radii[:, None]
    nshell = max(count // 8, 2)
    sph = unit_sphere(dim, nshell, seed + 1)
    return np.concatenate([pts, inner * sph, outer * sph])


def radii(inner, outer, count=1025):
    return np.linspace(inner, outer, count)


def start_offsets(dim, count=8, seed=3):
    """Fixed multi-start offsets in the unit ball; the first is the centre."""
    rest = unit_ball(dim, count - 1, seed, shell_fraction=0.0, include_origin=False)
    return np.concatenate([np.zeros((1, dim)), rest])
