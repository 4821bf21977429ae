"""Hot loops: bounded-noise path generation and the proximal pattern search.

Each kernel exists as a numba loop (``*_nb``) and a vectorised numpy variant
(``*_np``).  Both follow the same arithmetic in the same order, so results
agree to rounding; :func:`shhlab._accel.numba_enabled` picks one at call time.
"""
import math

import numpy as np

from ._accel import njit, numba_enabled

SINE_WIENER = 1
DCL = 2
TSB = 3
KS = 4

# parabolic polish after the compass phase: probe offset relative to the
# initial mesh, and number of coordinate sweeps
POLISH_SCALE = 1e-4
POLISH_SWEEPS = 4
# objective increase tolerated in the polish, in units of eps * |f|
POLISH_ULPS = 64.0
EPS = np.finfo(float).eps


# --------------------------------------------------------------------------
# bounded noise
# --------------------------------------------------------------------------

@njit(cache=True)
def _coefficients_nb(kind, z, p1, p2, cap):
    if kind == DCL:
        v = 1.0 - z * z
        if v < 0.0:
            v = 0.0
        return -z / p1, math.sqrt(v / (p1 * (p2 + 1.0)))
    if kind == TSB:
        drift = -z / (p1 * (1.0 - z * z))
        if drift > cap:
            drift = cap
        elif drift < -cap:
            drift = -cap
        return drift, math.sqrt((1.0 - p2) / p1)
    # KS
    vt = (2.0 * p2 + 1.0) / (p2 + 1.0)
    drift = -vt / (math.pi * p1) * math.tan(0.5 * math.pi * z)
    return drift, 2.0 / (math.pi * math.sqrt(p1 * (p2 + 1.0)))


@njit(cache=True)
def _fold_nb(z, bound):
    while z > bound or z < -bound:
        if z > bound:
            z = 2.0 * bound - z
        else:
            z = -2.0 * bound - z
    return z


@njit(cache=True)
def bounded_paths_nb(kind, z0, dw, h, p1, p2, eps):
    """Euler paths of a bounded noise model.

    ``dw`` holds Brownian increments of shape (paths, steps, dim) already
    scaled by sqrt(h).  Returns (paths, steps + 1, dim) states, the number of
    safeguard activations and the number of non-finite states met.
    """
    npath, nstep, dim = dw.shape
    out = np.empty((npath, nstep + 1, dim))
    bound = 1.0 - eps
    cap = 1.0 / (p1 * eps)
    hits = 0
    bad = 0
    for p in range(npath):
        for k in range(dim):
            z = z0[p, k]
            out[p, 0, k] = z
            b = 0.0
            if kind == SINE_WIENER:
                b = math.asin(z) / p1
            for j in range(nstep):
                if kind == SINE_WIENER:
                    b += dw[p, j, k]
                    z = math.sin(p1 * b)
                else:
                    drift, diff = _coefficients_nb(kind, z, p1, p2, cap)
                    z = z + drift * h + diff * dw[p, j, k]
                if not math.isfinite(z):
                    bad += 1
                    z = 0.0
                elif z > bound or z < -bound:
                    hits += 1
                    z = _fold_nb(z, bound)
                out[p, j + 1, k] = z
    return out, hits, bad


def _coefficients_np(kind, z, p1, p2, cap):
    if kind == DCL:
        return -z / p1, np.sqrt(np.maximum(1.0 - z * z, 0.0) / (p1 * (p2 + 1.0)))
    if kind == TSB:
        with np.errstate(divide="ignore"):
            drift = np.clip(-z / (p1 * (1.0 - z * z)), -cap, cap)
        return drift, math.sqrt((1.0 - p2) / p1)
    vt = (2.0 * p2 + 1.0) / (p2 + 1.0)
    drift = -vt / (math.pi * p1) * np.tan(0.5 * math.pi * z)
    return drift, 2.0 / (math.pi * math.sqrt(p1 * (p2 + 1.0)))


def _fold_np(z, bound):
    while True:
        hi = z > bound
        lo = z < -bound
        if not (hi.any() or lo.any()):
            return z
        z = np.where(hi, 2.0 * bound - z, z)
        z = np.where(lo, -2.0 * bound - z, z)


def bounded_paths_np(kind, z0, dw, h, p1, p2, eps):
    npath, nstep, dim = dw.shape
    out = np.empty((npath, nstep + 1, dim))
    bound = 1.0 - eps
    cap = 1.0 / (p1 * eps)
    z = np.array(z0, dtype=float)
    out[:, 0] = z
    b = np.arcsin(z) / p1 if kind == SINE_WIENER else None
    hits = 0
    bad = 0
    for j in range(nstep):
        if kind == SINE_WIENER:
            b = b + dw[:, j]
            z = np.sin(p1 * b)
        else:
            drift, diff = _coefficients_np(kind, z, p1, p2, cap)
            z = z + drift * h + diff * dw[:, j]
        finite = np.isfinite(z)
        if not finite.all():
            bad += int((~finite).sum())
            z = np.where(finite, z, 0.0)
        outside = (z > bound) | (z < -bound)
        if outside.any():
            hits += int(outside.sum())
            z = _fold_np(z, bound)
        out[:, j + 1] = z
    return out, hits, bad


def bounded_paths(kind, z0, dw, h, p1, p2, eps):
    z0 = np.ascontiguousarray(z0, dtype=float)
    dw = np.ascontiguousarray(dw, dtype=float)
    fn = bounded_paths_nb if numba_enabled() else bounded_paths_np
    out, hits, bad = fn(int(kind), z0, dw, float(h), float(p1), float(p2), float(eps))
    return out, int(hits), int(bad)


# --------------------------------------------------------------------------
# proximal pattern search
# --------------------------------------------------------------------------

@njit
def _prox_objective_nb(clf, y, x, inv2b2):
    s = 0.0
    for i in range(y.shape[0]):
        d = y[i] - x[i]
        s += d * d
    return clf(y) + s * inv2b2


@njit
def _compass_nb(clf, x, y, inv2b2, step, min_step, max_iter):
    n = x.shape[0]
    fy = _prox_objective_nb(clf, y, x, inv2b2)
    trial = y.copy()
    it = 0
    while step >= min_step and it < max_iter:
        it += 1
        best = fy
        best_i = -1
        best_s = 0.0
        for i in range(n):
            for t in range(2):
                sgn = -1.0 if t == 0 else 1.0
                trial[i] = y[i] + sgn * step
                ft = _prox_objective_nb(clf, trial, x, inv2b2)
                trial[i] = y[i]
                if ft < best:
                    best = ft
                    best_i = i
                    best_s = sgn
        if best_i >= 0:
            y[best_i] = y[best_i] + best_s * step
            trial[best_i] = y[best_i]
            fy = best
        else:
            step *= 0.5
    return fy, step


@njit
def _polish_nb(clf, x, y, fy, inv2b2, s, sweeps):
    # three-point parabola per coordinate; moves that raise the objective are undone
    for _ in range(sweeps):
        for i in range(y.shape[0]):
            yi = y[i]
            y[i] = yi - s
            fm = _prox_objective_nb(clf, y, x, inv2b2)
            y[i] = yi + s
            fp = _prox_objective_nb(clf, y, x, inv2b2)
            y[i] = yi
            curv = fp - 2.0 * fy + fm
            if curv > 0.0:
                shift = 0.5 * s * (fp - fm) / curv
                if abs(shift) <= s:
                    y[i] = yi - shift
                    ft = _prox_objective_nb(clf, y, x, inv2b2)
                    if ft <= fy + POLISH_ULPS * EPS * abs(fy):
                        fy = min(ft, fy)
                    else:
                        y[i] = yi
    return fy


@njit
def _prox_point_nb(clf, x, unit_starts, beta, inv2b2, min_step, max_iter, y_out):
    n = x.shape[0]
    nrm = 0.0
    for i in range(n):
        nrm += x[i] * x[i]
    scale = beta * (1.0 + math.sqrt(nrm))
    best = np.inf
    step = np.inf
    y = np.empty(n)
    for k in range(unit_starts.shape[0]):
        for i in range(n):
            y[i] = x[i] + 3.0 * scale * unit_starts[k, i]
        fy, st = _compass_nb(clf, x, y, inv2b2, scale, min_step, max_iter)
        if fy < best:
            best = fy
            step = st
            for i in range(n):
                y_out[i] = y[i]
    best = _polish_nb(clf, x, y_out, best, inv2b2, POLISH_SCALE * scale, POLISH_SWEEPS)
    return best, step


@njit
def prox_batch_nb(clf, xs, unit_starts, beta, min_step, max_iter):
    nb, n = xs.shape
    inv2b2 = 0.5 / (beta * beta)
    ys = np.empty((nb, n))
    vals = np.empty(nb)
    steps = np.empty(nb)
    for b in range(nb):
        vals[b], steps[b] = _prox_point_nb(clf, xs[b], unit_starts, beta, inv2b2,
                                           min_step, max_iter, ys[b])
    return ys, vals, steps


@njit
def inf_conv_control_nb(clf, drift, xs, unit_starts, beta, min_step, max_iter, grid,
                        at_state):
    """Prox solve then grid argmin of <v, f(., u)> per row; first minimum wins."""
    nb, n = xs.shape
    inv2b2 = 0.5 / (beta * beta)
    inv_b2 = 1.0 / (beta * beta)
    us = np.empty((nb, grid.shape[1]))
    steps = np.empty(nb)
    y = np.empty(n)
    v = np.empty(n)
    fx = np.empty(n)
    for b in range(nb):
        x = xs[b]
        _, steps[b] = _prox_point_nb(clf, x, unit_starts, beta, inv2b2, min_step,
                                     max_iter, y)
        for i in range(n):
            v[i] = (x[i] - y[i]) * inv_b2
        at = x if at_state else v
        best = np.inf
        idx = 0
        for g in range(grid.shape[0]):
            drift(at, grid[g], fx)
            obj = 0.0
            for i in range(n):
                obj += v[i] * fx[i]
            if obj < best:
                best = obj
                idx = g
        for j in range(grid.shape[1]):
            us[b, j] = grid[idx, j]
    return us, steps


def prox_batch_np(clf, xs, unit_starts, beta, min_step, max_iter):
    nb, n = xs.shape
    ns = unit_starts.shape[0]
    inv2b2 = 0.5 / (beta * beta)
    scale = beta * (1.0 + np.sqrt(np.sum(xs * xs, axis=1)))
    xr = np.repeat(xs, ns, axis=0)
    y = xr + 3.0 * np.repeat(scale, ns)[:, None] * np.tile(unit_starts, (nb, 1))
    step = np.repeat(scale, ns)

    def objective(pts, centres):
        d = pts - centres
        return clf(pts) + np.sum(d * d, axis=-1) * inv2b2

    fy = objective(y, xr)
    offsets = np.zeros((2 * n, n))
    for i in range(n):
        offsets[2 * i, i] = -1.0
        offsets[2 * i + 1, i] = 1.0
    it = np.zeros(len(y), dtype=np.int64)
    active = np.flatnonzero((step >= min_step) & (it < max_iter))
    while active.size:
        ya = y[active]
        polls = ya[:, None, :] + offsets[None] * step[active, None, None]
        fp = objective(polls, xr[active, None, :])
        j = np.argmin(fp, axis=1)
        fbest = fp[np.arange(active.size), j]
        better = fbest < fy[active]
        moved = active[better]
        y[moved] = polls[better, j[better]]
        fy[moved] = fbest[better]
        shrink = active[~better]
        step[shrink] *= 0.5
        it[active] += 1
        active = active[(step[active] >= min_step) & (it[active] < max_iter)]
    fy = fy.reshape(nb, ns)
    k = np.argmin(fy, axis=1)
    rows = np.arange(nb) * ns + k
    yb, fb = y[rows].copy(), fy[np.arange(nb), k].copy()
    _polish_np(objective, xs, yb, fb, POLISH_SCALE * scale, POLISH_SWEEPS)
    return yb, fb, step[rows]


def _polish_np(objective, xs, y, fy, s, sweeps):
    for _ in range(sweeps):
        for i in range(y.shape[1]):
            yi = y[:, i].copy()
            y[:, i] = yi - s
            fm = objective(y, xs)
            y[:, i] = yi + s
            fp = objective(y, xs)
            curv = fp - 2.0 * fy + fm
            with np.errstate(divide="ignore", invalid="ignore"):
                shift = np.where(curv > 0, 0.5 * s * (fp - fm) / curv, 0.0)
            ok = (curv > 0) & (np.abs(shift) <= s)
            y[:, i] = np.where(ok, yi - shift, yi)
            ft = objective(y, xs)
            keep = ok & (ft <= fy + POLISH_ULPS * EPS * np.abs(fy))
            y[:, i] = np.where(keep, y[:, i], yi)
            fy[:] = np.where(keep, np.minimum(ft, fy), fy)


def prox_batch(clf, xs, unit_starts, beta, min_step, max_iter):
    """Multi-start compass search for argmin_y clf(y) + |y - x|^2 / (2 beta^2).

    ``clf`` is a pair (vectorised numpy callable, jitted scalar callable or
    None).  Returns minimisers, minimal values and final mesh sizes.
    """
    clf_np, clf_nb = clf
    xs = np.ascontiguousarray(np.atleast_2d(xs), dtype=float)
    unit_starts = np.ascontiguousarray(unit_starts, dtype=float)
    if clf_nb is not None and numba_enabled():
        return prox_batch_nb(clf_nb, xs, unit_starts, float(beta),
                             float(min_step), int(max_iter))
    return prox_batch_np(clf_np, xs, unit_starts, float(beta),
                         float(min_step), int(max_iter))
