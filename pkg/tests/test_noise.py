import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shhlab import kernels
from shhlab.noise import (BOUNDARY_EPS, NoiseBoundaryError, NoiseDomainError, NoiseModel,
                          bounded_paths, brownian_increment, coefficients, dcl_step,
                          ks_step, ks_vartheta, simulate_noise, sine_wiener_value, tsb_step)

LONG = 1_000_000
H = 1e-3


def test_brownian_increment_rejects_zero_step(rng):
    with pytest.raises(ValueError):
        brownian_increment(1, 0.0, rng)


def test_brownian_increment_moments(rng):
    draws = np.concatenate([brownian_increment(1000, 0.01, rng) for _ in range(1000)])
    assert abs(draws.mean()) < 4e-4
    assert draws.var() == pytest.approx(0.01, rel=0.01)


@pytest.mark.parametrize("b,tau,expected", [(0.0, 1.0, 0.0), (math.pi / 2, 2.0, 1.0)])
def test_sine_wiener_values(b, tau, expected):
    assert sine_wiener_value(b, tau) == pytest.approx(expected, abs=1e-15)


@given(st.floats(-1e6, 1e6), st.floats(1e-3, 1e3))
def test_sine_wiener_range(b, tau):
    assert abs(sine_wiener_value(b, tau)) <= 1.0


def test_coefficients_at_zero():
    drift, diff = coefficients(NoiseModel("dcl", {"gamma": 1.0, "theta": 0.5}), 0.0)
    assert drift == 0.0 and diff == pytest.approx(math.sqrt(1 / (0.5 * 2.0)))
    drift, diff = coefficients(NoiseModel("tsb", {"theta": 2.0, "q": 0.5}), 0.0)
    assert drift == 0.0 and diff == pytest.approx(math.sqrt(0.5 / 2.0))
    drift, _ = coefficients(NoiseModel("ks", {"theta": 1.0, "gamma": 0.0}), 0.0)
    assert drift == 0.0


def test_tsb_drift_arithmetic():
    drift, _ = coefficients(NoiseModel("tsb", {"theta": 1.0, "q": 0.0}), 0.9)
    assert float(drift) == pytest.approx(-0.9 / 0.19, rel=1e-12)


def test_tsb_drift_capped_near_boundary():
    drift, _ = coefficients(NoiseModel("tsb", {"theta": 1.0, "q": 0.0}), 1 - 1e-15)
    assert abs(float(drift)) <= 1.0 / BOUNDARY_EPS


@pytest.mark.parametrize("gamma,expected", [(0.0, 1.0), (1.0, 1.5)])
def test_ks_vartheta(gamma, expected):
    assert ks_vartheta(gamma) == expected
    assert NoiseModel("ks", {"theta": 1.0, "gamma": gamma}).vartheta == expected


@pytest.mark.parametrize("tag,params", [
    ("sine_wiener", {"tau_a": 0.0}), ("dcl", {"gamma": -1.0}), ("dcl", {"theta": 0.0}),
    ("tsb", {"q": 1.0}), ("tsb", {"theta": -1.0}), ("ks", {"gamma": -0.5}),
    ("tsb", {"bogus": 1.0}), ("pink", {}),
])
def test_parameter_domains(tag, params):
    with pytest.raises(ValueError):
        NoiseModel(tag, params)


@pytest.mark.parametrize("step,args", [
    (dcl_step, (0.0, 1.0)), (tsb_step, (1.0, 0.0)), (ks_step, (1.0, 0.0))])
def test_step_domain_error(rng, step, args):
    with pytest.raises(NoiseDomainError):
        step(1.0, H, *args, rng)
    assert abs(step(0.5, H, *args, rng)) < 1.0


@pytest.mark.parametrize("tag,params", [
    ("sine_wiener", {"tau_a": 1.0}),
    ("dcl", {"gamma": 1.0, "theta": 0.5}),
    ("tsb", {"theta": 1.0, "q": 0.0}),
    ("ks", {"theta": 1.0, "gamma": 0.0}),
])
def test_long_paths_stay_bounded(rng, tag, params):
    paths = simulate_noise(NoiseModel(tag, params), LONG, H, rng)
    assert np.max(np.abs(paths.values)) < 1.0
    assert paths.activation_rate < 1e-3


def test_dcl_mean_zero(rng):
    paths = simulate_noise(NoiseModel("dcl", {"gamma": 0.0, "theta": 1.0}), 2000, 1e-2,
                           rng, paths=50)
    final = paths.values[:, -1, 0]
    assert abs(final.mean()) <= 4 * final.std(ddof=1) / math.sqrt(final.size)


@pytest.mark.parametrize("tag", ["dcl", "tsb", "ks"])
def test_odd_symmetry(backend, rng, tag):
    model = NoiseModel(tag, {})
    dw = rng.standard_normal((3, 5000, 2)) * math.sqrt(H)
    z0 = rng.uniform(-0.5, 0.5, (3, 2))
    a = bounded_paths(model, z0, dw, H).values
    b = bounded_paths(model, -z0, -dw, H).values
    assert np.array_equal(a, -b)


@pytest.mark.parametrize("tag", ["sine_wiener", "dcl", "tsb", "ks"])
def test_backends_agree(monkeypatch, rng, tag):
    model = NoiseModel(tag, {})
    dw = rng.standard_normal((4, 20_000, 3)) * math.sqrt(1e-2)
    z0 = np.zeros((4, 3))
    fast = bounded_paths(model, z0, dw, 1e-2)
    monkeypatch.setenv("SHHLAB_DISABLE_NUMBA", "1")
    slow = bounded_paths(model, z0, dw, 1e-2)
    assert fast.safeguard_hits == slow.safeguard_hits
    np.testing.assert_allclose(fast.values, slow.values, rtol=0, atol=1e-12)


def test_fold_reflects_inside():
    z = np.array([1.5, -1.2, 0.3])
    out = kernels._fold_np(z.copy(), 1 - BOUNDARY_EPS)
    assert np.all(np.abs(out) < 1)


def test_nonfinite_state_aborts():
    model = NoiseModel("dcl", {})
    dw = np.full((1, 3, 1), np.nan)
    with pytest.raises(NoiseBoundaryError):
        bounded_paths(model, np.zeros((1, 1)), dw, H)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["dcl", "tsb", "ks"]), st.floats(-0.99, 0.99),
       st.floats(1e-4, 0.2), st.integers(0, 2 ** 32 - 1))
def test_single_step_stays_in_domain(tag, z, h, seed):
    step = {"dcl": lambda r: dcl_step(z, h, 0.0, 1.0, r),
            "tsb": lambda r: tsb_step(z, h, 1.0, 0.0, r),
            "ks": lambda r: ks_step(z, h, 1.0, 0.0, r)}[tag]
    assert abs(step(np.random.default_rng(seed))) < 1.0
