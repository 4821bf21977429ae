import math

import numpy as np
import pytest

from shhlab.noise import NoiseModel
from shhlab.sde import (AugmentedSde, ControlledSde, IntegrationDiverged, MarkovPolicy,
                        SampleHoldConfig, integrate_hold_interval, simulate_augmented,
                        simulate_batch, simulate_sample_hold, zero_policy)


def scalar(drift, diffusion=0.0):
    return ControlledSde(
        1, 1, 1, drift,
        lambda x, u: np.broadcast_to(diffusion * np.ones((1, 1)), np.shape(x)[:-1] + (1, 1)))


integrator = scalar(lambda x, u: np.broadcast_to(u, np.shape(x)).copy())
ou = scalar(lambda x, u: -np.asarray(x), 1.0)


def test_zero_dynamics_keeps_state(rng):
    sys0 = scalar(lambda x, u: np.zeros_like(x))
    out = integrate_hold_interval(sys0, [3.0], [5.0], 0.5, 0.05, rng)
    assert out[0] == 3.0


def test_constant_drift_integrates_exactly(rng):
    out = integrate_hold_interval(integrator, [0.0], [2.0], 0.5, 0.5 / 16, rng)
    assert out[0] == 1.0


def test_hold_interval_draws_exactly_delta_over_h():
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    integrate_hold_interval(ou, [1.0], [0.0], 1.0, 0.125, a)
    b.standard_normal(8)
    assert a.standard_normal() == b.standard_normal()


def test_ou_hold_interval_mean(rng):
    x = np.ones((100_000, 1))
    out = integrate_hold_interval(ou, x, np.zeros((1,)), 1.0, 1.0 / 16, rng)
    mean, se = out.mean(), out.std(ddof=1) / math.sqrt(len(out))
    # Euler bias (1 - h)^16 vs e^-1 is well below 3 SE here
    assert abs(mean - math.exp(-1.0)) <= 3 * se + abs((1 - 1 / 16) ** 16 - math.exp(-1))


def test_substep_must_divide_delta(rng):
    with pytest.raises(ValueError):
        integrate_hold_interval(ou, [1.0], [0.0], 1.0, 0.3, rng)


def test_nonfinite_control_rejected(rng):
    with pytest.raises(ValueError):
        integrate_hold_interval(ou, [1.0], [np.nan], 1.0, 0.5, rng)


def test_blowup_carries_time(rng):
    boom = scalar(lambda x, u: 1e8 * np.asarray(x))
    with pytest.raises(IntegrationDiverged) as exc:
        integrate_hold_interval(boom, [1.0], [0.0], 1.0, 0.25, rng)
    assert exc.value.time == 0.25


@pytest.mark.parametrize("delta,expected", [(0.1, 0.9 ** 10), (1.0, 0.0)])
def test_geometric_recursion(rng, delta, expected):
    policy = MarkovPolicy(lambda x: -x)
    cfg = SampleHoldConfig(delta, 1.0, (1.0,), substep=delta)
    tr = simulate_sample_hold(integrator, policy, cfg, rng)
    assert tr.states[-1, 0] == pytest.approx(expected, abs=1e-15)


def test_hold_invariance(rng):
    policy = MarkovPolicy(lambda x: -2.0 * x)
    cfg = SampleHoldConfig(0.2, 1.0, (1.0,))
    tr = simulate_sample_hold(ou, policy, cfg, rng)
    s = cfg.steps_per_hold
    held = tr.control_at_substeps(s)
    for k in range(cfg.n_holds):
        assert np.all(held[k * s:(k + 1) * s] == held[k * s])
        assert tr.controls[k, 0] == -2.0 * tr.states[k * s, 0]


def test_seed_determinism():
    cfg = SampleHoldConfig(0.1, 1.0, (1.0,))
    a = simulate_sample_hold(ou, zero_policy(1), cfg, np.random.default_rng(3))
    b = simulate_sample_hold(ou, zero_policy(1), cfg, np.random.default_rng(3))
    assert a.states.tobytes() == b.states.tobytes()


def test_zero_diffusion_ignores_rng():
    sys0 = scalar(lambda x, u: -np.asarray(x) + u)
    cfg = SampleHoldConfig(0.1, 1.0, (1.0,))
    a = simulate_sample_hold(sys0, zero_policy(1), cfg, np.random.default_rng(1))
    b = simulate_sample_hold(sys0, zero_policy(1), cfg, np.random.default_rng(2))
    assert np.array_equal(a.states, b.states)


def test_first_order_refinement(rng):
    sys0 = scalar(lambda x, u: -np.asarray(x))
    errs = []
    for h in (0.01, 0.005, 0.0025):
        cfg = SampleHoldConfig(0.5, 1.0, (1.0,), substep=h)
        tr = simulate_sample_hold(sys0, zero_policy(1), cfg, rng)
        errs.append(abs(tr.states[-1, 0] - math.exp(-1.0)))
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.05)


def test_config_rejects_noninteger_ratio():
    with pytest.raises(ValueError):
        SampleHoldConfig(0.1, 1.0, (0.0,), substep=0.03)


def test_config_default_substep():
    cfg = SampleHoldConfig(0.16, 1.0, (0.0,))
    assert cfg.substep == 0.01 and cfg.steps_per_hold == 16


def test_check_reports_bad_shapes():
    bad = ControlledSde(2, 1, 1, lambda x, u: np.zeros(3), lambda x, u: np.zeros((2, 1)))
    with pytest.raises(ValueError):
        bad.check(np.zeros(2), np.zeros(1))


def test_augmented_decoupled_limit(rng, backend):
    plant = scalar(lambda x, u: -np.asarray(x), 1.0)
    sys_a = AugmentedSde(plant, NoiseModel("sine_wiener", {"tau_a": 1.0}))
    still = AugmentedSde(scalar(lambda x, u: -np.asarray(x), 0.0),
                         NoiseModel("tsb", {"theta": 1.0, "q": 0.0}))
    cfg = SampleHoldConfig(0.1, 1.0, (1.0,), substep=1e-4)
    tr = simulate_augmented(still, zero_policy(1), cfg, rng)
    assert tr.states[-1, 0] == pytest.approx(math.exp(-1.0), abs=1e-4)
    tr = simulate_augmented(sys_a, zero_policy(1), cfg, rng)
    assert np.all(np.abs(tr.noise) < 1)


def test_augmented_zero_diffusion_matches_deterministic(backend):
    plant = scalar(lambda x, u: -np.asarray(x) + u, 0.0)
    sys_a = AugmentedSde(plant, NoiseModel("dcl", {"gamma": 0.0, "theta": 1.0}))
    cfg = SampleHoldConfig(0.1, 1.0, (1.0,))
    pol = MarkovPolicy(lambda x: -0.5 * x)
    a = simulate_augmented(sys_a, pol, cfg, np.random.default_rng(1))
    b = simulate_sample_hold(plant, pol, cfg, np.random.default_rng(2))
    assert np.array_equal(a.states, b.states)


def test_augmented_requires_bounded_noise():
    with pytest.raises(ValueError):
        AugmentedSde(ou, NoiseModel("brownian", {}))


def test_batch_flags_divergence_without_raising():
    boom = scalar(lambda x, u: 1e3 * np.asarray(x) ** 3)
    cfg = SampleHoldConfig(0.1, 1.0, (1.0,))
    inc = np.zeros((2, cfg.total_steps, 1))
    batch = simulate_batch(boom, zero_policy(1), cfg, inc)
    assert batch.diverged.all() and np.all(np.isfinite(batch.diverged_at))
