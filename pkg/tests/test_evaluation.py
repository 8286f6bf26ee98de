"""Rollout and cost-report tests.

What is proven here:
  * Rollouts are bit-identical when replayed on the same stream, and a
    single rollout equals run 0 of a one-run batch.
  * Trajectory invariants: e = x - x_hat and y_f = y_a - i*delta exactly;
    each logged e[t] is reproduced by error_step from the logged inputs
    (the loop really implements the stated error recursion).
  * With no attack and the detector disabled, the cost curve grows at
    slope ~ trace(P_e) = P_inf (1 - K) ~= 2.70 (5% at W=10000).
  * empirical_cost is the plain arithmetic of per-run cumulative sums,
    W=1 gives zero standard errors, zero error gives a zero curve.
  * Comparing a plan with itself under common random numbers gives
    bit-identical reports.
  * Perfect mitigation at eta=0 cancels a constant attack exactly: the
    attacked trajectory equals the unattacked one path by path.
  * fp_cost is exactly zero under perfect mitigation and at eta=inf;
    md_cost is exactly zero at eta=0 under an always-injecting plan and
    rejects the no-attack plan.
  * A policy plan shorter than the horizon is rejected unless stationary.
"""

import math

import numpy as np
import pytest

from fdisim.attack import AttackPlan
from fdisim.defense import DetectorConfig, MitigationStrategy
from fdisim.evaluation import (
    EvaluationError,
    compare_attacks,
    empirical_cost,
    fp_cost,
    md_cost,
    rollout,
    rollout_batch,
)
from fdisim.lti import SetpointController, SystemModel, derive_steady_state, error_step
from fdisim.numerics import RngStream

P_INF = (1.0 + math.sqrt(41.0)) / 2.0
K_GAIN = P_INF / (P_INF + 10.0)
TRACE_P_E = P_INF * (1.0 - K_GAIN)  # = 2.7015621187164243


@pytest.fixture(scope="module")
def bench():
    model = SystemModel(A=[[1.0]], B=[[1.0]], C=[[1.0]], Q=[[1.0]], R=[[10.0]])
    return model, derive_steady_state(model)


def test_rollout_reproducible_and_matches_batch(bench):
    model, ss = bench
    args = (model, ss, AttackPlan.constant([4.0], a_max=20.0),
            DetectorConfig(10.0), MitigationStrategy.noisy(5.0), 8)
    tr1 = rollout(*args, RngStream(7, 3))
    tr2 = rollout(*args, RngStream(7, 3))
    batch = rollout_batch(*args, RngStream(7, 3), runs=1)
    for name in ("x", "x_hat", "e", "y", "y_a", "y_f", "a", "delta", "g",
                 "i", "u", "w", "v"):
        assert np.array_equal(getattr(tr1, name), getattr(tr2, name)), name
        assert np.array_equal(getattr(tr1, name), getattr(batch, name)[0]), name
    tr3 = rollout(*args, RngStream(8, 3))
    assert not np.array_equal(tr1.e, tr3.e)


def test_trajectory_invariants_and_error_recursion(bench):
    model, ss = bench
    tr = rollout(model, ss, AttackPlan.ramp([1.0], a_max=20.0),
                 DetectorConfig(2.0), MitigationStrategy.noisy(3.0), 12,
                 RngStream(42))
    assert np.array_equal(tr.e, tr.x - tr.x_hat)
    assert np.array_equal(tr.y_f, tr.y_a - tr.i[:, None] * tr.delta)
    assert tr.horizon == 12
    assert np.all(tr.y[0] == 0.0) and np.all(tr.g[0] == 0.0) and tr.i[0] == 0
    for t in range(1, 13):
        e_step = error_step(model, ss, tr.e[t - 1], tr.w[t], tr.v[t],
                            tr.a[t], int(tr.i[t]), tr.delta[t])
        assert np.max(np.abs(e_step - tr.e[t])) < 1e-10, t


def test_no_attack_cost_slope_matches_stationary_error(bench):
    model, ss = bench
    batch = rollout_batch(model, ss, AttackPlan.none(),
                          DetectorConfig(np.inf), MitigationStrategy.off(),
                          T=10, stream=RngStream(11), runs=10_000)
    report = empirical_cost(batch)
    assert report.runs == 10_000
    slope = report.cost_per_t[-1] / 10.0
    assert abs(slope - TRACE_P_E) / TRACE_P_E < 0.05
    increments = np.diff(report.cost_per_t)
    assert np.all(increments > 0.0)
    assert np.all(report.cost_per_t >= 0.0)


def test_empirical_cost_arithmetic(bench):
    model, ss = bench
    batch = rollout_batch(*(*bench, AttackPlan.constant([6.0], a_max=20.0),
                            DetectorConfig(5.0), MitigationStrategy.perfect()),
                          T=5, stream=RngStream(3), runs=4)
    report = empirical_cost(batch, digest="abc123")
    sums = np.cumsum(np.sum(batch.e[:, 1:] ** 2, axis=2), axis=1)
    assert np.allclose(report.cost_per_t, sums.mean(axis=0), rtol=0, atol=0)
    assert np.allclose(report.std_err_per_t,
                       sums.std(axis=0, ddof=1) / 2.0, rtol=0, atol=0)
    assert report.digest == "abc123"
    assert report.horizon == 5
    assert report.terminal_cost == report.cost_per_t[-1]

    single = empirical_cost([batch.single(0)])
    assert np.array_equal(single.cost_per_t, sums[0])
    assert np.all(single.std_err_per_t == 0.0)
    with pytest.raises(EvaluationError):
        empirical_cost([])


def test_compare_attacks_common_random_numbers(bench):
    model, ss = bench
    plans = [AttackPlan.none(), AttackPlan.none()]
    r1, r2 = compare_attacks(model, ss, plans, DetectorConfig(5.0),
                             MitigationStrategy.perfect(), T=6, runs=50,
                             stream=RngStream(19))
    assert np.array_equal(r1.cost_per_t, r2.cost_per_t)
    assert np.array_equal(r1.std_err_per_t, r2.std_err_per_t)
    with pytest.raises(EvaluationError):
        compare_attacks(model, ss, [], DetectorConfig(5.0),
                        MitigationStrategy.perfect(), T=6, runs=10,
                        stream=RngStream(19))


def test_perfect_mitigation_at_eta_zero_cancels_attack(bench):
    # eta=0 alarms on every step; delta = a subtracts the injection before
    # the filter sees it, so the attacked run matches the clean run up to
    # the rounding of (y + a) - a.
    model, ss = bench
    kwargs = dict(T=10, stream=RngStream(23), runs=20)
    attacked = rollout_batch(model, ss,
                             AttackPlan.constant([10.0], a_max=20.0),
                             DetectorConfig(0.0),
                             MitigationStrategy.perfect(), **kwargs)
    clean = rollout_batch(model, ss, AttackPlan.none(), DetectorConfig(0.0),
                          MitigationStrategy.perfect(), **kwargs)
    assert np.max(np.abs(attacked.e - clean.e)) < 1e-12
    assert np.max(np.abs(attacked.x_hat - clean.x_hat)) < 1e-12
    assert np.all(attacked.i[:, 1:] == 1)


def test_noisy_mitigation_draws_consumed_every_step(bench):
    # the mitigation block is pre-drawn whether or not alarms fire, so the
    # plant/measurement noise is identical across detector settings
    model, ss = bench
    plan = AttackPlan.constant([10.0], a_max=20.0)
    kwargs = dict(T=6, runs=8)
    loose = rollout_batch(model, ss, plan, DetectorConfig(np.inf),
                          MitigationStrategy.noisy(15.0),
                          stream=RngStream(31), **kwargs)
    tight = rollout_batch(model, ss, plan, DetectorConfig(0.0),
                          MitigationStrategy.noisy(15.0),
                          stream=RngStream(31), **kwargs)
    assert np.array_equal(loose.w, tight.w)
    assert np.array_equal(loose.v, tight.v)
    assert np.array_equal(loose.y, tight.y)
    assert np.all(loose.i[:, 1:] == 0) and np.all(tight.i[:, 1:] == 1)
    assert np.array_equal(loose.delta, tight.delta)  # same pre-drawn block


def test_fp_cost_zero_cases(bench):
    model, ss = bench
    pc = fp_cost(model, ss, eta=1.0, strategy=MitigationStrategy.perfect(),
                 T=8, runs=200, stream=RngStream(41))
    assert pc.value == 0.0 and pc.std_error == 0.0
    pc_inf = fp_cost(model, ss, eta=np.inf,
                     strategy=MitigationStrategy.noisy(15.0), T=8, runs=200,
                     stream=RngStream(41))
    assert pc_inf.value == 0.0
    pc_noisy = fp_cost(model, ss, eta=0.0,
                       strategy=MitigationStrategy.noisy(15.0), T=8,
                       runs=500, stream=RngStream(41))
    assert pc_noisy.value > 0.0  # constant false alarms inject noise


def test_md_cost_zero_at_eta_zero(bench):
    model, ss = bench
    plan = AttackPlan.constant([10.0], a_max=20.0)
    pc = md_cost(model, ss, eta=0.0, strategy=MitigationStrategy.noisy(15.0),
                 plan=plan, T=8, runs=200, stream=RngStream(43))
    # both systems alarm on every (always-injecting) step and share noise
    assert pc.value == 0.0 and pc.std_error == 0.0
    pc_high = md_cost(model, ss, eta=20.0,
                      strategy=MitigationStrategy.perfect(), plan=plan, T=8,
                      runs=500, stream=RngStream(43))
    assert pc_high.value > 0.0  # missed detections leave injections active
    with pytest.raises(EvaluationError):
        md_cost(model, ss, eta=1.0, strategy=MitigationStrategy.perfect(),
                plan=AttackPlan.none(), T=8, runs=10, stream=RngStream(43))


def test_rollout_contract_checks(bench):
    model, ss = bench
    good = (AttackPlan.none(), DetectorConfig(1.0), MitigationStrategy.off())
    with pytest.raises(EvaluationError):
        rollout_batch(model, ss, *good, T=0, stream=RngStream(1), runs=5)
    with pytest.raises(EvaluationError):
        rollout_batch(model, ss, *good, T=5, stream=RngStream(1), runs=0)
    with pytest.raises(EvaluationError):
        rollout_batch(model, ss, AttackPlan.none(dim=2), DetectorConfig(1.0),
                      MitigationStrategy.off(), T=5, stream=RngStream(1),
                      runs=5)


def test_short_policy_plan_rejected(bench):
    import warnings

    from fdisim.mdp import (TruncationWarning, build_grid,
                            build_transition_model, uniform_actions,
                            value_iteration)
    model, ss = bench
    grid = build_grid([(-12.0, 12.0)], [1.0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        tm = build_transition_model(model, ss, eta=10.0, grid=grid,
                                    actions=uniform_actions(20.0, 21))
    policy = value_iteration(tm, horizon=3)
    plan = AttackPlan.from_policy(policy)
    with pytest.raises(EvaluationError):
        rollout_batch(model, ss, plan, DetectorConfig(10.0),
                      MitigationStrategy.perfect(), T=5,
                      stream=RngStream(2), runs=3)
    stationary = AttackPlan.from_policy(policy, stationary=True)
    batch = rollout_batch(model, ss, stationary, DetectorConfig(10.0),
                          MitigationStrategy.perfect(), T=5,
                          stream=RngStream(2), runs=3)
    assert batch.horizon == 5


def test_controller_batch_matches_scalar_path(bench):
    from fdisim.lti import control_input
    model, ss = bench
    ctrl = SetpointController(x0=[0.835], alpha=0.5)
    batch = rollout_batch(model, ss, AttackPlan.none(), DetectorConfig(5.0),
                          MitigationStrategy.perfect(), T=4,
                          stream=RngStream(77), runs=6, controller=ctrl,
                          x_hat0=[1.0])
    for run in range(6):
        for t in range(5):
            u_ref = control_input(model, ctrl, batch.x_hat[run, t])
            assert np.allclose(batch.u[run, t], u_ref, atol=1e-14)
    # the mean estimate contracts towards the setpoint
    d0 = abs(batch.x_hat[:, 0, 0].mean() - 0.835)
    dT = abs(batch.x_hat[:, 4, 0].mean() - 0.835)
    assert dT < d0
