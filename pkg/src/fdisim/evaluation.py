"""Seeded Monte-Carlo rollouts of the detection-mitigation loop.

A rollout starts with the filter at its steady state: e[0] ~ N(0, P_e) and
x[0] = x_hat[0] + e[0].  For t = 1..T the loop applies the configured
controller, advances the plant, lets the attacker inject a[t] computed from
e[t-1] (the state of the error decision process before the step), runs the
chi-square test on the residual, applies the mitigation on alarms, and
updates the filter.  All noise for a batch of runs is pre-drawn from a
single stream in a fixed order (e[0] block, process block, measurement
block, mitigation block), so two batches built from the same stream share
every random input no matter which plan, detector or mitigation they use.
That makes cost comparisons and the paired false-positive / misdetection
differences common-random-number estimates rather than differences of
independent estimates.

The misdetection and false-positive costs compare the chi-square system
against a reference system whose detector is an oracle: it alarms exactly
when an injection is present.  The reference system runs the same policy
closed-loop on its own trajectory, with the same pre-drawn noise.

Cost[t] averages the cumulative squared error norm over runs:
Cost[t] = (1/W) sum_w sum_{tau=1..t} ||e_w[tau]||^2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .attack import AttackPlan, attack_at
from .defense import DetectorConfig, MitigationStrategy, detect, g_statistic, oracle_detect
from .lti import ModelError, SetpointController, SteadyState, SystemModel
from .numerics import RngStream, psd_factor

__all__ = [
    "BatchRollout",
    "CostReport",
    "EvaluationError",
    "PairedCost",
    "Trajectory",
    "compare_attacks",
    "empirical_cost",
    "fp_cost",
    "md_cost",
    "rollout",
    "rollout_batch",
]


class EvaluationError(ValueError):
    """Raised on rollout or cost-report contract violations."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One simulated run; every array is indexed by t = 0..T.

    Measurement-channel signals (y, y_a, y_f, a, delta, g, i) and the
    arrival-indexed noises (w, v) are zero at t = 0: no measurement is
    processed there, the filter starts at its steady state.  u[t] is the
    control computed from x_hat[t] (applied during the step to t+1).
    """

    x: np.ndarray
    x_hat: np.ndarray
    e: np.ndarray
    y: np.ndarray
    y_a: np.ndarray
    y_f: np.ndarray
    a: np.ndarray
    delta: np.ndarray
    g: np.ndarray
    i: np.ndarray
    u: np.ndarray
    w: np.ndarray
    v: np.ndarray

    @property
    def horizon(self) -> int:
        return self.x.shape[0] - 1


@dataclass(frozen=True, eq=False)
class BatchRollout:
    """W runs stacked on the leading axis; same per-t layout as Trajectory."""

    x: np.ndarray
    x_hat: np.ndarray
    e: np.ndarray
    y: np.ndarray
    y_a: np.ndarray
    y_f: np.ndarray
    a: np.ndarray
    delta: np.ndarray
    g: np.ndarray
    i: np.ndarray
    u: np.ndarray
    w: np.ndarray
    v: np.ndarray

    @property
    def runs(self) -> int:
        return self.x.shape[0]

    @property
    def horizon(self) -> int:
        return self.x.shape[1] - 1

    def single(self, run: int) -> Trajectory:
        return Trajectory(**{name: getattr(self, name)[run]
                             for name in Trajectory.__dataclass_fields__})

    def detection_frequency(self) -> np.ndarray:
        """Fraction of runs alarming at each t (zero at t = 0)."""
        return self.i.mean(axis=0)


@dataclass(frozen=True, eq=False)
class CostReport:
    """Empirical cumulative cost curve; index k holds Cost[k+1]."""

    cost_per_t: np.ndarray
    std_err_per_t: np.ndarray
    runs: int
    digest: str = ""

    @property
    def horizon(self) -> int:
        return self.cost_per_t.shape[0]

    @property
    def terminal_cost(self) -> float:
        return float(self.cost_per_t[-1])


class PairedCost(NamedTuple):
    """Common-random-number cost difference and its standard error."""

    value: float
    std_error: float


def _check_plan_horizon(plan: AttackPlan, horizon: int) -> None:
    if plan.kind == "policy" and not plan.stationary \
            and plan.policy.horizon < horizon:
        raise EvaluationError(
            f"policy covers {plan.policy.horizon} stages but the rollout "
            f"horizon is {horizon}; solve with horizon >= T or use a "
            f"stationary plan")


def _batch_control(model: SystemModel, controller: SetpointController | None,
                   x_hat: np.ndarray) -> np.ndarray:
    """Per-run control inputs for a (W, n) block of estimates."""
    if controller is None:
        return np.zeros((x_hat.shape[0], model.p))
    if not 0.0 < controller.alpha < 1.0:
        raise ModelError(f"alpha must lie in (0, 1), got {controller.alpha}")
    if model.B.shape[0] != model.B.shape[1]:
        raise ModelError(
            f"setpoint control needs square B, got {model.B.shape}")
    x0 = np.broadcast_to(np.asarray(controller.x0, dtype=float), x_hat.shape)
    return controller.alpha * np.linalg.solve(model.B, (x0 - x_hat).T).T


def rollout_batch(model: SystemModel, ss: SteadyState, plan: AttackPlan,
                  detector: DetectorConfig, strategy: MitigationStrategy,
                  T: int, stream: RngStream, runs: int,
                  controller: SetpointController | None = None,
                  x_hat0: np.ndarray | None = None,
                  oracle: bool = False) -> BatchRollout:
    """Simulate `runs` independent loops of length T with shared noise order.

    With `oracle=True` the detector is replaced by the reference oracle
    (alarm exactly when a[t] != 0); g is still logged for inspection.
    """
    if T < 1:
        raise EvaluationError(f"horizon must be >= 1, got {T}")
    if runs < 1:
        raise EvaluationError(f"runs must be >= 1, got {runs}")
    if plan.dim != model.m:
        raise EvaluationError(
            f"plan injects {plan.dim}-vectors but the model has m={model.m}")
    _check_plan_horizon(plan, T)
    W, n, m, p = runs, model.n, model.m, model.p

    gen = stream.generator()
    L_e = psd_factor(ss.P_e)
    L_q = psd_factor(model.Q)
    L_r = psd_factor(model.R)
    # fixed draw order: e0 block, process block, measurement block,
    # mitigation block; keeps streams aligned across compared systems
    e0 = gen.standard_normal((W, n)) @ L_e.T
    w = np.zeros((W, T + 1, n))
    w[:, 1:] = gen.standard_normal((W, T, n)) @ L_q.T
    v = np.zeros((W, T + 1, m))
    v[:, 1:] = gen.standard_normal((W, T, m)) @ L_r.T
    b = np.zeros((W, T + 1, m))
    b[:, 1:] = gen.standard_normal((W, T, m))

    x = np.zeros((W, T + 1, n))
    x_hat = np.zeros((W, T + 1, n))
    e = np.zeros((W, T + 1, n))
    y = np.zeros((W, T + 1, m))
    y_a = np.zeros((W, T + 1, m))
    y_f = np.zeros((W, T + 1, m))
    a = np.zeros((W, T + 1, m))
    delta = np.zeros((W, T + 1, m))
    g = np.zeros((W, T + 1))
    i = np.zeros((W, T + 1), dtype=np.int64)
    u = np.zeros((W, T + 1, p))

    if x_hat0 is None:
        x_hat0 = np.zeros(n)
    x_hat[:, 0] = np.broadcast_to(np.asarray(x_hat0, dtype=float), (W, n))
    e[:, 0] = e0
    x[:, 0] = x_hat[:, 0] + e0

    A_T, B_T, C_T, K_T = model.A.T, model.B.T, model.C.T, ss.K.T
    for t in range(1, T + 1):
        u_prev = _batch_control(model, controller, x_hat[:, t - 1])
        u[:, t - 1] = u_prev
        x[:, t] = x[:, t - 1] @ A_T + u_prev @ B_T + w[:, t]
        y[:, t] = x[:, t] @ C_T + v[:, t]
        a[:, t] = attack_at(plan, t, e[:, t - 1], stage_remaining=T - t + 1)
        y_a[:, t] = y[:, t] + a[:, t]
        x_pred = x_hat[:, t - 1] @ A_T + u_prev @ B_T
        r = y_a[:, t] - x_pred @ C_T
        g[:, t] = g_statistic(ss, r)
        i[:, t] = oracle_detect(a[:, t]) if oracle else detect(detector, g[:, t])
        if strategy.kind == "perfect":
            delta[:, t] = a[:, t]
        elif strategy.kind == "noisy":
            delta[:, t] = a[:, t] + strategy.sigma_mit * b[:, t]
        y_f[:, t] = y_a[:, t] - i[:, t, None] * delta[:, t]
        x_hat[:, t] = x_pred + (y_f[:, t] - x_pred @ C_T) @ K_T
        e[:, t] = x[:, t] - x_hat[:, t]
    u[:, T] = _batch_control(model, controller, x_hat[:, T])

    return BatchRollout(x=x, x_hat=x_hat, e=e, y=y, y_a=y_a, y_f=y_f, a=a,
                        delta=delta, g=g, i=i, u=u, w=w, v=v)


def rollout(model: SystemModel, ss: SteadyState, plan: AttackPlan,
            detector: DetectorConfig, strategy: MitigationStrategy,
            T: int, stream: RngStream,
            controller: SetpointController | None = None,
            x_hat0: np.ndarray | None = None,
            oracle: bool = False) -> Trajectory:
    """Single run; identical to run 0 of a one-run batch on the same stream."""
    batch = rollout_batch(model, ss, plan, detector, strategy, T, stream,
                          runs=1, controller=controller, x_hat0=x_hat0,
                          oracle=oracle)
    return batch.single(0)


def _inner_sums(batch: BatchRollout) -> np.ndarray:
    """Per-run cumulative squared error norms, shape (W, T); column t-1
    holds sum_{tau=1..t} ||e[tau]||^2."""
    sq = np.sum(batch.e[:, 1:] ** 2, axis=2)
    return np.cumsum(sq, axis=1)


def _stack_trajectories(trajectories: Sequence[Trajectory]) -> BatchRollout:
    if len(trajectories) == 0:
        raise EvaluationError("empirical cost needs at least one run")
    horizons = {tr.horizon for tr in trajectories}
    if len(horizons) != 1:
        raise EvaluationError(f"runs disagree on the horizon: {sorted(horizons)}")
    return BatchRollout(**{
        name: np.stack([getattr(tr, name) for tr in trajectories])
        for name in Trajectory.__dataclass_fields__})


def empirical_cost(runs: BatchRollout | Sequence[Trajectory],
                   digest: str = "") -> CostReport:
    """Average cumulative cost curve with across-run standard errors."""
    batch = runs if isinstance(runs, BatchRollout) else _stack_trajectories(runs)
    sums = _inner_sums(batch)
    W = sums.shape[0]
    cost = sums.mean(axis=0)
    if W > 1:
        std_err = sums.std(axis=0, ddof=1) / np.sqrt(W)
    else:
        std_err = np.zeros_like(cost)
    return CostReport(cost_per_t=cost, std_err_per_t=std_err, runs=W,
                      digest=digest)


def compare_attacks(model: SystemModel, ss: SteadyState,
                    plans: Sequence[AttackPlan], detector: DetectorConfig,
                    strategy: MitigationStrategy, T: int, runs: int,
                    stream: RngStream,
                    controller: SetpointController | None = None,
                    x_hat0: np.ndarray | None = None,
                    digest: str = "") -> list[CostReport]:
    """One CostReport per plan, all plans sharing the same noise draws."""
    if len(plans) == 0:
        raise EvaluationError("need at least one plan to compare")
    return [empirical_cost(
        rollout_batch(model, ss, plan, detector, strategy, T, stream, runs,
                      controller=controller, x_hat0=x_hat0), digest=digest)
        for plan in plans]


def _paired_terminal_difference(model: SystemModel, ss: SteadyState,
                                plan: AttackPlan, detector: DetectorConfig,
                                strategy: MitigationStrategy, T: int,
                                runs: int, stream: RngStream,
                                controller: SetpointController | None,
                                x_hat0: np.ndarray | None) -> PairedCost:
    """Cost[T] difference: chi-square system minus oracle reference, with
    common random numbers, so the difference is computed run by run."""
    tested = rollout_batch(model, ss, plan, detector, strategy, T, stream,
                           runs, controller=controller, x_hat0=x_hat0)
    reference = rollout_batch(model, ss, plan, detector, strategy, T, stream,
                              runs, controller=controller, x_hat0=x_hat0,
                              oracle=True)
    diff = _inner_sums(tested)[:, -1] - _inner_sums(reference)[:, -1]
    se = diff.std(ddof=1) / np.sqrt(runs) if runs > 1 else 0.0
    return PairedCost(float(diff.mean()), float(se))


def fp_cost(model: SystemModel, ss: SteadyState, eta: float,
            strategy: MitigationStrategy, T: int, runs: int,
            stream: RngStream,
            controller: SetpointController | None = None,
            x_hat0: np.ndarray | None = None) -> PairedCost:
    """Extra cost from false alarms: no attack is injected, so every
    chi-square alarm triggers mitigation against nothing while the oracle
    reference never fires."""
    plan = AttackPlan.none(dim=model.m)
    return _paired_terminal_difference(model, ss, plan, DetectorConfig(eta),
                                       strategy, T, runs, stream, controller,
                                       x_hat0)


def md_cost(model: SystemModel, ss: SteadyState, eta: float,
            strategy: MitigationStrategy, plan: AttackPlan, T: int,
            runs: int, stream: RngStream,
            controller: SetpointController | None = None,
            x_hat0: np.ndarray | None = None) -> PairedCost:
    """Extra cost from missed detections under an attack plan: the oracle
    reference alarms on every injected step, so only the injections the
    chi-square detector misses separate the two systems."""
    if plan.kind == "none":
        raise EvaluationError("misdetection cost needs an attacking plan")
    return _paired_terminal_difference(model, ss, plan, DetectorConfig(eta),
                                       strategy, T, runs, stream, controller,
                                       x_hat0)
