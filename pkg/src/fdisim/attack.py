"""Injection plans: what the attacker adds to the measurements.

A plan maps (time step, observed error, stages remaining) to an injection
with norm at most a_max. Baselines are the constant and ramp schedules; the
solved plan replays a stage-indexed MDP policy, either by stages remaining
(default) or stationary (always the deepest stage table).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import Policy, policy_lookup


class AttackError(ValueError):
    """Raised for malformed attack plans or lookups."""


def clip_to_norm(a: np.ndarray, a_max: float) -> np.ndarray:
    """Radially clip rows of a to the closed ball of radius a_max."""
    a = np.asarray(a, dtype=float)
    norms = np.linalg.norm(np.atleast_2d(a), axis=1)
    excess = norms > a_max
    if not np.any(excess):
        return a
    scale = np.ones_like(norms)
    scale[excess] = a_max / norms[excess]
    return a * (scale[:, None] if a.ndim == 2 else scale[0])


@dataclass(frozen=True, eq=False)
class AttackPlan:
    """Injection schedule; build via the none/constant/ramp/from_policy
    constructors. `dim` is the measurement dimension."""

    kind: str
    dim: int
    a_max: float
    constant_value: np.ndarray | None = None
    slope: np.ndarray | None = None
    policy: Policy | None = None
    stationary: bool = False

    def __post_init__(self):
        if self.kind not in ("none", "constant", "ramp", "policy"):
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.a_max < 0.0:
            raise AttackError(f"a_max must be >= 0, got {self.a_max}")
        if self.kind == "constant" and (self.constant_value is None
                                        or self.constant_value.size != self.dim):
            raise AttackError("constant plan needs an m-vector value")
        if self.kind == "ramp" and (self.slope is None
                                    or self.slope.size != self.dim):
            raise AttackError("ramp plan needs an m-vector slope")
        if self.kind == "policy" and self.policy is None:
            raise AttackError("policy plan needs a solved Policy")

    @classmethod
    def none(cls, dim: int = 1, a_max: float = 20.0) -> "AttackPlan":
        return cls(kind="none", dim=dim, a_max=a_max)

    @classmethod
    def constant(cls, value, a_max: float = 20.0) -> "AttackPlan":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(kind="constant", dim=value.size, a_max=a_max,
                   constant_value=value)

    @classmethod
    def ramp(cls, slope, a_max: float = 20.0) -> "AttackPlan":
        slope = np.atleast_1d(np.asarray(slope, dtype=float))
        return cls(kind="ramp", dim=slope.size, a_max=a_max, slope=slope)

    @classmethod
    def from_policy(cls, policy: Policy, stationary: bool = False) -> "AttackPlan":
        return cls(kind="policy", dim=policy.actions.shape[1],
                   a_max=policy.a_max, policy=policy, stationary=stationary)


def attack_at(plan: AttackPlan, t: int, e_attacker,
              stage_remaining: int | None = None) -> np.ndarray:
    """Injection applied to the measurement at step t (t >= 1).

    e_attacker is the error the attacker observed before the step, a single
    (n,) vector or a batch (B, n); the result has matching leading shape.
    Policy plans need stage_remaining unless stationary. The returned
    injection always satisfies ||a|| <= a_max.
    """
    e_attacker = np.asarray(e_attacker, dtype=float)
    batch = e_attacker.ndim == 2
    n_rows = e_attacker.shape[0] if batch else 1

    if plan.kind == "none":
        a = np.zeros((n_rows, plan.dim))
    elif plan.kind == "constant":
        a = np.tile(plan.constant_value, (n_rows, 1))
    elif plan.kind == "ramp":
        if t < 0:
            raise AttackError(f"ramp needs t >= 0, got {t}")
        a = np.tile(float(t) * plan.slope, (n_rows, 1))
    else:
        stage = plan.policy.horizon if plan.stationary else stage_remaining
        if stage is None:
            raise AttackError("policy plan needs stage_remaining (or set "
                              "stationary=True)")
        a = np.atleast_2d(policy_lookup(plan.policy, stage, e_attacker))
    a = np.atleast_2d(clip_to_norm(a, plan.a_max))
    return a if batch else a[0]
