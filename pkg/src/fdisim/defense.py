"""Residual-based attack detection and reactive mitigation.

The detector computes g = r' P_r^-1 r from the innovation r and alarms when
g exceeds a threshold eta (strictly; g == eta does not alarm). On alarm the
mitigation subtracts a correction delta from the attacked measurement before
it reaches the filter. A perfect correction removes the injection exactly;
a noisy one adds zero-mean Gaussian error on top; "off" leaves the
measurement untouched. The oracle detector alarms exactly when an injection
is present and is the reference point for false-positive and
missed-detection costing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lti import SteadyState, SystemModel, _vector
from .numerics import RngStream


class DefenseError(ValueError):
    """Raised for invalid detector or mitigation configuration."""


@dataclass(frozen=True)
class DetectorConfig:
    """Chi-square residual detector with alarm threshold eta >= 0.

    eta = 0 alarms on any nonzero statistic; eta = inf never alarms.
    """

    eta: float

    def __post_init__(self):
        eta = float(self.eta)
        if math.isnan(eta) or eta < 0.0:
            raise DefenseError(f"eta must be >= 0, got {eta}")
        object.__setattr__(self, "eta", eta)


@dataclass(frozen=True)
class MitigationStrategy:
    """Reactive correction policy: 'perfect' (delta = a), 'noisy'
    (delta = a + b with b ~ N(0, sigma_mit^2 I)), or 'off' (delta = 0)."""

    kind: str
    sigma_mit: float = 0.0

    def __post_init__(self):
        if self.kind not in ("perfect", "noisy", "off"):
            raise DefenseError(f"unknown mitigation kind {self.kind!r}")
        if self.sigma_mit < 0.0 or math.isnan(self.sigma_mit):
            raise DefenseError(f"sigma_mit must be >= 0, got {self.sigma_mit}")
        if self.kind != "noisy" and self.sigma_mit != 0.0:
            raise DefenseError(f"sigma_mit only applies to 'noisy', got "
                               f"{self.kind!r} with sigma_mit={self.sigma_mit}")

    @classmethod
    def perfect(cls) -> "MitigationStrategy":
        return cls("perfect")

    @classmethod
    def noisy(cls, sigma_mit: float) -> "MitigationStrategy":
        return cls("noisy", float(sigma_mit))

    @classmethod
    def off(cls) -> "MitigationStrategy":
        return cls("off")


def residual(model: SystemModel, ss: SteadyState, x_hat_prev: np.ndarray,
             u_prev: np.ndarray, y_attacked: np.ndarray) -> np.ndarray:
    """Innovation r = y_a - C (A x_hat + B u) against the one-step prediction."""
    x_hat_prev = _vector("x_hat_prev", x_hat_prev, model.n)
    u_prev = _vector("u_prev", u_prev, model.p)
    y_attacked = _vector("y_attacked", y_attacked, model.m)
    pred = model.A @ x_hat_prev + model.B @ u_prev
    return y_attacked - model.C @ pred


def g_statistic(ss: SteadyState, r) -> np.ndarray:
    """Quadratic detection statistic r' P_r^-1 r; vectorized over leading axes."""
    r = np.asarray(r, dtype=float)
    return np.einsum("...i,ij,...j->...", r, ss.P_r_inv, r)


def detect(detector: DetectorConfig, g) -> np.ndarray:
    """Alarm indicator: 1 where g > eta, else 0 (boundary does not alarm)."""
    return (np.asarray(g) > detector.eta).astype(np.int64)


def oracle_detect(a_true) -> np.ndarray:
    """Reference detector: alarms exactly when an injection is present."""
    a_true = np.asarray(a_true, dtype=float)
    # any-nonzero rather than norm > 0: the squared norm of a subnormal
    # injection underflows to zero while the injection is still present
    present = np.any(np.atleast_1d(a_true) != 0.0, axis=-1)
    return present.astype(np.int64)


def mitigation_signal(strategy: MitigationStrategy, a_true: np.ndarray,
                      stream: RngStream) -> np.ndarray:
    """Correction delta computed from the true injection under the strategy.

    The noisy variant draws its perturbation from `stream` on every call,
    whether or not an alarm will consume the result, which keeps paired
    experiments aligned on common random numbers.
    """
    a_true = np.atleast_1d(np.asarray(a_true, dtype=float))
    if strategy.kind == "off":
        return np.zeros_like(a_true)
    if strategy.kind == "perfect":
        return a_true.copy()
    noise = stream.generator().standard_normal(a_true.shape)
    return a_true + strategy.sigma_mit * noise


def apply_mitigation(y_attacked: np.ndarray, alarm, delta: np.ndarray) -> np.ndarray:
    """Defended measurement y_f = y_a - alarm * delta."""
    y_attacked = np.asarray(y_attacked, dtype=float)
    delta = np.asarray(delta, dtype=float)
    alarm = np.asarray(alarm)
    return y_attacked - np.expand_dims(alarm, -1) * delta if alarm.ndim else \
        y_attacked - int(alarm) * delta
