"""Discrete-time LTI plant with a steady-state Kalman filter.

The plant is x[t+1] = A x[t] + B u[t] + w[t], y[t] = C x[t] + v[t] with
w ~ N(0, Q) and v ~ N(0, R). The filter runs at its steady-state gain K,
and the estimation error e = x - x_hat obeys

    e[t+1] = A_K e[t] + W_K w[t] - K (a[t+1] - i[t+1] d[t+1]) - K v[t+1]

with A_K = A - K C A and W_K = I - K C, where a is the sensor injection, i
the alarm indicator and d the mitigation correction applied to the
measurement. The control input cancels from this recursion, which is what
lets the attack problem be posed on the error alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericsError, RngStream, solve_dare


class ModelError(ValueError):
    """Raised when a system description violates its structural contract."""


def _matrix(name: str, value, rows: int | None = None, cols: int | None = None):
    mat = np.atleast_2d(np.asarray(value, dtype=float))
    if mat.ndim != 2:
        raise ModelError(f"{name} must be a matrix, got ndim {mat.ndim}")
    if rows is not None and mat.shape[0] != rows:
        raise ModelError(f"{name} has {mat.shape[0]} rows, expected {rows}")
    if cols is not None and mat.shape[1] != cols:
        raise ModelError(f"{name} has {mat.shape[1]} columns, expected {cols}")
    return mat


def _vector(name: str, value, size: int):
    vec = np.atleast_1d(np.asarray(value, dtype=float))
    if vec.shape != (size,):
        raise ModelError(f"{name} has shape {vec.shape}, expected ({size},)")
    return vec


def _sym_psd(name: str, mat: np.ndarray, strict: bool = False) -> None:
    scale = 1.0 + float(np.max(np.abs(mat), initial=0.0))
    if np.max(np.abs(mat - mat.T), initial=0.0) > 1e-8 * scale:
        raise ModelError(f"{name} must be symmetric")
    eigs = np.linalg.eigvalsh(mat)
    if strict and eigs[0] <= 0.0:
        raise ModelError(f"{name} must be positive definite, min eig {eigs[0]:.3e}")
    if not strict and eigs[0] < -1e-8 * scale:
        raise ModelError(f"{name} must be positive semidefinite, min eig {eigs[0]:.3e}")


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Plant matrices and noise covariances; dimensions n states, p inputs,
    m measurements. X0 is the initial-state covariance (kept for model
    completeness; steady-state experiments start the error at its stationary
    distribution instead)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    X0: np.ndarray | None = None

    def __post_init__(self):
        A = _matrix("A", self.A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ModelError(f"A must be square, got {A.shape}")
        B = _matrix("B", self.B, rows=n)
        C = _matrix("C", self.C, cols=n)
        m = C.shape[0]
        Q = _matrix("Q", self.Q, rows=n, cols=n)
        R = _matrix("R", self.R, rows=m, cols=m)
        _sym_psd("Q", Q)
        _sym_psd("R", R, strict=True)
        X0 = np.eye(n) if self.X0 is None else _matrix("X0", self.X0, rows=n, cols=n)
        _sym_psd("X0", X0)

        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        if np.linalg.matrix_rank(ctrb) < n:
            raise ModelError(f"(A, B) is not controllable (rank "
                             f"{np.linalg.matrix_rank(ctrb)} < {n})")
        obsv = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(n)])
        if np.linalg.matrix_rank(obsv) < n:
            raise ModelError(f"(C, A) is not observable (rank "
                             f"{np.linalg.matrix_rank(obsv)} < {n})")

        for name, val in (("A", A), ("B", B), ("C", C), ("Q", Q), ("R", R), ("X0", X0)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True, eq=False)
class SteadyState:
    """Steady-state filter quantities derived from a SystemModel.

    P_inf: prediction error covariance (Riccati fixed point)
    K:     filter gain P_inf C' (C P_inf C' + R)^-1
    P_r:   innovation covariance C P_inf C' + R, with cached inverse
    A_K:   closed-loop error matrix A - K C A
    W_K:   I - K C
    P_e:   filtered error covariance (I - K C) P_inf
    """

    P_inf: np.ndarray
    K: np.ndarray
    P_r: np.ndarray
    P_r_inv: np.ndarray
    A_K: np.ndarray
    W_K: np.ndarray
    P_e: np.ndarray


def derive_steady_state(model: SystemModel) -> SteadyState:
    try:
        P_inf = solve_dare(model.A, model.C, model.Q, model.R)
    except NumericsError as err:
        raise ModelError(f"steady-state filter does not exist: {err}") from err
    P_r = model.C @ P_inf @ model.C.T + model.R
    P_r_inv = np.linalg.inv(P_r)
    K = P_inf @ model.C.T @ P_r_inv
    W_K = np.eye(model.n) - K @ model.C
    A_K = model.A - K @ model.C @ model.A
    P_e = W_K @ P_inf
    P_e = 0.5 * (P_e + P_e.T)
    return SteadyState(P_inf=P_inf, K=K, P_r=P_r, P_r_inv=P_r_inv,
                       A_K=A_K, W_K=W_K, P_e=P_e)


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SetpointController:
    """u = alpha * B^-1 (x0 - x_hat); requires square invertible B and
    alpha in (0, 1). Drives the estimate toward x0 when A = I."""

    x0: np.ndarray
    alpha: float


def setpoint_control(model: SystemModel, x_hat: np.ndarray, x0: np.ndarray,
                     alpha: float) -> np.ndarray:
    if not 0.0 < alpha < 1.0:
        raise ModelError(f"alpha must lie in (0, 1), got {alpha}")
    if model.B.shape[0] != model.B.shape[1]:
        raise ModelError(f"setpoint control needs square B, got {model.B.shape}")
    x0 = _vector("x0", x0, model.n)
    x_hat = _vector("x_hat", x_hat, model.n)
    return alpha * np.linalg.solve(model.B, x0 - x_hat)


def control_input(model: SystemModel, controller: SetpointController | None,
                  x_hat: np.ndarray) -> np.ndarray:
    """Evaluate the configured controller; None means zero control."""
    if controller is None:
        return np.zeros(model.p)
    return setpoint_control(model, x_hat, controller.x0, controller.alpha)


# ---------------------------------------------------------------------------
# Elementary steps
# ---------------------------------------------------------------------------


def _noise(cov: np.ndarray, stream: RngStream) -> np.ndarray:
    gen = stream.generator()
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ gen.standard_normal(cov.shape[0])


def plant_step(model: SystemModel, x: np.ndarray, u: np.ndarray,
               stream: RngStream) -> np.ndarray:
    """x[t+1] = A x + B u + w, with w drawn from the stream."""
    x = _vector("x", x, model.n)
    u = _vector("u", u, model.p)
    return model.A @ x + model.B @ u + _noise(model.Q, stream)


def observe(model: SystemModel, x: np.ndarray, stream: RngStream) -> np.ndarray:
    """y = C x + v, with v drawn from the stream."""
    x = _vector("x", x, model.n)
    return model.C @ x + _noise(model.R, stream)


def kf_update(model: SystemModel, ss: SteadyState, x_hat: np.ndarray,
              u: np.ndarray, y_f: np.ndarray) -> np.ndarray:
    """One steady-state filter step on the defended measurement y_f."""
    x_hat = _vector("x_hat", x_hat, model.n)
    u = _vector("u", u, model.p)
    y_f = _vector("y_f", y_f, model.m)
    pred = model.A @ x_hat + model.B @ u
    return pred + ss.K @ (y_f - model.C @ pred)


def error_step(model: SystemModel, ss: SteadyState, e: np.ndarray, w: np.ndarray,
               v: np.ndarray, a: np.ndarray, alarm: int,
               delta: np.ndarray) -> np.ndarray:
    """Estimation-error recursion under injection a, alarm indicator and
    mitigation correction delta. Affine in (e, w, v, a, delta); the control
    input does not appear."""
    e = _vector("e", e, model.n)
    w = _vector("w", w, model.n)
    v = _vector("v", v, model.m)
    a = _vector("a", a, model.m)
    delta = _vector("delta", delta, model.m)
    return (ss.A_K @ e + ss.W_K @ w - ss.K @ (a - int(alarm) * delta)
            - ss.K @ v)


@dataclass(frozen=True, eq=False)
class LoopState:
    t: int
    x: np.ndarray
    x_hat: np.ndarray


def closed_loop_step(model: SystemModel, ss: SteadyState, state: LoopState,
                     controller: SetpointController | None, stream: RngStream,
                     measure=None) -> LoopState:
    """Advance plant and filter by one step.

    The defended measurement depends on the new plant state, so the sensor
    pipeline is supplied as a callable `measure(y, t) -> y_f` (identity when
    None) rather than as a precomputed vector. Process noise comes from
    stream.child(0) and measurement noise from stream.child(1).
    """
    u = control_input(model, controller, state.x_hat)
    x_next = plant_step(model, state.x, u, stream.child(0))
    y = observe(model, x_next, stream.child(1))
    y_f = y if measure is None else measure(y, state.t + 1)
    x_hat_next = kf_update(model, ss, state.x_hat, u, y_f)
    return LoopState(t=state.t + 1, x=x_next, x_hat=x_hat_next)
