"""Shared numerical kernels.

Seeded RNG streams, Gaussian rectangle probabilities, generalized chi-square
tail estimates, and the fixed-point Riccati solver used to derive the
steady-state filter. Everything is deterministic given its inputs; routines
that need randomness take an explicit :class:`RngStream` and never touch
global RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import qmc


class NumericsError(ValueError):
    """Raised for invalid numerical domains or a failed convergence contract."""


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """Named, reproducible source of randomness.

    Two streams with the same (seed, stream, path) produce identical draw
    sequences; distinct ids give statistically independent generators. Child
    streams partition a parent without consuming its state, so concurrent
    consumers can be seeded without coordination.
    """

    seed: int
    stream: int = 0
    path: tuple = ()

    def generator(self) -> np.random.Generator:
        key = (self.stream,) + tuple(self.path)
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def child(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.stream, self.path + (index,))


# ---------------------------------------------------------------------------
# Gaussian specifications and rectangles
# ---------------------------------------------------------------------------


def _check_symmetric(name: str, mat: np.ndarray) -> None:
    scale = 1.0 + float(np.max(np.abs(mat), initial=0.0))
    if np.max(np.abs(mat - mat.T), initial=0.0) > 1e-8 * scale:
        raise NumericsError(f"{name} must be symmetric; max asymmetry "
                            f"{np.max(np.abs(mat - mat.T)):.3e}")


def _check_psd(name: str, mat: np.ndarray) -> None:
    eigs = np.linalg.eigvalsh(mat)
    scale = 1.0 + float(max(eigs[-1], 0.0))
    if eigs[0] < -1e-8 * scale:
        raise NumericsError(f"{name} must be positive semidefinite; "
                            f"min eigenvalue {eigs[0]:.3e}")


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """Mean vector and covariance of a (possibly degenerate) Gaussian."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1:
            raise NumericsError(f"mean must be a vector, got shape {mean.shape}")
        if cov.shape != (mean.size, mean.size):
            raise NumericsError(f"cov shape {cov.shape} does not match mean "
                                f"dimension {mean.size}")
        _check_symmetric("cov", cov)
        _check_psd("cov", cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True, eq=False)
class Rect:
    """Axis-aligned box with possibly infinite faces, lower <= upper."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise NumericsError(f"rect bounds must be equal-length vectors, "
                                f"got {lower.shape} and {upper.shape}")
        if np.any(lower > upper):
            raise NumericsError("rect has lower > upper in some dimension")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size


class RectProbability(NamedTuple):
    value: float
    std_error: float


# ---------------------------------------------------------------------------
# Standard normal CDF and the bivariate rectangle kernel
# ---------------------------------------------------------------------------


def std_normal_cdf(x):
    """Phi(x), elementwise; accepts scalars or arrays, handles +-inf."""
    return ndtr(x)


# Gauss-Legendre half-rules; the node count trades against how sharply the
# integrand peaks as |rho| grows (Drezner & Wesolowsky 1989, Genz's hybrid).
_GL_RULES = {
    6: (np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904]),
        np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970])),
    12: (np.array([0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                   0.2031674267230659, 0.2334925365383547, 0.2491470458134029]),
         np.array([0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                   0.5873179542866171, 0.3678314989981802, 0.1252334085114692])),
    20: (np.array([0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                   0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
                   0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
                   0.1527533871307259]),
         np.array([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                   0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                   0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                   0.07652652113349733])),
}


def _gl_rule(rho: float):
    ar = abs(rho)
    n = 6 if ar < 0.3 else (12 if ar < 0.75 else 20)
    w, x = _GL_RULES[n]
    return np.concatenate([w, w]), np.concatenate([1.0 - x, 1.0 + x])


def _bvn_upper_finite(h: np.ndarray, k: np.ndarray, rho: float) -> np.ndarray:
    """P(X > h, Y > k) for standard bivariate normal, finite h, k arrays."""
    w, x = _gl_rule(rho)
    tp = 2.0 * math.pi
    if abs(rho) < 0.925:
        hk = h * k
        hs = 0.5 * (h * h + k * k)
        asr = 0.5 * math.asin(rho)
        acc = np.zeros_like(h)
        for wi, xi in zip(w, x):
            sn = math.sin(asr * xi)
            acc += wi * np.exp((sn * hk - hs) / (1.0 - sn * sn))
        return acc * asr / tp + ndtr(-h) * ndtr(-k)

    # |rho| close to 1: Genz's tail expansion around the singular direction.
    if rho < 0.0:
        k = -k
    hk = h * k
    bvn = np.zeros_like(h)
    if abs(rho) < 1.0:
        ass = (1.0 - rho) * (1.0 + rho)
        a = math.sqrt(ass)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 80.0
        asr0 = -0.5 * (bs / ass + hk)
        with np.errstate(over="ignore", invalid="ignore"):
            term = a * np.exp(asr0) * (1.0 - c * (bs - ass) * (1.0 - d * bs) / 3.0
                                       + c * d * ass * ass)
            bvn = np.where(asr0 > -100.0, term, 0.0)
            b = np.sqrt(bs)
            sp = math.sqrt(tp) * ndtr(-b / a)
            corr = np.exp(-0.5 * hk) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0)
            bvn = bvn - np.where(hk > -100.0, corr, 0.0)
            a2 = 0.5 * a
            acc = np.zeros_like(h)
            for wi, xi in zip(w, x):
                xs = (a2 * xi) ** 2
                rs = math.sqrt(1.0 - xs)
                asr1 = -0.5 * (bs / xs + hk)
                spi = 1.0 + c * xs * (1.0 + 5.0 * d * xs)
                ep = np.exp(-0.5 * hk * xs / (1.0 + rs) ** 2) / rs
                acc += np.where(asr1 > -100.0, wi * np.exp(asr1) * (spi - ep), 0.0)
            bvn = (a2 * acc - bvn) / tp
    if rho > 0.0:
        return bvn + ndtr(-np.maximum(h, k))
    # rho < 0, k already negated: remaining mass is a one-dimensional band.
    band = np.where(h < 0.0, ndtr(k) - ndtr(h), ndtr(-h) - ndtr(-k))
    return np.where(h >= k, 0.0, band) - bvn


def bvn_upper(h, k, rho: float) -> np.ndarray:
    """P(X > h, Y > k) for a standard bivariate normal with correlation rho.

    h and k broadcast against each other; entries may be +-inf. rho is a
    scalar in [-1, 1].
    """
    if not -1.0 <= rho <= 1.0:
        raise NumericsError(f"correlation {rho} outside [-1, 1]")
    h, k = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(k, dtype=float))
    out = np.empty(h.shape, dtype=float)
    h_flat, k_flat, out_flat = h.ravel(), k.ravel(), out.ravel()

    pos_inf = np.isposinf(h_flat) | np.isposinf(k_flat)
    h_ninf = np.isneginf(h_flat)
    k_ninf = np.isneginf(k_flat)
    out_flat[pos_inf] = 0.0
    out_flat[h_ninf & k_ninf] = 1.0
    only_h = h_ninf & ~k_ninf & ~pos_inf
    only_k = k_ninf & ~h_ninf & ~pos_inf
    out_flat[only_h] = ndtr(-k_flat[only_h])
    out_flat[only_k] = ndtr(-h_flat[only_k])

    finite = ~(pos_inf | h_ninf | k_ninf)
    if np.any(finite):
        out_flat[finite] = _bvn_upper_finite(h_flat[finite], k_flat[finite], rho)
    np.clip(out_flat, 0.0, 1.0, out=out_flat)
    return out if out.ndim else float(out)


def bvn_cdf(h, k, rho: float):
    """P(X <= h, Y <= k) for a standard bivariate normal, vectorized."""
    return bvn_upper(np.negative(h), np.negative(k), rho)


def bvn_rect(xl, xu, yl, yu, rho: float):
    """P(xl <= X <= xu, yl <= Y <= yu), standardized margins, vectorized."""
    p = (bvn_upper(xl, yl, rho) - bvn_upper(xu, yl, rho)
         - bvn_upper(xl, yu, rho) + bvn_upper(xu, yu, rho))
    return np.clip(p, 0.0, 1.0)


# ---------------------------------------------------------------------------
# General rectangle probabilities
# ---------------------------------------------------------------------------


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Symmetric-eigendecomposition factor L with L L' = cov (PSD safe)."""
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def _qmc_rect_prob(gauss: GaussianSpec, rect: Rect, stream: RngStream,
                   samples: int) -> RectProbability:
    gen = stream.generator()
    L = psd_factor(gauss.cov)
    replicates = 16
    m = max(6, int(math.log2(max(2, samples // replicates))))
    means = np.empty(replicates)
    for rep in range(replicates):
        sob = qmc.Sobol(gauss.dim, scramble=True, seed=gen)
        u = sob.random_base2(m)
        z = ndtri(np.clip(u, 1e-15, 1.0 - 1e-15))
        pts = gauss.mean + z @ L.T
        inside = np.all((pts >= rect.lower) & (pts <= rect.upper), axis=1)
        means[rep] = inside.mean()
    value = float(means.mean())
    std_error = float(means.std(ddof=1) / math.sqrt(replicates))
    return RectProbability(value, std_error)


def mvn_rect_prob(gauss: GaussianSpec, rect: Rect, stream: RngStream | None = None,
                  samples: int = 2 ** 17) -> RectProbability:
    """Probability that a Gaussian vector lands in an axis-aligned box.

    Dimensions 1 and 2 are computed deterministically (normal CDF and the
    Gauss-Legendre bivariate kernel; std_error is reported as 0.0). Higher
    dimensions use scrambled-Sobol sampling on `stream` and report the
    replicate std-error. Zero-variance dimensions collapse to point masses.
    """
    if rect.dim != gauss.dim:
        raise NumericsError(f"rect dimension {rect.dim} does not match "
                            f"Gaussian dimension {gauss.dim}")
    var = np.diag(gauss.cov).copy()
    degenerate = var <= 0.0
    if np.any(degenerate):
        mu = gauss.mean[degenerate]
        if np.any((mu < rect.lower[degenerate]) | (mu > rect.upper[degenerate])):
            return RectProbability(0.0, 0.0)
        live = ~degenerate
        if not np.any(live):
            return RectProbability(1.0, 0.0)
        gauss = GaussianSpec(gauss.mean[live], gauss.cov[np.ix_(live, live)])
        rect = Rect(rect.lower[live], rect.upper[live])

    d = gauss.dim
    if d == 1:
        sd = math.sqrt(gauss.cov[0, 0])
        zl = (rect.lower[0] - gauss.mean[0]) / sd
        zu = (rect.upper[0] - gauss.mean[0]) / sd
        return RectProbability(float(max(0.0, ndtr(zu) - ndtr(zl))), 0.0)
    if d == 2:
        s0, s1 = math.sqrt(gauss.cov[0, 0]), math.sqrt(gauss.cov[1, 1])
        rho = gauss.cov[0, 1] / (s0 * s1)
        rho = min(1.0, max(-1.0, rho))
        p = bvn_rect((rect.lower[0] - gauss.mean[0]) / s0,
                     (rect.upper[0] - gauss.mean[0]) / s0,
                     (rect.lower[1] - gauss.mean[1]) / s1,
                     (rect.upper[1] - gauss.mean[1]) / s1, rho)
        return RectProbability(float(p), 0.0)
    if stream is None:
        raise NumericsError("mvn_rect_prob needs an RngStream for dimension >= 3")
    return _qmc_rect_prob(gauss, rect, stream, samples)


# ---------------------------------------------------------------------------
# Generalized chi-square tail
# ---------------------------------------------------------------------------


def gchi2_tail_prob(gauss: GaussianSpec, weight: np.ndarray, threshold: float,
                    stream: RngStream, samples: int = 100_000) -> tuple[float, float]:
    """P(x' W x > threshold) for x ~ gauss, by seeded Monte Carlo.

    Returns (estimate, std_error). `weight` must be symmetric positive
    definite. threshold = +inf gives probability 0 exactly.
    """
    weight = np.atleast_2d(np.asarray(weight, dtype=float))
    if weight.shape != (gauss.dim, gauss.dim):
        raise NumericsError(f"weight shape {weight.shape} does not match "
                            f"dimension {gauss.dim}")
    _check_symmetric("weight", weight)
    try:
        np.linalg.cholesky(weight)
    except np.linalg.LinAlgError as err:
        raise NumericsError("weight matrix is not positive definite") from err
    if samples < 2:
        raise NumericsError("gchi2_tail_prob needs at least 2 samples")
    if math.isinf(threshold) and threshold > 0:
        return 0.0, 0.0
    x = sample_gaussian(gauss, stream, size=samples)
    q = np.einsum("ij,jk,ik->i", x, weight, x)
    hits = q > threshold
    p = float(hits.mean())
    std_error = math.sqrt(p * (1.0 - p) / samples)
    return p, std_error


# ---------------------------------------------------------------------------
# Riccati fixed point
# ---------------------------------------------------------------------------


def _riccati_map(A, C, Q, R, P):
    S = C @ P @ C.T + R
    APC = A @ P @ C.T
    P_next = A @ P @ A.T + Q - APC @ np.linalg.solve(S, APC.T)
    return 0.5 * (P_next + P_next.T)


def solve_dare(A: np.ndarray, C: np.ndarray, Q: np.ndarray, R: np.ndarray,
               rtol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Steady-state prediction covariance of the Kalman filter.

    Iterates P <- A P A' + Q - A P C'(C P C' + R)^-1 C P A' from P0 = Q until
    the step size falls below rtol * max(1, ||P||_inf), then verifies the
    fixed-point residual against 1e-10 * max(1, ||P||_inf).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    m = C.shape[0]
    if A.shape != (n, n) or C.shape != (m, n) or Q.shape != (n, n) or R.shape != (m, m):
        raise NumericsError(f"inconsistent shapes: A{A.shape} C{C.shape} "
                            f"Q{Q.shape} R{R.shape}")
    _check_symmetric("Q", Q)
    _check_psd("Q", Q)
    _check_symmetric("R", R)
    if np.linalg.eigvalsh(R)[0] <= 0.0:
        raise NumericsError("R must be positive definite")

    P = Q.copy()
    step = math.inf
    for iteration in range(1, max_iter + 1):
        P_next = _riccati_map(A, C, Q, R, P)
        step = float(np.max(np.abs(P_next - P)))
        P = P_next
        if step <= rtol * max(1.0, float(np.max(np.abs(P)))):
            break
    else:
        raise NumericsError(f"Riccati iteration hit the cap ({max_iter}); "
                            f"last step {step:.3e}")
    residual = float(np.max(np.abs(P - _riccati_map(A, C, Q, R, P))))
    bound = 1e-10 * max(1.0, float(np.max(np.abs(P))))
    if residual > bound:
        raise NumericsError(f"Riccati residual {residual:.3e} exceeds bound "
                            f"{bound:.3e} after {iteration} iterations")
    return P


# ---------------------------------------------------------------------------
# Gaussian sampling
# ---------------------------------------------------------------------------


def sample_gaussian(gauss: GaussianSpec, stream: RngStream,
                    size: int | None = None) -> np.ndarray:
    """Draw from gauss on the given stream; shape (d,) or (size, d).

    Degenerate covariances are handled through the PSD eigen-factorization,
    so a zero-covariance spec returns the mean exactly.
    """
    gen = stream.generator()
    L = psd_factor(gauss.cov)
    if size is None:
        z = gen.standard_normal(gauss.dim)
        return gauss.mean + L @ z
    z = gen.standard_normal((size, gauss.dim))
    return gauss.mean + z @ L.T
