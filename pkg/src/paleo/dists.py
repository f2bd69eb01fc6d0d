"""Probability distribution kernel.

Log-densities for the prior and guide families, the mode/std conversions used
to state priors, reparameterizing transforms, and a counter-based normal
generator.  Functions accept scalars or numpy arrays and broadcast.

Priors are specified by (mode, std).  Conversions use moment matching: the
mode of the distribution equals ``mode`` and its standard deviation equals
``std``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .errors import DomainError, InfeasibleParameterizationError

LOG_2PI = math.log(2.0 * math.pi)

# exp(700) ~ 1e304; larger log-values are clamped to keep products finite.
MAX_LOG_VALUE = 700.0
UNIT_CLAMP = 1e-12

# Counter offsets that keep the streams of different consumers of one seed
# disjoint: SVI iteration i uses counter i, simulation and MCMC start high.
SIMULATION_STREAM = 1 << 63
MCMC_STREAM = 1 << 62

BETA_BRACKET = (1e-6, 1e6)
BETA_XTOL = 1e-12


@dataclass(frozen=True)
class GammaParams:
    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0) or not math.isfinite(self.shape * self.rate):
            raise DomainError(f"gamma needs shape > 0 and rate > 0, got {self.shape}, {self.rate}")

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    @property
    def std(self) -> float:
        return math.sqrt(self.shape) / self.rate

    @property
    def mode(self) -> float:
        return max(self.shape - 1.0, 0.0) / self.rate


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0) or not math.isfinite(self.alpha + self.beta):
            raise DomainError(f"beta needs alpha > 0 and beta > 0, got {self.alpha}, {self.beta}")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def std(self) -> float:
        return math.sqrt(_beta_variance(self.alpha, self.beta))

    @property
    def mode(self) -> float:
        """Interior mode; only meaningful for alpha, beta > 1."""
        return (self.alpha - 1.0) / (self.alpha + self.beta - 2.0)


@dataclass(frozen=True)
class LogNormalParams:
    location: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise DomainError(f"log-normal scale must be positive, got {self.scale}")

    @property
    def mode(self) -> float:
        return math.exp(self.location - self.scale**2)

    @property
    def mean(self) -> float:
        return math.exp(self.location + 0.5 * self.scale**2)


@dataclass
class ClampCounter:
    """Caller-owned tally of numerical clamps (overflow, floored densities)."""

    overflow: int = 0
    floored: int = 0


def _check_finite_positive(name: str, value: float) -> None:
    if not (math.isfinite(value) and value > 0):
        raise DomainError(f"{name} must be finite and positive, got {value!r}")


# --------------------------------------------------------------------------
# special functions


def log_gamma_fn(x):
    """ln Gamma(x) for x > 0.  Backed by ``scipy.special.gammaln``."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError("log_gamma_fn requires finite x > 0")
    out = special.gammaln(arr)
    return float(out) if out.ndim == 0 else out


def normal_quantile(q):
    return special.ndtri(q)


def sigmoid(z):
    return special.expit(z)


def logit(p):
    return special.logit(p)


# --------------------------------------------------------------------------
# mode/std conversions


def gamma_from_mode_std(mode: float, std: float) -> GammaParams:
    """Gamma with the given mode and standard deviation.

    Solves (shape - 1)/rate = mode and shape/rate**2 = std**2.  Substituting
    shape = 1 + mode*rate gives std**2 rate**2 - mode*rate - 1 = 0, whose
    positive root is taken.  The result always has shape > 1.
    """
    _check_finite_positive("mode", mode)
    _check_finite_positive("std", std)
    # Divide through by std to avoid overflow of std**2 for extreme inputs.
    ratio = mode / std
    rate = (ratio + math.sqrt(ratio * ratio + 4.0)) / (2.0 * std)
    shape = 1.0 + mode * rate
    return GammaParams(shape=shape, rate=rate)


def _beta_variance(alpha: float, beta: float) -> float:
    total = alpha + beta
    return alpha * beta / (total * total * (total + 1.0))


def beta_from_mode_std(mode: float, std: float) -> BetaParams:
    """Beta with an interior mode and the given standard deviation.

    With c = alpha + beta - 2 and alpha = 1 + mode*c the mode is matched for
    any c > 0; the variance is strictly decreasing in c, so the std equation
    is solved by bracketed root finding on c.
    """
    if not (0.0 < mode < 1.0):
        raise DomainError(f"beta mode must lie in (0, 1), got {mode!r}")
    _check_finite_positive("std", std)
    target = std * std

    def excess(c: float) -> float:
        return _beta_variance(1.0 + mode * c, 1.0 + (1.0 - mode) * c) - target

    lo, hi = BETA_BRACKET
    if excess(lo) < 0.0 or excess(hi) > 0.0:
        raise InfeasibleParameterizationError(
            f"no beta with alpha, beta > 1 has mode {mode} and std {std}"
        )
    c = optimize.brentq(excess, lo, hi, xtol=BETA_XTOL, rtol=4 * np.finfo(float).eps, maxiter=500)
    return BetaParams(alpha=1.0 + mode * c, beta=1.0 + (1.0 - mode) * c)


# --------------------------------------------------------------------------
# log densities


def _scalar_or_array(out):
    return float(out) if np.ndim(out) == 0 else out


def log_pdf_gamma(x, params: GammaParams):
    x = np.asarray(x, dtype=float)
    a, b = params.shape, params.rate
    norm = a * math.log(b) - math.lgamma(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x > 0, norm + (a - 1.0) * np.log(np.where(x > 0, x, 1.0)) - b * x, -np.inf)
    return _scalar_or_array(out)


def log_pdf_beta(x, params: BetaParams):
    x = np.asarray(x, dtype=float)
    a, b = params.alpha, params.beta
    log_b = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    inside = (x > 0) & (x < 1)
    xs = np.where(inside, x, 0.5)
    out = np.where(inside, (a - 1.0) * np.log(xs) + (b - 1.0) * np.log1p(-xs) - log_b, -np.inf)
    return _scalar_or_array(out)


def log_pmf_poisson(k, rate):
    k = np.asarray(k)
    if np.any(k < 0):
        raise DomainError("Poisson count must be non-negative")
    rate = np.asarray(rate, dtype=float)
    out = special.xlogy(k, rate) - rate - special.gammaln(k + 1.0)
    return _scalar_or_array(out)


def log_pdf_lognormal(x, params: LogNormalParams):
    x = np.asarray(x, dtype=float)
    mu, s = params.location, params.scale
    with np.errstate(divide="ignore"):
        lx = np.log(np.where(x > 0, x, 1.0))
    z = (lx - mu) / s
    out = np.where(x > 0, -lx - math.log(s) - 0.5 * LOG_2PI - 0.5 * z * z, -np.inf)
    return _scalar_or_array(out)


def log_pdf_standard_normal(eps):
    eps = np.asarray(eps, dtype=float)
    return _scalar_or_array(-0.5 * LOG_2PI - 0.5 * eps * eps)


# --------------------------------------------------------------------------
# random numbers


@dataclass(frozen=True)
class RngState:
    """Position in a counter-based random stream.

    Every (seed, counter) pair names an independent Philox stream; drawing
    from a state never mutates it and returns the successor state.  Parallel
    consumers can take ``rng.advance(k)`` for disjoint streams.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.counter < 2**64):
            raise DomainError("seed and counter must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed | (self.counter << 64)))

    def advance(self, n: int = 1) -> "RngState":
        return RngState(self.seed, (self.counter + n) % 2**64)

    def normals(self, shape) -> tuple[np.ndarray, "RngState"]:
        return self.generator().standard_normal(shape), self.advance()

    def uniforms(self, shape) -> tuple[np.ndarray, "RngState"]:
        return self.generator().random(shape), self.advance()


def sample_standard_normal(rng: RngState) -> tuple[float, RngState]:
    draws, nxt = rng.normals(1)
    return float(draws[0]), nxt


# --------------------------------------------------------------------------
# reparameterizing transforms


def transform_positive(eps, params: LogNormalParams, counter: ClampCounter | None = None):
    """x = exp(location + scale*eps), clamped at exp(MAX_LOG_VALUE)."""
    z = params.location + params.scale * np.asarray(eps, dtype=float)
    over = z > MAX_LOG_VALUE
    if np.any(over):
        if counter is not None:
            counter.overflow += int(np.count_nonzero(over))
        z = np.minimum(z, MAX_LOG_VALUE)
    return _scalar_or_array(np.exp(z))


def transform_unit_interval(eps, location: float, scale: float):
    if not scale > 0:
        raise DomainError("scale must be positive")
    z = location + scale * np.asarray(eps, dtype=float)
    return _scalar_or_array(np.clip(special.expit(z), UNIT_CLAMP, 1.0 - UNIT_CLAMP))
