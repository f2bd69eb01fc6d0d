"""Discretized forward model: population -> observed settlement counts.

For each time bin t the expected number of observed settlements is

    mu_t = (N_t / a) ** b * exp(-lam * dt_t) * p

where N_t is the island-wide population, a the persons per settlement, b the
scaling exponent (fixed at 1), lam the per-year loss rate, dt_t the time
between the bin midpoint and the observation year, and p the probability that
a surviving settlement is discovered and recorded.  Observed counts are
Poisson with rate mu_t, independent across bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dists
from .dists import BetaParams, GammaParams
from .errors import ConfigurationError, ContractError, DomainError, InfeasibleParameterizationError

RATE_FLOOR = 1e-12

EARLY_ANCHOR = (-11000.0, 1000.0)
# 1881 census
LATE_ANCHOR = (1881.0, 186173.0)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform calendar-year bins; BCE years are negative."""

    start_year: int = -11000
    end_year: int = 1000
    bin_width: int = 100
    observation_year: int = 2022

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ConfigurationError("bin_width must be positive")
        if self.end_year <= self.start_year:
            raise ConfigurationError("end_year must be after start_year")
        if (self.end_year - self.start_year) % self.bin_width:
            raise ConfigurationError("grid span must be a multiple of bin_width")
        if self.observation_year < self.end_year:
            raise ConfigurationError("observation_year must not precede end_year")

    @property
    def n_bins(self) -> int:
        return (self.end_year - self.start_year) // self.bin_width

    @property
    def bin_starts(self) -> np.ndarray:
        return self.start_year + self.bin_width * np.arange(self.n_bins, dtype=float)

    @property
    def bin_ends(self) -> np.ndarray:
        return self.bin_starts + self.bin_width

    @property
    def midpoints(self) -> np.ndarray:
        return self.bin_starts + 0.5 * self.bin_width

    @property
    def elapsed(self) -> np.ndarray:
        """Years between each bin midpoint and the observation year."""
        return self.observation_year - self.midpoints

    def to_dict(self) -> dict:
        return {
            "start_year": self.start_year,
            "end_year": self.end_year,
            "bin_width": self.bin_width,
            "observation_year": self.observation_year,
        }


@dataclass
class ModelParams:
    """One latent configuration.  Not validated on construction so that
    out-of-support points can be scored (they get -inf)."""

    populations: np.ndarray
    loss_rate: float
    scaling_factor: float
    sampling_prob: float
    scaling_exponent: float = 1.0

    def __post_init__(self):
        self.populations = np.asarray(self.populations, dtype=float)

    @property
    def n_bins(self) -> int:
        return self.populations.shape[0]

    def in_support(self) -> bool:
        return bool(
            np.all(self.populations > 0)
            and self.loss_rate > 0
            and self.scaling_factor > 0
            and self.scaling_exponent > 0
            and 0 < self.sampling_prob < 1
        )

    def to_dict(self) -> dict:
        return {
            "populations": self.populations.tolist(),
            "loss_rate": self.loss_rate,
            "scaling_factor": self.scaling_factor,
            "scaling_exponent": self.scaling_exponent,
            "sampling_prob": self.sampling_prob,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(
            populations=np.asarray(d["populations"], dtype=float),
            loss_rate=float(d["loss_rate"]),
            scaling_factor=float(d["scaling_factor"]),
            sampling_prob=float(d["sampling_prob"]),
            scaling_exponent=float(d.get("scaling_exponent", 1.0)),
        )


@dataclass(frozen=True)
class PriorSpec:
    population_priors: tuple[GammaParams, ...]
    loss_prior: GammaParams
    scaling_prior: GammaParams
    sampling_prior: BetaParams

    @property
    def n_bins(self) -> int:
        return len(self.population_priors)

    @property
    def population_shapes(self) -> np.ndarray:
        return np.array([g.shape for g in self.population_priors], dtype=float)

    @property
    def population_rates(self) -> np.ndarray:
        return np.array([g.rate for g in self.population_priors], dtype=float)


@dataclass
class ObservedCounts:
    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.ndim != 1:
            raise ContractError("counts must be one-dimensional")
        if arr.size and (not np.issubdtype(arr.dtype, np.integer)):
            if not np.all(arr == np.floor(arr)):
                raise ContractError("counts must be integers")
            arr = arr.astype(np.int64)
        if np.any(arr < 0):
            raise ContractError("counts must be non-negative")
        self.counts = arr.astype(np.int64)

    def __len__(self) -> int:
        return self.counts.shape[0]


@dataclass
class PriorSettings:
    """User-facing prior configuration, all in (mode, std) terms."""

    anchor_early: tuple[float, float] = EARLY_ANCHOR
    anchor_late: tuple[float, float] = LATE_ANCHOR
    # population prior std as a multiple of its mode
    population_std_ratio: float = 1.0
    loss_mode: float = 1e-4
    loss_std: float = 1e-4
    scaling_mode: float = 150.0
    scaling_std: float = 150.0
    sampling_mode: float = 0.1
    sampling_std: float = 0.1

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["anchor_early"] = list(self.anchor_early)
        d["anchor_late"] = list(self.anchor_late)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSettings":
        kw = dict(d)
        for key in ("anchor_early", "anchor_late"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown prior settings: {sorted(unknown)}")
        return cls(**kw)


def prior_mode_curve(t, anchor_early=EARLY_ANCHOR, anchor_late=LATE_ANCHOR):
    """Exponential curve through both (year, population) anchors."""
    (t0, p0), (t1, p1) = anchor_early, anchor_late
    if p0 <= 0 or p1 <= 0:
        raise DomainError("anchor populations must be positive")
    if t0 == t1:
        raise DomainError("anchor years must differ")
    r = math.log(p1 / p0) / (t1 - t0)
    out = p0 * np.exp(r * (np.asarray(t, dtype=float) - t0))
    return float(out) if np.ndim(out) == 0 else out


def build_priors(grid: TimeGrid, settings: PriorSettings | None = None) -> PriorSpec:
    s = settings or PriorSettings()
    modes = np.atleast_1d(prior_mode_curve(grid.midpoints, s.anchor_early, s.anchor_late))
    try:
        pops = tuple(dists.gamma_from_mode_std(m, s.population_std_ratio * m) for m in modes)
        loss = dists.gamma_from_mode_std(s.loss_mode, s.loss_std)
        scaling = dists.gamma_from_mode_std(s.scaling_mode, s.scaling_std)
        sampling = dists.beta_from_mode_std(s.sampling_mode, s.sampling_std)
    except (InfeasibleParameterizationError, DomainError) as exc:
        raise ConfigurationError(f"invalid prior settings: {exc}") from exc
    return PriorSpec(pops, loss, scaling, sampling)


def survival_fraction(loss_rate, elapsed):
    """Fraction of deposited settlements surviving ``elapsed`` years."""
    out = np.exp(-np.asarray(loss_rate, dtype=float) * np.asarray(elapsed, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def settlements_deposited(population, scaling_factor, scaling_exponent=1.0):
    out = (np.asarray(population, dtype=float) / scaling_factor) ** scaling_exponent
    return float(out) if np.ndim(out) == 0 else out


def expected_observed(population, scaling_factor, scaling_exponent, loss_rate, elapsed, sampling_prob):
    mu = (
        settlements_deposited(population, scaling_factor, scaling_exponent)
        * survival_fraction(loss_rate, elapsed)
        * sampling_prob
    )
    out = np.maximum(mu, RATE_FLOOR)
    return float(out) if np.ndim(out) == 0 else out


def _check_dims(params: ModelParams, n: int, what: str) -> None:
    if params.n_bins != n:
        raise ContractError(f"{what} has {n} bins but params have {params.n_bins}")


def log_likelihood(params: ModelParams, counts: ObservedCounts, grid: TimeGrid) -> float:
    _check_dims(params, len(counts), "counts")
    _check_dims(params, grid.n_bins, "grid")
    mu = expected_observed(
        params.populations,
        params.scaling_factor,
        params.scaling_exponent,
        params.loss_rate,
        grid.elapsed,
        params.sampling_prob,
    )
    return float(np.sum(dists.log_pmf_poisson(counts.counts, mu)))


def log_prior(params: ModelParams, priors: PriorSpec) -> float:
    _check_dims(params, priors.n_bins, "priors")
    if not params.in_support():
        return -math.inf
    total = 0.0
    for n, g in zip(params.populations, priors.population_priors):
        total += dists.log_pdf_gamma(n, g)
    total += dists.log_pdf_gamma(params.loss_rate, priors.loss_prior)
    total += dists.log_pdf_gamma(params.scaling_factor, priors.scaling_prior)
    total += dists.log_pdf_beta(params.sampling_prob, priors.sampling_prior)
    return float(total)


def log_joint(params: ModelParams, counts: ObservedCounts | None, priors: PriorSpec, grid: TimeGrid) -> float:
    """Unnormalized log posterior.  ``counts=None`` scores the prior alone."""
    lp = log_prior(params, priors)
    if counts is None or lp == -math.inf:
        return lp
    return lp + log_likelihood(params, counts, grid)


def prior_mode_params(priors: PriorSpec) -> ModelParams:
    return ModelParams(
        populations=np.array([g.mode for g in priors.population_priors]),
        loss_rate=priors.loss_prior.mode,
        scaling_factor=priors.scaling_prior.mode,
        sampling_prob=priors.sampling_prior.mode,
    )
