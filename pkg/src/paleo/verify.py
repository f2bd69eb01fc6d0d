"""Self-contained verification experiments.

Each check builds its own synthetic data, runs the relevant inference path
and compares against an independent reference: finite differences of the
sample-by-sample ELBO, a Metropolis chain, or the known generating truth.
Results carry measured values next to their thresholds.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import SyntheticTruth, simulate_dataset
from .dists import RngState
from .infer import GLOBAL_NAMES, GuideState, McmcConfig, SviConfig, elbo_estimate, elbo_gradient, fit_svi, init_guide, mh_sample
from .model import ModelParams, ObservedCounts, PriorSettings, PriorSpec, TimeGrid, build_priors, prior_mode_curve
from .report import summarize_guide, summarize_samples

log = logging.getLogger(__name__)

# Posterior means reported for the Cyprus survey data; used as synthetic truth.
CYPRUS_LOSS_RATE = 0.00065
CYPRUS_SCALING_FACTOR = 25.78
CYPRUS_SAMPLING_PROB = 0.01


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict
    threshold: dict
    runtime_s: float = 0.0
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: measured={self.measured} threshold={self.threshold}"


@dataclass
class Instance:
    counts: ObservedCounts
    priors: PriorSpec
    grid: TimeGrid
    truth: SyntheticTruth


def five_bin_instance(seed: int = 7) -> Instance:
    """Small problem used by the gradient and MCMC oracle checks.

    Five 1000-year bins from 4000 BCE to 1000 CE, default priors, truth on
    the prior mode curve with lam = 2e-4, a = 50, p = 0.1 (counts ~ 10-150).
    """
    grid = TimeGrid(start_year=-4000, end_year=1000, bin_width=1000, observation_year=2022)
    priors = build_priors(grid)
    truth = SyntheticTruth(ModelParams(prior_mode_curve(grid.midpoints), 2e-4, 50.0, 0.1), seed)
    return Instance(simulate_dataset(truth, grid), priors, grid, truth)


def cyprus_truth(grid: TimeGrid, seed: int, settings: PriorSettings | None = None) -> SyntheticTruth:
    s = settings or PriorSettings()
    pops = np.atleast_1d(prior_mode_curve(grid.midpoints, s.anchor_early, s.anchor_late))
    return SyntheticTruth(ModelParams(pops, CYPRUS_LOSS_RATE, CYPRUS_SCALING_FACTOR, CYPRUS_SAMPLING_PROB), seed)


def truth_vector(params: ModelParams) -> np.ndarray:
    return np.concatenate([params.populations, [params.loss_rate, params.scaling_factor, params.sampling_prob]])


# --------------------------------------------------------------------------


def _perturbed_guides(priors: PriorSpec, n: int, seed: int) -> list[GuideState]:
    base = init_guide(priors)
    rng = RngState(seed).generator()
    out = []
    for _ in range(n):
        out.append(GuideState(base.loc + rng.normal(0, 0.3, base.dim), base.scale * np.exp(rng.normal(0, 0.3, base.dim))))
    return out


def finite_difference_gradient(guide: GuideState, counts, priors, grid, n_samples: int, rng: RngState, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of the reference ELBO with common random numbers."""
    d = guide.dim
    theta = np.concatenate([guide.loc, guide.scale])
    out = np.empty_like(theta)
    for j in range(theta.size):
        h = rel_step * max(1.0, abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        f_up = elbo_estimate(GuideState(up[:d], up[d:]), counts, priors, grid, n_samples, rng)
        f_dn = elbo_estimate(GuideState(dn[:d], dn[d:]), counts, priors, grid, n_samples, rng)
        out[j] = (f_up - f_dn) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - reference) / np.maximum(np.abs(reference), floor)


def gradient_check(instance: Instance | None = None, n_samples: int = 64, n_guides: int = 3, seed: int = 11, threshold: float = 1e-4) -> CheckResult:
    start = time.perf_counter()
    inst = instance or five_bin_instance()
    worst = 0.0
    per_guide = []
    for k, guide in enumerate(_perturbed_guides(inst.priors, n_guides, seed)):
        rng = RngState(seed, k)
        analytic = elbo_gradient(guide, inst.counts, inst.priors, inst.grid, n_samples, rng)
        numeric = finite_difference_gradient(guide, inst.counts, inst.priors, inst.grid, n_samples, rng)
        err = float(relative_error(analytic, numeric).max())
        per_guide.append(err)
        worst = max(worst, err)
    return CheckResult(
        name="gradient_finite_difference",
        passed=worst <= threshold,
        measured={"max_relative_error": worst},
        threshold={"max_relative_error": threshold},
        runtime_s=time.perf_counter() - start,
        details={"per_guide": per_guide, "n_samples": n_samples, "bins": inst.grid.n_bins},
    )


def oracle_check(
    instance: Instance | None = None,
    svi: SviConfig | None = None,
    mcmc: McmcConfig | None = None,
    threshold: float = 0.5,
) -> CheckResult:
    """|SVI mean - MCMC mean| / MCMC std per latent."""
    start = time.perf_counter()
    inst = instance or five_bin_instance()
    svi = svi or SviConfig(seed=1)
    mcmc = mcmc or McmcConfig(seed=2)
    fit = fit_svi(inst.counts, inst.priors, inst.grid, svi)
    chain = mh_sample(inst.counts, inst.priors, inst.grid, mcmc)
    s_vi = summarize_guide(fit.guide, inst.grid)
    s_mc = summarize_samples(chain.samples, chain.log_density, grid=inst.grid)
    z = np.abs(s_vi.mean - s_mc.mean) / s_mc.std
    per_latent = {name: float(v) for name, v in zip(s_vi.names, z)}
    return CheckResult(
        name="svi_vs_mcmc",
        passed=bool(np.all(z <= threshold)) and chain.samples.shape[0] >= 200_000,
        measured={"max_standardized_difference": float(z.max()), "mcmc_samples": int(chain.samples.shape[0])},
        threshold={"max_standardized_difference": threshold, "mcmc_samples": 200_000},
        runtime_s=time.perf_counter() - start,
        details={
            "per_latent": per_latent,
            "svi_mean": s_vi.mean.tolist(),
            "mcmc_mean": s_mc.mean.tolist(),
            "mcmc_std": s_mc.std.tolist(),
            "acceptance_rate": chain.acceptance_rate,
        },
    )


def _fit_replicate(grid, priors, truth, svi: SviConfig):
    counts = simulate_dataset(truth, grid)
    start = time.perf_counter()
    fit = fit_svi(counts, priors, grid, svi)
    return fit, summarize_guide(fit.guide, grid), time.perf_counter() - start


def coverage_check(
    n_replicates: int = 20,
    svi: SviConfig | None = None,
    grid: TimeGrid | None = None,
    settings: PriorSettings | None = None,
    bounds: tuple[float, float] = (0.6, 1.0),
    base_seed: int = 1000,
) -> CheckResult:
    """Fraction of (replicate, latent) pairs whose central 90% guide interval
    contains the generating value."""
    start = time.perf_counter()
    grid = grid or TimeGrid()
    priors = build_priors(grid, settings)
    svi = svi or SviConfig()
    hits = []
    for r in range(n_replicates):
        truth = cyprus_truth(grid, base_seed + r, settings)
        _, s, _ = _fit_replicate(grid, priors, truth, replace(svi, seed=svi.seed + r))
        tv = truth_vector(truth.params)
        hits.append((s.q05 <= tv) & (tv <= s.q95))
    h = np.array(hits)
    frac = float(h.mean())
    lo, hi = bounds
    return CheckResult(
        name="coverage_90",
        passed=lo <= frac <= hi,
        measured={"coverage": frac, "replicates": n_replicates},
        threshold={"min": lo, "max": hi},
        runtime_s=time.perf_counter() - start,
        details={
            "population_coverage": float(h[:, :-3].mean()),
            "global_coverage": {name: float(v) for name, v in zip(GLOBAL_NAMES, h[:, -3:].mean(axis=0))},
        },
    )


def recovery_check(
    seeds=range(10),
    svi: SviConfig | None = None,
    grid: TimeGrid | None = None,
    settings: PriorSettings | None = None,
    factor: float = 3.0,
    min_passing: int = 8,
    max_runtime_s: float = 600.0,
) -> CheckResult:
    """Recovery of the global latents on Cyprus-scale synthetic data.

    A seed passes when, for each of lam, a and p, the posterior mean lies in
    its own 5-95% guide interval and within ``factor`` of the truth.
    """
    start = time.perf_counter()
    grid = grid or TimeGrid()
    priors = build_priors(grid, settings)
    svi = svi or SviConfig()
    rows = []
    passing = 0
    worst_time = 0.0
    fits = []
    for seed in seeds:
        truth = cyprus_truth(grid, seed, settings)
        fit, s, secs = _fit_replicate(grid, priors, truth, replace(svi, seed=seed))
        worst_time = max(worst_time, secs)
        row = {"seed": seed, "runtime_s": secs}
        ok = True
        for name, true in zip(GLOBAL_NAMES, truth_vector(truth.params)[-3:]):
            st = s.latent(name)
            inside = st["q05"] <= st["mean"] <= st["q95"]
            ratio = st["mean"] / true
            close = 1.0 / factor <= ratio <= factor
            row[name] = {"mean": st["mean"], "q05": st["q05"], "q95": st["q95"], "ratio_to_truth": ratio, "in_interval": inside, "within_factor": close}
            ok = ok and inside and close
        row["passed"] = ok
        passing += ok
        rows.append(row)
        fits.append((truth, s))
    result = CheckResult(
        name="cyprus_recovery",
        passed=passing >= min_passing and worst_time <= max_runtime_s,
        measured={"passing_seeds": passing, "seeds": len(rows), "max_fit_runtime_s": worst_time},
        threshold={"passing_seeds": min_passing, "factor": factor, "max_fit_runtime_s": max_runtime_s},
        runtime_s=time.perf_counter() - start,
        details={"per_seed": rows},
    )
    result.fits = fits  # type: ignore[attr-defined]
    return result


def trend_check(summary, n_edge: int = 10) -> CheckResult:
    """Late bins above early bins, and a non-degenerate IQR everywhere."""
    tr = summary.trajectory()
    early = float(np.mean(tr["mean"][:n_edge]))
    late = float(np.mean(tr["mean"][-n_edge:]))
    width = tr["q75"] - tr["q25"]
    return CheckResult(
        name="trajectory_trend",
        passed=late > early and bool(np.all(width > 0)),
        measured={"mean_first_bins": early, "mean_last_bins": late, "min_iqr_width": float(width.min())},
        threshold={"late_minus_early": "> 0", "min_iqr_width": "> 0"},
    )


def run_all(quick: bool = False, coverage_replicates: int = 20, svi: SviConfig | None = None, mcmc: McmcConfig | None = None) -> list[CheckResult]:
    checks = [gradient_check()]
    if quick:
        return checks
    checks.append(oracle_check(svi=svi, mcmc=mcmc))
    checks.append(coverage_check(n_replicates=coverage_replicates, svi=svi))
    return checks


def fmt_results(checks: list[CheckResult]) -> str:
    return "\n".join(c.line() for c in checks)


__all__ = [
    "CheckResult",
    "Instance",
    "coverage_check",
    "cyprus_truth",
    "five_bin_instance",
    "gradient_check",
    "oracle_check",
    "recovery_check",
    "run_all",
    "trend_check",
]
