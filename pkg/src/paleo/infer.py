"""Posterior fitting by stochastic variational inference, plus an MCMC oracle.

The guide is mean-field over an unconstrained vector

    z = [log N_1 .. log N_T, log lam, log a, logit p]

with one normal (location, scale) pair per coordinate, i.e. log-normal
marginals for the positive latents and a logit-normal for p.  Gradients are
pathwise: z = loc + scale * eps with eps ~ N(0, I), and the partial
derivatives of the log joint are written out by hand.

Sign convention: the optimizer *maximizes* the ELBO.  ``adam_step`` moves
parameters along the gradient it is given.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, special

from . import dists
from .dists import MCMC_STREAM, ClampCounter, LogNormalParams, RngState
from .errors import ConfigurationError, ContractError, DivergenceError, NonFiniteGradientError
from .model import RATE_FLOOR, ModelParams, ObservedCounts, PriorSpec, TimeGrid, log_joint

log = logging.getLogger(__name__)

GLOBAL_NAMES = ("loss_rate", "scaling_factor", "sampling_prob")
# an ELBO sample with a -inf joint contributes this instead
JOINT_FLOOR = -1e12
DIVERGENCE_PATIENCE = 100


def latent_names(n_bins: int) -> list[str]:
    return [f"N[{t}]" for t in range(n_bins)] + list(GLOBAL_NAMES)


@dataclass
class GuideState:
    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.loc = np.asarray(self.loc, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if self.loc.shape != self.scale.shape or self.loc.ndim != 1 or self.loc.size < 4:
            raise ContractError("guide needs matching 1-d loc/scale with at least 4 entries")
        if not np.all(self.scale > 0):
            raise ContractError("guide scales must be positive")

    @property
    def dim(self) -> int:
        return self.loc.size

    @property
    def n_bins(self) -> int:
        return self.loc.size - 3

    @property
    def names(self) -> list[str]:
        return latent_names(self.n_bins)

    def to_dict(self) -> dict:
        return {"loc": self.loc.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GuideState":
        return cls(np.asarray(d["loc"], dtype=float), np.asarray(d["scale"], dtype=float))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, dim: int, **hyper) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), 0, **hyper)


@dataclass
class SviConfig:
    iterations: int = 25_000
    learning_rate: float = 1e-3
    mc_samples: int = 8
    seed: int = 0
    elbo_log_stride: int = 10
    init_scale: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("iterations", "mc_samples", "elbo_log_stride"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if not (self.learning_rate > 0 and self.init_scale > 0):
            raise ConfigurationError("learning_rate and init_scale must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")


@dataclass
class McmcConfig:
    # retained draws, counted after burn-in
    n_samples: int = 200_000
    burn_in: int = 20_000
    # initial random-walk std per coordinate of z; a scalar applies to all
    proposal_std: float | list[float] = 0.05
    seed: int = 0
    # tune the proposal covariance during burn-in only, then freeze it
    adapt: bool = True
    thin: int = 1

    def __post_init__(self):
        if not self.n_samples > self.burn_in >= 0:
            raise ConfigurationError("need n_samples > burn_in >= 0")
        if np.any(np.asarray(self.proposal_std, dtype=float) <= 0):
            raise ConfigurationError("proposal stds must be positive")
        if self.thin < 1:
            raise ConfigurationError("thin must be >= 1")


@dataclass
class FitResult:
    guide: GuideState
    elbo_trace: list[tuple[int, float]]
    wall_time: float
    seed: int
    config: dict
    diagnostics: dict = field(default_factory=dict)


@dataclass
class McmcResult:
    samples: np.ndarray  # natural space, one row per retained draw
    log_density: np.ndarray  # log joint at each retained draw
    acceptance_rate: float
    names: list[str]


# --------------------------------------------------------------------------
# unconstrained target


class UnconstrainedTarget:
    """log p(x(z), counts) + log|dx/dz| and its gradient, batched over rows of z.

    ``counts=None`` drops the likelihood (prior-only model).
    """

    def __init__(self, counts: ObservedCounts | None, priors: PriorSpec, grid: TimeGrid, scaling_exponent: float = 1.0):
        n = priors.n_bins
        if grid.n_bins != n:
            raise ContractError(f"grid has {grid.n_bins} bins, priors have {n}")
        if counts is not None and len(counts) != n:
            raise ContractError(f"counts have {len(counts)} bins, priors have {n}")
        self.n_bins = n
        self.dim = n + 3
        self.b = float(scaling_exponent)
        self.elapsed = grid.elapsed
        self.k = None if counts is None else counts.counts.astype(float)
        self.log_k_fact = None if counts is None else special.gammaln(self.k + 1.0)

        self.pop_shape = priors.population_shapes
        self.pop_rate = priors.population_rates
        self.pop_norm = self.pop_shape * np.log(self.pop_rate) - special.gammaln(self.pop_shape)
        lp, sp, bp = priors.loss_prior, priors.scaling_prior, priors.sampling_prior
        self.glob_shape = np.array([lp.shape, sp.shape])
        self.glob_rate = np.array([lp.rate, sp.rate])
        self.glob_norm = self.glob_shape * np.log(self.glob_rate) - special.gammaln(self.glob_shape)
        self.alpha, self.beta = bp.alpha, bp.beta
        self.beta_norm = math.lgamma(bp.alpha + bp.beta) - math.lgamma(bp.alpha) - math.lgamma(bp.beta)

    def to_params(self, z: np.ndarray) -> ModelParams:
        z = np.asarray(z, dtype=float)
        pos = np.exp(np.minimum(z[:-1], dists.MAX_LOG_VALUE))
        p = float(np.clip(special.expit(z[-1]), dists.UNIT_CLAMP, 1 - dists.UNIT_CLAMP))
        return ModelParams(pos[: self.n_bins], float(pos[-2]), float(pos[-1]), p, self.b)

    def __call__(self, z: np.ndarray, counter: ClampCounter | None = None):
        """Return (f, grad) for z of shape (S, dim) or (dim,)."""
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        z2 = np.atleast_2d(z)
        if z2.shape[1] != self.dim:
            raise ContractError(f"expected {self.dim} coordinates, got {z2.shape[1]}")
        n = self.n_bins

        zpos = z2[:, :-1]
        over = zpos > dists.MAX_LOG_VALUE
        if over.any():
            if counter is not None:
                counter.overflow += int(over.sum())
            zpos = np.minimum(zpos, dists.MAX_LOG_VALUE)
        x = np.exp(zpos)
        z_n, n_pop = zpos[:, :n], x[:, :n]
        z_g, x_g = zpos[:, n:], x[:, n:]
        lam, z_a = x_g[:, 0], z_g[:, 1]
        p = np.clip(special.expit(z2[:, -1]), dists.UNIT_CLAMP, 1 - dists.UNIT_CLAMP)
        log_p, log_1mp = np.log(p), np.log1p(-p)

        # priors plus log-Jacobian (z for log transforms, log p(1-p) for logit)
        f = (self.pop_norm + self.pop_shape * z_n - self.pop_rate * n_pop).sum(axis=1)
        f += (self.glob_norm + self.glob_shape * z_g - self.glob_rate * x_g).sum(axis=1)
        f += self.beta_norm + self.alpha * log_p + self.beta * log_1mp

        g = np.empty_like(z2)
        g[:, :n] = self.pop_shape - self.pop_rate * n_pop
        g[:, n : n + 2] = self.glob_shape - self.glob_rate * x_g
        g[:, -1] = self.alpha * (1 - p) - self.beta * p

        if self.k is not None:
            log_mu = self.b * (z_n - z_a[:, None]) - lam[:, None] * self.elapsed + log_p[:, None]
            floored = log_mu < math.log(RATE_FLOOR)
            if floored.any() and counter is not None:
                counter.floored += int(floored.sum())
            log_mu = np.where(floored, math.log(RATE_FLOOR), log_mu)
            mu = np.exp(log_mu)
            f += (self.k * log_mu - mu - self.log_k_fact).sum(axis=1)
            w = np.where(floored, 0.0, self.k - mu)
            g[:, :n] += self.b * w
            g[:, n] += -(w * self.elapsed).sum(axis=1) * lam
            g[:, n + 1] += -self.b * w.sum(axis=1)
            g[:, -1] += w.sum(axis=1) * (1 - p)

        if single:
            return float(f[0]), g[0]
        return f, g


# --------------------------------------------------------------------------
# guide operations


def _guide_lognormal(guide: GuideState, d: int) -> LogNormalParams:
    return LogNormalParams(float(guide.loc[d]), float(guide.scale[d]))


def sample_latents(guide: GuideState, eps: np.ndarray, counter: ClampCounter | None = None) -> ModelParams:
    eps = np.asarray(eps, dtype=float)
    if eps.shape != guide.loc.shape:
        raise ContractError(f"eps has shape {eps.shape}, guide has {guide.loc.shape}")
    n = guide.n_bins
    pos = np.array([dists.transform_positive(eps[d], _guide_lognormal(guide, d), counter) for d in range(n + 2)])
    p = dists.transform_unit_interval(eps[-1], float(guide.loc[-1]), float(guide.scale[-1]))
    return ModelParams(pos[:n], float(pos[n]), float(pos[n + 1]), float(p))


def guide_log_density(guide: GuideState, params: ModelParams) -> float:
    """log q(x) in natural space, via change of variables per coordinate."""
    n = guide.n_bins
    xs = np.concatenate([params.populations, [params.loss_rate, params.scaling_factor]])
    total = 0.0
    for d in range(n + 2):
        total += dists.log_pdf_lognormal(xs[d], _guide_lognormal(guide, d))
    p = params.sampling_prob
    y = dists.logit(p)
    total += dists.log_pdf_standard_normal((y - guide.loc[-1]) / guide.scale[-1]) - math.log(guide.scale[-1] * p * (1 - p))
    return float(total)


def init_guide(priors: PriorSpec, init_scale: float = 0.5) -> GuideState:
    modes = [g.mode for g in priors.population_priors]
    modes += [priors.loss_prior.mode, priors.scaling_prior.mode]
    loc = np.concatenate([np.log(modes), [dists.logit(priors.sampling_prior.mode)]])
    return GuideState(loc, np.full(loc.size, init_scale))


def _draw_eps(rng: RngState, n_samples: int, dim: int) -> np.ndarray:
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    eps, _ = rng.normals((n_samples, dim))
    return eps


def elbo_estimate(
    guide: GuideState,
    counts: ObservedCounts | None,
    priors: PriorSpec,
    grid: TimeGrid,
    n_samples: int,
    rng: RngState,
    counter: ClampCounter | None = None,
) -> float:
    """Monte Carlo ELBO, scored sample by sample through ``model.log_joint``.

    This is the slow reference route; the optimizer uses ``UnconstrainedTarget``.
    """
    eps = _draw_eps(rng, n_samples, guide.dim)
    total = 0.0
    for row in eps:
        params = sample_latents(guide, row, counter)
        lj = log_joint(params, counts, priors, grid)
        if not math.isfinite(lj):
            lj = JOINT_FLOOR
            if counter is not None:
                counter.floored += 1
        total += lj - guide_log_density(guide, params)
    return total / n_samples


def _elbo_terms(target: UnconstrainedTarget, loc, scale, eps, counter=None):
    """Fast ELBO estimate and its gradient w.r.t. (loc, scale)."""
    z = loc + scale * eps
    f, g = target(z, counter)
    bad = ~np.isfinite(f)
    if bad.any():
        f = np.where(bad, JOINT_FLOOR, f)
        g = np.where(bad[:, None], 0.0, g)
        if counter is not None:
            counter.floored += int(bad.sum())
    log_q = -0.5 * (eps * eps).sum(axis=1) - np.log(scale).sum() - 0.5 * dists.LOG_2PI * loc.size
    elbo = float(np.mean(f - log_q))
    grad_loc = g.mean(axis=0)
    grad_scale = (g * eps).mean(axis=0) + 1.0 / scale
    return elbo, grad_loc, grad_scale


def elbo_gradient(
    guide: GuideState,
    counts: ObservedCounts | None,
    priors: PriorSpec,
    grid: TimeGrid,
    n_samples: int,
    rng: RngState,
) -> np.ndarray:
    """Pathwise gradient, laid out as [d/d loc (dim), d/d scale (dim)]."""
    target = UnconstrainedTarget(counts, priors, grid)
    eps = _draw_eps(rng, n_samples, guide.dim)
    _, gl, gs = _elbo_terms(target, guide.loc, guide.scale, eps)
    grad = np.concatenate([gl, gs])
    _raise_if_nonfinite(grad, guide.dim)
    return grad


def _raise_if_nonfinite(grad: np.ndarray, dim: int) -> None:
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NonFiniteGradientError(int(bad[0] % dim))


def adam_step(adam: AdamState, grads: np.ndarray, params: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam ascent step.  Inputs are not modified."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape or grads.shape != adam.m.shape:
        raise ContractError("Adam state, gradient and parameters must have the same shape")
    t = adam.step + 1
    m = adam.beta1 * adam.m + (1 - adam.beta1) * grads
    v = adam.beta2 * adam.v + (1 - adam.beta2) * grads * grads
    m_hat = m / (1 - adam.beta1**t)
    v_hat = v / (1 - adam.beta2**t)
    new_params = params + adam.learning_rate * m_hat / (np.sqrt(v_hat) + adam.eps)
    new_state = AdamState(m, v, t, adam.learning_rate, adam.beta1, adam.beta2, adam.eps)
    return new_state, new_params


def fit_svi(
    counts: ObservedCounts | None,
    priors: PriorSpec,
    grid: TimeGrid,
    config: SviConfig | None = None,
) -> FitResult:
    """Maximize the ELBO with Adam over (loc, log scale).

    Iteration i draws its noise from stream ``RngState(seed, i)``, so a run
    is a pure function of (inputs, config).  ``counts=None`` fits the prior.
    """
    cfg = config or SviConfig()
    target = UnconstrainedTarget(counts, priors, grid)
    guide = init_guide(priors, cfg.init_scale)
    dim = guide.dim
    theta = np.concatenate([guide.loc, np.log(guide.scale)])
    adam = AdamState.zeros(2 * dim, learning_rate=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    counter = ClampCounter()
    trace: list[tuple[int, float]] = []
    bad_run = 0
    skipped = 0
    start = time.perf_counter()

    for i in range(cfg.iterations):
        eps, _ = RngState(cfg.seed, i).normals((cfg.mc_samples, dim))
        # a diverging run produces inf/nan here; it is caught by the check below
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            loc, scale = theta[:dim], np.exp(theta[dim:])
            elbo, gl, gs = _elbo_terms(target, loc, scale, eps, counter)
            grad = np.concatenate([gl, gs * scale])
        if (i + 1) % cfg.elbo_log_stride == 0:
            trace.append((i + 1, elbo))
        if not (math.isfinite(elbo) and elbo > JOINT_FLOOR / 2 and np.all(np.isfinite(grad))):
            bad_run += 1
            skipped += 1
            if bad_run >= DIVERGENCE_PATIENCE:
                raise DivergenceError(
                    f"ELBO non-finite for {bad_run} consecutive iterations",
                    iteration=i + 1,
                    diagnostics={"overflow": counter.overflow, "floored": counter.floored, "last_elbo": elbo},
                )
            continue
        bad_run = 0
        adam, theta = adam_step(adam, grad, theta)

    wall = time.perf_counter() - start
    final = GuideState(theta[:dim].copy(), np.exp(theta[dim:]))
    log.info("fit_svi: %d iterations in %.2fs", cfg.iterations, wall)
    return FitResult(
        guide=final,
        elbo_trace=trace,
        wall_time=wall,
        seed=cfg.seed,
        config=asdict(cfg),
        diagnostics={"overflow": counter.overflow, "floored": counter.floored, "skipped_steps": skipped},
    )


# --------------------------------------------------------------------------
# MCMC oracle


def random_walk_metropolis(
    log_target,
    x0,
    proposal_std,
    n_samples: int,
    burn_in: int,
    rng: RngState,
    adapt: bool = True,
    thin: int = 1,
    chunk: int = 4096,
):
    """Gaussian random-walk Metropolis on R^d.

    ``n_samples`` counts total iterations including ``burn_in``; the retained
    chain has ``(n_samples - burn_in) // thin`` rows.  With ``adapt`` the
    proposal covariance is re-estimated from the burn-in history and frozen
    when burn-in ends, so the retained chain is a fixed Metropolis kernel.

    Returns (chain, log_target values, acceptance rate after burn-in).
    """
    x = np.array(x0, dtype=float)
    d = x.size
    L = np.diag(np.broadcast_to(np.asarray(proposal_std, dtype=float), (d,)).copy())
    lp = float(log_target(x))
    if not math.isfinite(lp):
        raise ContractError("log target is not finite at the starting point")

    target_acc = 0.44 if d == 1 else 0.234
    log_scale = 0.0
    window, window_acc = 500, 0
    history = np.empty((burn_in, d)) if adapt and burn_in else None

    n_keep = (n_samples - burn_in) // thin
    chain = np.empty((n_keep, d))
    lps = np.empty(n_keep)
    accepted_post = 0
    kept = 0
    stream = rng

    i = 0
    while i < n_samples:
        m = min(chunk, n_samples - i)
        normals, stream = stream.normals((m, d))
        uniforms, stream = stream.uniforms(m)
        log_u = np.log(uniforms)
        for j in range(m):
            step = math.exp(log_scale) * (L @ normals[j])
            prop = x + step
            lp_prop = float(log_target(prop))
            accept = lp_prop - lp > log_u[j]
            if accept:
                x, lp = prop, lp_prop
            it = i + j
            if it < burn_in:
                window_acc += accept
                if history is not None:
                    history[it] = x
                if (it + 1) % window == 0:
                    rate = window_acc / window
                    window_acc = 0
                    if adapt:
                        log_scale += rate - target_acc
                        if it + 1 >= 2000:
                            # covariance from the later half of the history so far
                            past = history[(it + 1) // 2 : it + 1]
                            cov = np.cov(past, rowvar=False).reshape(d, d)
                            cov += 1e-12 * np.eye(d) + 1e-8 * np.diag(np.diag(cov))
                            try:
                                L = np.linalg.cholesky(cov) * (2.38 / math.sqrt(d))
                                log_scale = 0.0
                            except np.linalg.LinAlgError:
                                pass
            else:
                accepted_post += accept
                if (it - burn_in) % thin == 0 and kept < n_keep:
                    chain[kept] = x
                    lps[kept] = lp
                    kept += 1
        i += m

    acc = accepted_post / max(n_samples - burn_in, 1)
    return chain[:kept], lps[:kept], acc


def mh_sample(
    counts: ObservedCounts | None,
    priors: PriorSpec,
    grid: TimeGrid,
    config: McmcConfig | None = None,
    x0: ModelParams | None = None,
) -> McmcResult:
    """Random-walk Metropolis over z with the Jacobian-corrected target.

    Meant as a correctness oracle for small grids (about 10 bins or fewer).
    The chain starts at the prior mode unless ``x0`` is given.
    """
    cfg = config or McmcConfig()
    target = UnconstrainedTarget(counts, priors, grid)
    if x0 is None:
        z0 = init_guide(priors).loc
    else:
        z0 = np.concatenate([
            np.log(x0.populations), [math.log(x0.loss_rate), math.log(x0.scaling_factor), dists.logit(x0.sampling_prob)]
        ])

    def log_target(z):
        return target(z)[0]

    with np.errstate(over="ignore"):
        chain, lps, acc = random_walk_metropolis(
            log_target, z0, cfg.proposal_std, cfg.n_samples + cfg.burn_in, cfg.burn_in,
            RngState(cfg.seed, MCMC_STREAM), adapt=cfg.adapt, thin=cfg.thin,
        )
    if not 0.05 <= acc <= 0.7:
        warnings.warn(
            f"MH acceptance rate {acc:.3f} outside [0.05, 0.7]; "
            f"{'decrease' if acc < 0.05 else 'increase'} proposal_std or lengthen burn-in",
            RuntimeWarning,
            stacklevel=2,
        )
    n = target.n_bins
    natural = np.empty_like(chain)
    natural[:, :-1] = np.exp(chain[:, :-1])
    natural[:, -1] = special.expit(chain[:, -1])
    # convert the Jacobian-corrected density back to the natural-space log joint
    log_jac = chain[:, :-1].sum(axis=1) + np.log(natural[:, -1]) + np.log1p(-natural[:, -1])
    return McmcResult(natural, lps - log_jac, acc, latent_names(n))


# --------------------------------------------------------------------------
# point estimates


def logit_normal_mode(location: float, scale: float) -> float:
    """Mode of sigmoid(N(location, scale^2)) on (0, 1).

    Any stationary point y of the density (in logit coordinates) satisfies
    (y - location) / scale^2 = 2 sigmoid(y) - 1, so it lies within scale^2
    of ``location``; a grid scan there followed by a bounded refinement finds
    the global maximum even when the density is bimodal.
    """

    def neg_log_density(y):
        # -log of the normal density in y, plus log p(1-p) from the change of variables
        return 0.5 * ((y - location) / scale) ** 2 - np.logaddexp(0.0, -y) - np.logaddexp(0.0, y)

    half = scale * scale + 1e-9
    ys = np.linspace(location - half, location + half, 2001)
    j = int(np.argmin(neg_log_density(ys)))
    step = ys[1] - ys[0]
    res = optimize.minimize_scalar(
        neg_log_density, bounds=(ys[max(j - 1, 0)] - step, ys[min(j + 1, ys.size - 1)] + step),
        method="bounded", options={"xatol": 1e-12},
    )
    y = res.x if res.fun <= neg_log_density(ys[j]) else ys[j]
    return float(np.clip(special.expit(y), dists.UNIT_CLAMP, 1 - dists.UNIT_CLAMP))


def map_estimate(guide: GuideState) -> ModelParams:
    """Per-coordinate mode of the guide."""
    pos = np.exp(guide.loc[:-1] - guide.scale[:-1] ** 2)
    n = guide.n_bins
    p = logit_normal_mode(float(guide.loc[-1]), float(guide.scale[-1]))
    return ModelParams(pos[:n], float(pos[n]), float(pos[n + 1]), p)
