"""MCMC for the latent pair-mean spike-and-slab mixed-effects model.

One sweep updates, in fixed order: the inclusion indicators by block
Metropolis-Hastings on their collapsed marginal, then the inclusion
probability, the model-error variance, the shared coefficient mean and the
regression coefficients from the matching chain of collapsed conditionals,
and finally the latent pair means, random effects and remaining variances
from their standard-form conditionals.

In ``sabre_flat`` mode the fixed-effect block conditions on the de-noised
responses with the single-level likelihood instead of the latent means; the
latent means and replicate-noise variance then degenerate to aliases kept
only so chain records share one schema.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.stats import invgamma

from . import seeds
from .data import DataError, Dataset, Hyperparameters, ModelState
from .evidence import CollapsedContext, collapsed_quadratic, mh_block_update
from .diagnostics import psrf

__all__ = [
    "SamplerConfig",
    "ChainStore",
    "gibbs_sweep",
    "run_chains",
    "initial_state",
    "sample_mu_y",
    "sample_w_star",
    "sample_b",
    "sample_sigma_y2",
    "sample_sigma_eps2",
    "sample_sigma_w2",
    "sample_sigma_b2",
    "sample_mu_w",
    "sample_pi",
]

_INIT_VAR_LO = 1e-6
_INIT_VAR_HI = 1e6


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    max_iterations: int = 4000
    thin: int = 2
    block_size: int = 5
    psrf_threshold: float = 1.1
    psrf_fraction: float = 0.95
    psrf_check_every: int = 250
    seed: int = 0
    mode: str = "esabre"
    flat_evidence_method: str = "woodbury"
    jobs: int = 1

    def __post_init__(self):
        if self.n_chains < 2:
            raise DataError("need at least 2 chains for convergence monitoring")
        if self.psrf_threshold <= 1.0:
            raise DataError("psrf_threshold must exceed 1")
        if not 0.0 < self.psrf_fraction <= 1.0:
            raise DataError("psrf_fraction must lie in (0, 1]")
        if self.thin < 1 or self.block_size < 1:
            raise DataError("thin and block_size must be >= 1")
        if self.mode not in ("esabre", "sabre_flat"):
            raise DataError(f"unknown mode {self.mode!r}")


@dataclass
class ChainStore:
    """Thinned post-burn-in states of one chain."""

    states: list[ModelState]
    iters: list[int]
    burn_in: int
    converged: bool
    seed: int
    chain_index: int
    mode: str
    _stacked: dict | None = field(default=None, repr=False)

    def stacked(self) -> dict[str, np.ndarray]:
        """States as arrays keyed by parameter name (first axis: draw)."""
        if self._stacked is None:
            s = self.states
            self._stacked = {
                "w0": np.array([t.w0 for t in s]),
                "mu_w": np.array([t.mu_w for t in s]),
                "pi": np.array([t.pi for t in s]),
                "sigma_y2": np.array([t.sigma_y2 for t in s]),
                "sigma_eps2": np.array([t.sigma_eps2 for t in s]),
                "sigma_w2": np.array([t.sigma_w2 for t in s]),
                "sigma_b2": np.array([t.sigma_b2 for t in s]),
                "gamma": np.array([t.gamma for t in s], dtype=np.int8),
                "w": np.array([t.w for t in s]),
                "b": np.array([t.b for t in s]),
                "mu_y": np.array([t.mu_y for t in s]),
            }
        return self._stacked


def _draw_invgamma(shape: float, scale: float, rng: np.random.Generator) -> float:
    """Inverse-gamma draw, safe for near-improper shapes.

    Shapes below one half put appreciable mass outside the float64 range;
    those are drawn from the prior truncated to a wide representable
    window via the inverse CDF.  The truncation constant is state-free, so
    conditional-density ratios are unaffected.
    """
    if shape >= 0.5:
        g = rng.gamma(shape)
        if g > 0.0 and np.isfinite(scale / g):
            return float(scale / g)
    return _draw_invgamma_truncated(shape, scale, 1e-100, 1e100, rng)


def _draw_invgamma_truncated(
    shape: float, scale: float, lo: float, hi: float, rng: np.random.Generator
) -> float:
    u_lo = invgamma.cdf(lo, shape, scale=scale)
    u_hi = invgamma.cdf(hi, shape, scale=scale)
    u = rng.uniform(u_lo, u_hi)
    value = float(invgamma.ppf(u, shape, scale=scale))
    return min(max(value, lo), hi)


def _chol_jittered(a: np.ndarray):
    try:
        return cho_factor(a, lower=True)
    except np.linalg.LinAlgError:
        bump = 1e-10 * float(np.mean(np.diag(a)))
        return cho_factor(a + bump * np.eye(a.shape[0]), lower=True)


def x_star_w(state: ModelState, data: Dataset) -> np.ndarray:
    """Fixed-effect fit per pair: intercept plus included columns."""
    return state.w0 + data.design.x @ state.w


def mu_y_conditional(state: ModelState, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (diagonal) variance of the latent pair-mean conditional."""
    v = 1.0 / (1.0 / state.sigma_eps2 + data.counts / state.sigma_y2)
    resid_sums = data.pair_sums(data.obs.y - data.zb(state.b))
    mean = v * (resid_sums / state.sigma_y2 + x_star_w(state, data) / state.sigma_eps2)
    return mean, v


def sample_mu_y(
    state: ModelState, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> np.ndarray:
    """Draw the latent pair means; posterior precision is diagonal, O(P)."""
    mean, v = mu_y_conditional(state, data)
    return mean + np.sqrt(v) * rng.standard_normal(data.n_pairs)


def _w_star_moments(state, data, hyper, target, expand):
    idx = np.flatnonzero(state.gamma)
    r = idx.size
    u = np.empty((data.n_pairs, r + 1))
    u[:, 0] = 1.0
    u[:, 1:] = data.design.x[:, idx]
    if expand is not None:
        u = u[expand]
    prior_prec = np.empty(r + 1)
    prior_prec[0] = 1.0 / hyper.sigma_w02
    prior_prec[1:] = 1.0 / state.sigma_w2
    prior_mean = np.empty(r + 1)
    prior_mean[0] = hyper.mu_w0
    prior_mean[1:] = state.mu_w
    a = u.T @ u
    a[np.diag_indices_from(a)] += prior_prec
    cf = _chol_jittered(a)
    mean = cho_solve(cf, u.T @ target + prior_prec * prior_mean)
    return idx, mean, cf


def w_star_conditional(state, data, hyper, target=None, expand=None):
    """(included indices, mean, covariance) of the coefficient conditional."""
    if target is None:
        target = state.mu_y
    idx, mean, cf = _w_star_moments(state, data, hyper, target, expand)
    cov = state.sigma_eps2 * cho_solve(cf, np.eye(mean.size))
    return idx, mean, cov


def sample_w_star(
    state: ModelState,
    data: Dataset,
    hyper: Hyperparameters,
    rng: np.random.Generator,
    target: np.ndarray | None = None,
    expand: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Draw intercept and included coefficients jointly; excluded stay 0.

    ``target`` defaults to the latent pair means; flat mode passes the
    de-noised responses with the observation->pair expansion.
    """
    if target is None:
        target = state.mu_y
    idx, mean, cf = _w_star_moments(state, data, hyper, target, expand)
    z = rng.standard_normal(mean.size)
    draw = mean + np.sqrt(state.sigma_eps2) * solve_triangular(cf[0].T, z, lower=False)
    w = np.zeros(data.n_variables)
    w[idx] = draw[1:]
    return float(draw[0]), w


def _b_precision(data: Dataset, sigma_b2: np.ndarray, noise_var: float) -> np.ndarray:
    nb = data.layout.n_coefficients
    q = np.zeros((nb, nb))
    prior_prec = np.repeat(1.0 / sigma_b2, data.layout.sizes)
    q[np.diag_indices(nb)] = data.group_counts / noise_var + prior_prec
    k = data.layout.n_factors
    for k1 in range(k):
        for k2 in range(k1 + 1, k):
            i1 = data.flat_groups[:, k1]
            i2 = data.flat_groups[:, k2]
            cross = np.bincount(i1 * nb + i2, minlength=nb * nb).reshape(nb, nb)
            q += (cross + cross.T) / noise_var
    return q


def b_conditional(state, data, resid=None, noise_var=None):
    """(mean, precision matrix) of the joint random-effects conditional."""
    if resid is None:
        resid = data.obs.y - state.mu_y[data.obs.pair_id]
    if noise_var is None:
        noise_var = state.sigma_y2
    rhs = data.zt_dot(resid) / noise_var
    q = _b_precision(data, state.sigma_b2, noise_var)
    return np.linalg.solve(q, rhs) if q.size else rhs, q


def sample_b(
    state: ModelState,
    data: Dataset,
    hyper: Hyperparameters,
    rng: np.random.Generator,
    resid: np.ndarray | None = None,
    noise_var: float | None = None,
) -> np.ndarray:
    """Draw all random-effect coefficients jointly.

    With one factor the posterior precision is diagonal; with several the
    cross-factor co-occurrence blocks are assembled from the index arrays
    and the joint draw uses a Cholesky factor of the full precision.
    """
    if data.layout.n_coefficients == 0:
        return np.empty(0)
    if resid is None:
        resid = data.obs.y - state.mu_y[data.obs.pair_id]
    if noise_var is None:
        noise_var = state.sigma_y2
    rhs = data.zt_dot(resid) / noise_var
    if data.layout.n_factors == 1:
        prior_prec = np.repeat(1.0 / state.sigma_b2, data.layout.sizes)
        prec = data.group_counts / noise_var + prior_prec
        mean = rhs / prec
        return mean + rng.standard_normal(mean.size) / np.sqrt(prec)
    q = _b_precision(data, state.sigma_b2, noise_var)
    cf = _chol_jittered(q)
    mean = cho_solve(cf, rhs)
    z = rng.standard_normal(mean.size)
    return mean + solve_triangular(cf[0].T, z, lower=False)


def sigma_y2_conditional(state: ModelState, data: Dataset, hyper: Hyperparameters):
    e = data.obs.y - state.mu_y[data.obs.pair_id] - data.zb(state.b)
    return 0.5 * data.n_obs + hyper.alpha_y, hyper.beta_y + 0.5 * float(e @ e)


def sample_sigma_y2(
    state: ModelState, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> float:
    return _draw_invgamma(*sigma_y2_conditional(state, data, hyper), rng)


def sigma_w2_conditional(state: ModelState, hyper: Hyperparameters):
    w_inc = state.w[state.gamma != 0]
    dev = w_inc - state.mu_w
    return (
        0.5 * w_inc.size + hyper.alpha_w,
        hyper.beta_w + 0.5 * float(dev @ dev) / state.sigma_eps2,
    )


def sample_sigma_w2(
    state: ModelState, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> float:
    return _draw_invgamma(*sigma_w2_conditional(state, hyper), rng)


def sigma_b2_conditional(state: ModelState, data: Dataset, hyper: Hyperparameters):
    params = []
    offsets = data.layout.offsets
    for k in range(data.layout.n_factors):
        bk = state.b[offsets[k] : offsets[k + 1]]
        params.append(
            (0.5 * bk.size + hyper.alpha_b[k], hyper.beta_b[k] + 0.5 * float(bk @ bk))
        )
    return params


def sample_sigma_b2(
    state: ModelState, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> np.ndarray:
    return np.array(
        [_draw_invgamma(a, b, rng) for a, b in sigma_b2_conditional(state, data, hyper)]
    )


def _w_star_prior_terms(state: ModelState, hyper: Hyperparameters):
    idx = np.flatnonzero(state.gamma)
    w_star = np.concatenate([[state.w0], state.w[idx]])
    prior_mean = np.concatenate([[hyper.mu_w0], np.full(idx.size, state.mu_w)])
    prior_var = np.concatenate([[hyper.sigma_w02], np.full(idx.size, state.sigma_w2)])
    return w_star, prior_mean, prior_var


def sigma_eps2_conditional(state, data, hyper, target=None, expand=None):
    """Standard-form conditional given the coefficients and shared mean."""
    if target is None:
        target = state.mu_y
    fit = x_star_w(state, data)
    if expand is not None:
        fit = fit[expand]
    e = target - fit
    w_star, prior_mean, prior_var = _w_star_prior_terms(state, hyper)
    dev = w_star - prior_mean
    r = float(e @ e) + float(dev @ (dev / prior_var)) + (state.mu_w - hyper.mu0) ** 2 / hyper.sigma02
    shape = 0.5 * (target.shape[0] + w_star.size + 1) + hyper.alpha_eps
    return shape, hyper.beta_eps + 0.5 * r


def sample_sigma_eps2(
    state: ModelState,
    data: Dataset,
    hyper: Hyperparameters,
    rng: np.random.Generator,
    target: np.ndarray | None = None,
    expand: np.ndarray | None = None,
) -> float:
    return _draw_invgamma(*sigma_eps2_conditional(state, data, hyper, target, expand), rng)


def mu_w_conditional(state: ModelState, hyper: Hyperparameters):
    w_inc = state.w[state.gamma != 0]
    v = 1.0 / (1.0 / hyper.sigma02 + w_inc.size / state.sigma_w2)
    mean = v * (float(np.sum(w_inc)) / state.sigma_w2 + hyper.mu0 / hyper.sigma02)
    return mean, state.sigma_eps2 * v


def sample_mu_w(
    state: ModelState, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> float:
    mean, var = mu_w_conditional(state, hyper)
    return float(mean + np.sqrt(var) * rng.standard_normal())


def pi_conditional(state: ModelState, data: Dataset, hyper: Hyperparameters):
    n1 = int(np.sum(state.gamma != 0))
    return hyper.alpha_pi + n1, hyper.beta_pi + data.n_variables - n1


def sample_pi(
    state: ModelState, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> float:
    return float(rng.beta(*pi_conditional(state, data, hyper)))


def collapsed_mu_w_moments(
    ctx: CollapsedContext, gamma: np.ndarray, hyper: Hyperparameters
) -> tuple[float, float]:
    """Posterior (mean, variance/sigma_eps2) of the shared coefficient mean
    with the intercept and included coefficients integrated out."""
    idx = np.flatnonzero(gamma)
    r = idx.size
    rows = ctx.x.shape[0]
    u = np.empty((rows, r + 1))
    u[:, 0] = 1.0
    u[:, 1:] = ctx.x[:, idx]
    xsum = u[:, 1:].sum(axis=1)
    if ctx.expand is not None:
        u = u[ctx.expand]
        xsum = xsum[ctx.expand]
    prior_var = np.empty(r + 1)
    prior_var[0] = hyper.sigma_w02
    prior_var[1:] = ctx.sigma_w2
    a = u.T @ u
    a[np.diag_indices_from(a)] += 1.0 / prior_var
    cf = _chol_jittered(a)

    def d_inv(vec):
        return vec - u @ cho_solve(cf, u.T @ vec)

    d_inv_xsum = d_inv(xsum)
    ones = np.ones(ctx.target.shape[0])
    v = 1.0 / (1.0 / hyper.sigma02 + float(xsum @ d_inv_xsum))
    mean = v * (hyper.mu0 / hyper.sigma02 + float(d_inv_xsum @ (ctx.target - hyper.mu_w0 * ones)))
    return mean, v


def _collapsed_context(state: ModelState, data: Dataset, hyper: Hyperparameters, mode: str):
    if mode == "esabre":
        return CollapsedContext(
            target=state.mu_y, x=data.design.x, hyper=hyper, sigma_w2=state.sigma_w2
        )
    target = data.obs.y - data.zb(state.b)
    return CollapsedContext(
        target=target,
        x=data.design.x,
        hyper=hyper,
        sigma_w2=state.sigma_w2,
        expand=data.obs.pair_id,
    )


def gibbs_sweep(
    state: ModelState,
    data: Dataset,
    hyper: Hyperparameters,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> ModelState:
    """One full MCMC iteration; mutates and returns ``state``."""
    mode = config.mode
    method = config.flat_evidence_method if mode == "sabre_flat" else "woodbury"
    ctx = _collapsed_context(state, data, hyper, mode)
    j = data.n_variables

    # (1) block-MH over a fresh random partition of the indicators.  The
    # proposal rate is the prior-mean inclusion probability: the target has
    # the inclusion probability integrated out, so a state-coupled proposal
    # rate would break invariance of the collapsed update.
    proposal_pi = hyper.alpha_pi / (hyper.alpha_pi + hyper.beta_pi)
    perm = rng.permutation(j)
    log_post = None
    for start in range(0, j, config.block_size):
        block = perm[start : start + config.block_size]
        state.gamma, _, log_post = mh_block_update(
            state.gamma, block, proposal_pi, ctx, rng, current_log_post=log_post, method=method
        )

    # (2) inclusion probability
    state.pi = sample_pi(state, data, hyper, rng)

    # (3) model-error variance with coefficients and shared mean collapsed
    _, quad = collapsed_quadratic(ctx, state.gamma)
    state.sigma_eps2 = _draw_invgamma(
        hyper.alpha_eps + 0.5 * ctx.target.shape[0], hyper.beta_eps + 0.5 * quad, rng
    )

    # (4) shared coefficient mean with coefficients collapsed
    mean, v = collapsed_mu_w_moments(ctx, state.gamma, hyper)
    state.mu_w = float(mean + np.sqrt(state.sigma_eps2 * v) * rng.standard_normal())

    # (5) intercept and included coefficients
    state.w0, state.w = sample_w_star(
        state, data, hyper, rng, target=ctx.target, expand=ctx.expand
    )

    if mode == "esabre":
        # (6)-(10) latent means, random effects, remaining variances
        state.mu_y = sample_mu_y(state, data, hyper, rng)
        state.b = sample_b(state, data, hyper, rng)
        state.sigma_y2 = sample_sigma_y2(state, data, hyper, rng)
        state.sigma_b2 = sample_sigma_b2(state, data, hyper, rng)
        state.sigma_w2 = sample_sigma_w2(state, data, hyper, rng)
    else:
        fit = x_star_w(state, data)
        state.mu_y = fit
        state.b = sample_b(
            state, data, hyper, rng, resid=data.obs.y - fit[data.obs.pair_id],
            noise_var=state.sigma_eps2,
        )
        state.sigma_b2 = sample_sigma_b2(state, data, hyper, rng)
        state.sigma_w2 = sample_sigma_w2(state, data, hyper, rng)
        state.sigma_y2 = state.sigma_eps2
    return state


def initial_state(
    data: Dataset, hyper: Hyperparameters, mode: str, rng: np.random.Generator
) -> ModelState:
    """Overdispersed start: data-anchored location parameters, prior-drawn
    variances (truncated to a floating-point-safe window), fresh indicator
    coin flips per chain."""
    y = data.obs.y
    mu_y = data.pair_sums(y) / data.counts
    gamma = (rng.random(data.n_variables) < 0.5).astype(np.int8)
    sigma_eps2 = _draw_invgamma_truncated(
        hyper.alpha_eps, hyper.beta_eps, _INIT_VAR_LO, _INIT_VAR_HI, rng
    )
    sigma_y2 = _draw_invgamma_truncated(
        hyper.alpha_y, hyper.beta_y, _INIT_VAR_LO, _INIT_VAR_HI, rng
    )
    sigma_w2 = _draw_invgamma_truncated(
        hyper.alpha_w, hyper.beta_w, _INIT_VAR_LO, _INIT_VAR_HI, rng
    )
    sigma_b2 = np.array(
        [
            _draw_invgamma_truncated(a, b, _INIT_VAR_LO, _INIT_VAR_HI, rng)
            for a, b in zip(hyper.alpha_b, hyper.beta_b)
        ]
    )
    mu_w = hyper.mu0
    w = np.zeros(data.n_variables)
    w[gamma != 0] = mu_w + rng.standard_normal(int(np.sum(gamma != 0)))
    state = ModelState(
        mu_y=mu_y,
        w0=float(np.max(y)),
        w=w,
        gamma=gamma,
        mu_w=mu_w,
        sigma_y2=sigma_y2,
        sigma_eps2=sigma_eps2,
        sigma_w2=sigma_w2,
        b=np.zeros(data.layout.n_coefficients),
        sigma_b2=sigma_b2,
        pi=float(rng.beta(hyper.alpha_pi, hyper.beta_pi)),
    )
    if mode == "sabre_flat":
        state.mu_y = x_star_w(state, data)
        state.sigma_y2 = state.sigma_eps2
    return state


def monitor_names(data: Dataset) -> list[str]:
    """Continuous scalars tracked for convergence; indicators are excluded."""
    names = ["w0", "mu_w", "pi", "sigma_y2", "sigma_eps2", "sigma_w2"]
    names += [f"sigma_b2_{k}" for k in range(data.layout.n_factors)]
    names += [f"b_{i}" for i in range(data.layout.n_coefficients)]
    return names


def _monitor_row(state: ModelState, out: np.ndarray):
    k = state.sigma_b2.size
    out[0] = state.w0
    out[1] = state.mu_w
    out[2] = state.pi
    out[3] = state.sigma_y2
    out[4] = state.sigma_eps2
    out[5] = state.sigma_w2
    out[6 : 6 + k] = state.sigma_b2
    out[6 + k :] = state.b


def _run_single_chain(args):
    data, hyper, config, chain_index = args
    rng = seeds.stream(config.seed, seeds.STREAM_CHAIN, chain_index)
    state = initial_state(data, hyper, config.mode, rng)
    n_mon = 6 + data.layout.n_factors + data.layout.n_coefficients
    monitor = np.empty((config.max_iterations, n_mon))
    states: list[ModelState] = []
    iters: list[int] = []
    for t in range(1, config.max_iterations + 1):
        gibbs_sweep(state, data, hyper, config, rng)
        _monitor_row(state, monitor[t - 1])
        if t % config.thin == 0:
            states.append(state.copy())
            iters.append(t)
    return monitor, states, iters


def _burn_in_from_monitors(monitors: list[np.ndarray], config: SamplerConfig):
    """First checkpoint at which enough monitored scalars have converged."""
    max_iter = config.max_iterations
    for t in range(config.psrf_check_every, max_iter + 1, config.psrf_check_every):
        half = t // 2
        if t - half < 4:
            continue
        ok = 0
        n_mon = monitors[0].shape[1]
        for col in range(n_mon):
            traces = [m[half:t, col] for m in monitors]
            if psrf(traces, use_second_half=False) <= config.psrf_threshold:
                ok += 1
        if ok >= config.psrf_fraction * n_mon:
            return t, True
    return max_iter // 2, False


def run_chains(
    data: Dataset, hyper: Hyperparameters, config: SamplerConfig
) -> list[ChainStore]:
    """Run the configured chains and trim each to its post-burn-in samples.

    Chains are independent given the seed, so results are identical however
    they are scheduled; ``config.jobs`` (or ``ESABRE_JOBS``) only changes
    wall time.  Burn-in ends at the first checkpoint where the required
    fraction of monitored scalars falls below the threshold; if that never
    happens the second half is kept and the stores are flagged.
    """
    hyper = hyper.for_factors(data.layout.n_factors)
    jobs = config.jobs
    if jobs <= 0:
        jobs = int(os.environ.get("ESABRE_JOBS", "1"))
    tasks = [(data, hyper, config, c) for c in range(config.n_chains)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, config.n_chains)) as pool:
            results = list(pool.map(_run_single_chain, tasks))
    else:
        results = [_run_single_chain(t) for t in tasks]

    monitors = [r[0] for r in results]
    burn_in, converged = _burn_in_from_monitors(monitors, config)

    stores = []
    for c, (_, states, iters) in enumerate(results):
        keep = [i for i, t in enumerate(iters) if t > burn_in]
        stores.append(
            ChainStore(
                states=[states[i] for i in keep],
                iters=[iters[i] for i in keep],
                burn_in=burn_in,
                converged=converged,
                seed=config.seed,
                chain_index=c,
                mode=config.mode,
            )
        )
    return stores
