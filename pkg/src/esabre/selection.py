"""Information criteria and cross-validation for random-effect selection.

The group criterion scores whole replicate groups: with the latent pair
mean integrated out, the observations of one pair are jointly Gaussian with
covariance ``sigma_y2 I + sigma_eps2 11^T``, evaluated through the rank-one
inversion and determinant identities so no per-group matrix is ever
factorised.  The per-observation criterion conditions on the latent means
instead, and the flat criterion is the ordinary one for the single-level
model.  Cross-validation folds partition pairs, never raw observations, so
a pair's latent mean cannot leak between training and test.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeds
from .data import Dataset, Hyperparameters, ModelState
from .sampler import ChainStore, SamplerConfig, run_chains, x_star_w

__all__ = [
    "SelectionScore",
    "REModelSpec",
    "log_group_density",
    "grouped_log_densities",
    "biwaic",
    "nwaic",
    "waic_flat",
    "integrated_cv",
    "select_re_model",
]


@dataclass
class SelectionScore:
    criterion: str
    value: float
    contributions: np.ndarray
    details: dict = field(default_factory=dict)


@dataclass(frozen=True)
class REModelSpec:
    included_factors: tuple[int, ...]
    names: tuple[str, ...] = ()

    @property
    def n_factors(self) -> int:
        return len(self.included_factors)


def _grouped_quadratics(
    s1: np.ndarray,
    s2: np.ndarray,
    counts: np.ndarray,
    sigma_y2: float,
    sigma_eps2: float,
) -> np.ndarray:
    """Joint log density per group from residual sums and sums of squares.

    Covariance ``sigma_y2 I + sigma_eps2 11^T``: the inverse is
    ``I/sigma_y2 - sigma_eps2/(sigma_y2 (sigma_y2 + n sigma_eps2)) 11^T``
    and the determinant ``sigma_y2^(n-1) (sigma_y2 + n sigma_eps2)``.
    """
    tail = sigma_y2 + counts * sigma_eps2
    quad = s2 / sigma_y2 - sigma_eps2 * s1**2 / (sigma_y2 * tail)
    logdet = (counts - 1) * np.log(sigma_y2) + np.log(tail)
    return -0.5 * (counts * np.log(2.0 * np.pi) + logdet + quad)


def log_group_density(
    y_p: np.ndarray,
    theta: ModelState,
    x_p: np.ndarray,
    flat_groups_p: np.ndarray,
    extra_var: np.ndarray | None = None,
) -> float:
    """Log joint density of one pair's replicates given a posterior draw.

    The latent pair mean is integrated out analytically.  ``x_p`` is the
    pair's design row including the intercept entry; ``flat_groups_p`` are
    the flat random-effect indices of the pair's observations.
    ``extra_var`` adds per-observation variance (used when a coefficient is
    integrated out for a group unseen in training).
    """
    y_p = np.asarray(y_p, dtype=float)
    n = y_p.shape[0]
    mean = float(x_p[0] * theta.w0 + x_p[1:] @ theta.w) + theta.b[flat_groups_p].sum(axis=1)
    r = y_p - mean
    if extra_var is None:
        s1 = np.array([r.sum()])
        s2 = np.array([float(r @ r)])
        return float(
            _grouped_quadratics(
                s1, s2, np.array([n]), theta.sigma_y2, theta.sigma_eps2
            )[0]
        )
    d = theta.sigma_y2 + np.asarray(extra_var, dtype=float)
    inv_d = 1.0 / d
    tail = 1.0 + theta.sigma_eps2 * inv_d.sum()
    quad = float(r @ (r * inv_d)) - theta.sigma_eps2 * float(r @ inv_d) ** 2 / tail
    logdet = float(np.sum(np.log(d))) + np.log(tail)
    return float(-0.5 * (n * np.log(2.0 * np.pi) + logdet + quad))


def _pooled_states(chains: list[ChainStore]) -> list[ModelState]:
    states = [s for c in chains for s in c.states]
    if len(states) < 2:
        raise ValueError("criterion needs at least 2 post-burn-in samples")
    return states


def grouped_log_densities(state: ModelState, data: Dataset) -> np.ndarray:
    """Per-pair joint log density under one posterior draw (all pairs)."""
    fit = x_star_w(state, data)[data.obs.pair_id] + data.zb(state.b)
    r = data.obs.y - fit
    s1 = data.pair_sums(r)
    s2 = data.pair_sums(r * r)
    return _grouped_quadratics(s1, s2, data.counts, state.sigma_y2, state.sigma_eps2)


class _WaicAccumulator:
    """Streaming log-mean-exp and unbiased variance per scoring unit."""

    def __init__(self, n_units: int):
        self.n = 0
        self.lse = np.full(n_units, -np.inf)
        self.mean = np.zeros(n_units)
        self.m2 = np.zeros(n_units)

    def add(self, loglik: np.ndarray):
        self.n += 1
        self.lse = np.logaddexp(self.lse, loglik)
        delta = loglik - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (loglik - self.mean)

    def score(self, criterion: str) -> SelectionScore:
        if self.n < 2:
            raise ValueError("criterion needs at least 2 post-burn-in samples")
        lppd = self.lse - np.log(self.n)
        penalty = self.m2 / (self.n - 1)
        contributions = -2.0 * (lppd - penalty)
        return SelectionScore(
            criterion=criterion,
            value=float(contributions.sum()),
            contributions=contributions,
            details={"lppd": float(lppd.sum()), "penalty": float(penalty.sum())},
        )


def biwaic(chains: list[ChainStore], data: Dataset) -> SelectionScore:
    """Group criterion on the pair-level joint predictive (lower is better)."""
    acc = _WaicAccumulator(data.n_pairs)
    for state in _pooled_states(chains):
        acc.add(grouped_log_densities(state, data))
    return acc.score("biwaic")


def nwaic(chains: list[ChainStore], data: Dataset) -> SelectionScore:
    """Per-observation criterion conditioned on the latent pair means."""
    acc = _WaicAccumulator(data.n_obs)
    log2pi = np.log(2.0 * np.pi)
    for state in _pooled_states(chains):
        mean = state.mu_y[data.obs.pair_id] + data.zb(state.b)
        ll = -0.5 * (log2pi + np.log(state.sigma_y2)) - (data.obs.y - mean) ** 2 / (
            2.0 * state.sigma_y2
        )
        acc.add(ll)
    return acc.score("nwaic")


def waic_flat(chains: list[ChainStore], data: Dataset) -> SelectionScore:
    """Ordinary criterion for the single-level model."""
    acc = _WaicAccumulator(data.n_obs)
    log2pi = np.log(2.0 * np.pi)
    for state in _pooled_states(chains):
        mean = x_star_w(state, data)[data.obs.pair_id] + data.zb(state.b)
        ll = -0.5 * (log2pi + np.log(state.sigma_y2)) - (data.obs.y - mean) ** 2 / (
            2.0 * state.sigma_y2
        )
        acc.add(ll)
    return acc.score("waic")


def cv_folds(n_pairs: int, folds: int, seed: int) -> list[np.ndarray]:
    """Deterministic balanced partition of pairs into folds."""
    perm = seeds.stream(seed, seeds.STREAM_CV).permutation(n_pairs)
    return [np.sort(perm[f::folds]) for f in range(folds)]


def _unseen_group_mask(train: Dataset, test: Dataset) -> np.ndarray:
    """Boolean (n_test_obs, K): true where the group never occurs in training."""
    seen = np.zeros(train.layout.n_coefficients, dtype=bool)
    seen[np.unique(train.flat_groups.ravel())] = True
    return ~seen[test.flat_groups]


def integrated_cv(
    data: Dataset,
    hyper: Hyperparameters,
    config: SamplerConfig,
    folds: int = 10,
    criterion_mode: str = "kfold",
) -> SelectionScore:
    """K-fold (or leave-one-pair-out) predictive score, latent means
    integrated out (higher is better).

    Each fold refits on the remaining pairs with a fold-derived seed.  Test
    observations whose random-effect group never occurs in the training
    split are scored with that coefficient integrated out: its factor
    variance inflates the observation's noise term.
    """
    if criterion_mode == "logo":
        folds = data.n_pairs
    elif criterion_mode != "kfold":
        raise ValueError(f"unknown criterion_mode {criterion_mode!r}")
    if folds < 2 or folds > data.n_pairs:
        raise ValueError("folds must lie in [2, n_pairs]")

    assignment = cv_folds(data.n_pairs, folds, config.seed)
    contributions = np.empty(folds)
    for f, test_pairs in enumerate(assignment):
        train_pairs = np.setdiff1d(np.arange(data.n_pairs), test_pairs)
        train = data.subset_pairs(train_pairs)
        test = data.subset_pairs(test_pairs)
        fold_seed = int(
            np.random.SeedSequence(config.seed, spawn_key=(seeds.STREAM_CV, 1 + f))
            .generate_state(1)[0]
        )
        fold_config = replace(config, seed=fold_seed)
        states = _pooled_states(run_chains(train, hyper, fold_config))
        unseen = _unseen_group_mask(train, test)
        totals = np.empty(len(states))
        for i, state in enumerate(states):
            total = 0.0
            for p in range(test.n_pairs):
                rows = np.flatnonzero(test.obs.pair_id == p)
                fg = test.flat_groups[rows]
                mask = unseen[rows]
                bsum = np.where(mask, 0.0, state.b[fg]).sum(axis=1)
                x_p = test.design.x_star[p]
                mean = float(x_p[0] * state.w0 + x_p[1:] @ state.w) + bsum
                extra = (mask * state.sigma_b2[None, :]).sum(axis=1)
                r = test.obs.y[rows] - mean
                d = state.sigma_y2 + extra
                inv_d = 1.0 / d
                tail = 1.0 + state.sigma_eps2 * inv_d.sum()
                quad = float(r @ (r * inv_d)) - state.sigma_eps2 * float(r @ inv_d) ** 2 / tail
                logdet = float(np.sum(np.log(d))) + np.log(tail)
                total += -0.5 * (rows.size * np.log(2.0 * np.pi) + logdet + quad)
            totals[i] = total
        m = totals.max()
        contributions[f] = m + np.log(np.mean(np.exp(totals - m)))
    return SelectionScore(
        criterion="icv",
        value=float(contributions.mean()),
        contributions=contributions,
        details={"folds": folds, "mode": criterion_mode},
    )


_CRITERIA = {"biwaic": biwaic, "nwaic": nwaic, "waic": waic_flat}


def _score_with(criterion, chains, data, hyper, config, folds):
    if criterion == "icv":
        return integrated_cv(data, hyper, config, folds=folds)
    return _CRITERIA[criterion](chains, data)


def select_re_model(
    data: Dataset,
    hyper: Hyperparameters,
    config: SamplerConfig,
    criterion: str = "biwaic",
    folds: int = 10,
):
    """Fit every subset of random-effect factors and pick the best score.

    Returns ``(best_spec, table)`` where the table has one row per subset:
    spec, criterion, value, converged flag, score object.  Non-converged
    fits are reported but excluded from the argmin; ties break toward fewer
    factors.  WAIC-family values are on deviance scale (lower is better),
    the cross-validation value is a mean log predictive (higher is better).
    """
    k = data.layout.n_factors
    if k > 6:
        raise ValueError("exhaustive enumeration supports at most 6 factors")
    table = []
    for index, subset in enumerate(
        itertools.chain.from_iterable(
            itertools.combinations(range(k), r) for r in range(k + 1)
        )
    ):
        sub = data.subset_factors(subset) if subset != tuple(range(k)) else data
        sub_hyper = hyper
        if len(hyper.alpha_b) == k and subset != tuple(range(k)):
            sub_hyper = replace(
                hyper,
                alpha_b=tuple(hyper.alpha_b[i] for i in subset),
                beta_b=tuple(hyper.beta_b[i] for i in subset),
            )
        spec_seed = int(
            np.random.SeedSequence(config.seed, spawn_key=(seeds.STREAM_SELECT, index))
            .generate_state(1)[0]
        )
        spec_config = replace(config, seed=spec_seed)
        chains = run_chains(sub, sub_hyper, spec_config)
        converged = all(c.converged for c in chains)
        score = _score_with(criterion, chains, sub, sub_hyper, spec_config, folds)
        spec = REModelSpec(
            included_factors=subset,
            names=tuple(data.layout.names[i] for i in subset),
        )
        table.append(
            {
                "spec": spec,
                "criterion": criterion,
                "value": score.value,
                "converged": converged,
                "score": score,
            }
        )
    sign = -1.0 if criterion == "icv" else 1.0
    eligible = [row for row in table if row["converged"]] or table
    best = min(eligible, key=lambda row: (sign * row["value"], row["spec"].n_factors))
    return best["spec"], table
