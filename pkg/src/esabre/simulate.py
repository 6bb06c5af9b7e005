"""Synthetic dataset generators with attached ground truth.

All generators share the pairwise structure of the assay data: strains are
tested against one another (and against themselves), every pair gets one
latent mean, and replicate measurements scatter around it.  Self-pairs have
all-zero fixed-effect rows, so their expected latent mean is the intercept.
Candidate columns are Bernoulli(0.5) indicators per pair.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import seeds
from .data import Dataset, ObservationTable, PairDesign, RandomEffectsLayout, Truth

__all__ = [
    "ScenarioSpec",
    "SD_SCENARIOS",
    "generate_basic",
    "generate_selection_suite",
    "generate_fmdv_like",
    "generate_mismatch",
]

INTERCEPT = 10.0  # order of magnitude of a high log2 titre


@dataclass(frozen=True)
class ScenarioSpec:
    n_strains: int = 10
    n_obs: int = 2000
    n_variables: int = 50
    n_factors: int = 4
    re_inclusion_prob: float = 0.5
    re_var_range: tuple[float, float] = (0.2, 0.5)
    w_range: tuple[float, float] = (-0.4, -0.2)
    pi_range: tuple[float, float] = (0.2, 0.4)
    sigma_y2: float = 0.033
    sigma_eps2: float = 0.033
    seed: int = 0
    generic_group_size: int | None = None
    factor_names: tuple[str, ...] = ()

    @property
    def n_pairs(self) -> int:
        n = self.n_strains
        return n * (n - 1) // 2 + n

    def __post_init__(self):
        if self.n_obs < self.n_pairs:
            raise ValueError("n_obs must be at least the number of pairs")
        if self.n_factors < 2:
            raise ValueError("need at least the reference and test factors")


SD_SCENARIOS = {
    "sd1": ScenarioSpec(sigma_y2=0.033, sigma_eps2=0.033),
    "sd2": ScenarioSpec(sigma_y2=0.1, sigma_eps2=0.1),
    "sd3": ScenarioSpec(sigma_y2=0.3, sigma_eps2=0.3),
}


def _pair_table(n_strains: int) -> np.ndarray:
    """All unordered strain pairs including self-pairs, lexicographic."""
    return np.array(
        [(i, j) for i in range(n_strains) for j in range(i, n_strains)], dtype=np.int64
    )


def _assign_pairs(n_obs: int, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """Each pair gets one observation, the rest land uniformly; shuffled."""
    assign = np.concatenate(
        [np.arange(n_pairs, dtype=np.int64), rng.integers(0, n_pairs, n_obs - n_pairs)]
    )
    rng.shuffle(assign)
    return assign


def _dense_uniform_groups(n_obs: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform group assignment, redrawn until every group is used."""
    for _ in range(200):
        g = rng.integers(0, size, n_obs)
        if np.unique(g).size == size:
            return g
    raise RuntimeError(f"could not cover {size} groups with {n_obs} observations")


def _factor_names(spec: ScenarioSpec) -> tuple[str, ...]:
    if spec.factor_names:
        if len(spec.factor_names) != spec.n_factors:
            raise ValueError("factor_names length must match n_factors")
        return spec.factor_names
    names = ["reference", "test"]
    names += [f"factor_{k}" for k in range(2, spec.n_factors)]
    return tuple(names)


def _draw_design(
    pairs: np.ndarray, n_variables: int, rng: np.random.Generator
) -> np.ndarray:
    p = pairs.shape[0]
    x = (rng.random((p, n_variables)) < 0.5).astype(float)
    x[pairs[:, 0] == pairs[:, 1]] = 0.0  # a strain differs from itself nowhere
    return np.column_stack([np.ones(p), x])


def _draw_fixed_effects(spec, rng):
    pi = rng.uniform(*spec.pi_range)
    gamma = (rng.random(spec.n_variables) < pi).astype(np.int8)
    w = np.where(gamma == 1, rng.uniform(*spec.w_range, spec.n_variables), 0.0)
    return pi, gamma, w


def _build_dataset(spec, rng, w_values=None) -> Dataset:
    pairs = _pair_table(spec.n_strains)
    p = pairs.shape[0]
    x_star = _draw_design(pairs, spec.n_variables, rng)
    pi, gamma, w = _draw_fixed_effects(spec, rng)
    if w_values is not None:
        w = np.where(gamma == 1, w_values, 0.0)

    pair_of_obs = _assign_pairs(spec.n_obs, p, rng)

    names = _factor_names(spec)
    size_generic = spec.generic_group_size or spec.n_strains
    sizes = [spec.n_strains, spec.n_strains] + [size_generic] * (spec.n_factors - 2)
    layout = RandomEffectsLayout(sizes=tuple(sizes), names=names)

    groups = np.empty((spec.n_obs, spec.n_factors), dtype=np.int64)
    groups[:, 0] = pairs[pair_of_obs, 0]
    groups[:, 1] = pairs[pair_of_obs, 1]
    for k in range(2, spec.n_factors):
        groups[:, k] = _dense_uniform_groups(spec.n_obs, sizes[k], rng)

    included = rng.random(spec.n_factors) < spec.re_inclusion_prob
    variances = np.where(included, rng.uniform(*spec.re_var_range, spec.n_factors), 0.0)
    b = np.concatenate(
        [
            rng.normal(0.0, np.sqrt(variances[k]), sizes[k]) if included[k] else np.zeros(sizes[k])
            for k in range(spec.n_factors)
        ]
    )
    offsets = layout.offsets

    mu_y = INTERCEPT + x_star[:, 1:] @ w + rng.normal(0.0, np.sqrt(spec.sigma_eps2), p)
    zb = np.zeros(spec.n_obs)
    for k in range(spec.n_factors):
        zb += b[offsets[k] + groups[:, k]]
    y = mu_y[pair_of_obs] + zb + rng.normal(0.0, np.sqrt(spec.sigma_y2), spec.n_obs)

    obs = ObservationTable(
        obs_id=np.arange(spec.n_obs, dtype=np.int64),
        y=y,
        pair_id=pair_of_obs,
        groups=groups,
    )
    truth = Truth(
        gamma=gamma,
        re_included={names[k]: bool(included[k]) for k in range(spec.n_factors)},
    )
    return Dataset(obs, PairDesign(x_star), layout, truth=truth)


def generate_basic(spec: ScenarioSpec) -> Dataset:
    """Pairwise dataset with spike-and-slab fixed effects and optional
    random-effect factors, ground truth attached."""
    rng = seeds.stream(spec.seed, seeds.STREAM_SIMULATE)
    return _build_dataset(spec, rng)


def generate_selection_suite(
    n_strains: int,
    sigma_eps2: float,
    replicates: int = 20,
    seed: int = 0,
    n_obs: int = 2000,
) -> list[Dataset]:
    """Replicate datasets for the random-effect selection study.

    Four candidate factors (test and reference strain plus two generic),
    each present with probability one half; 50 candidate fixed effects.
    """
    if n_strains not in (10, 30, 45):
        raise ValueError("n_strains must be one of 10, 30, 45")
    if sigma_eps2 not in (0.1, 0.3, 0.5):
        raise ValueError("sigma_eps2 must be one of 0.1, 0.3, 0.5")
    out = []
    for rep in range(replicates):
        spec = ScenarioSpec(
            n_strains=n_strains,
            n_obs=n_obs,
            n_variables=50,
            n_factors=4,
            sigma_y2=sigma_eps2,
            sigma_eps2=sigma_eps2,
            seed=seed,
            factor_names=("test", "reference", "factor_2", "factor_3"),
        )
        rng = seeds.stream(seed, seeds.STREAM_SIMULATE, n_strains, round(sigma_eps2 * 10), rep)
        out.append(_build_dataset(spec, rng))
    return out


def generate_fmdv_like(
    mu_w: float,
    sigma_eps2: float,
    seed: int = 0,
    overrides: ScenarioSpec | None = None,
) -> Dataset:
    """Dataset mimicking the smaller three-factor assay structure.

    Coefficients are drawn around ``mu_w`` (sd 0.1) truncated negative; the
    three factors are the test strain, the experiment date and the
    antiserum (reference strain).
    """
    spec = overrides or ScenarioSpec(
        n_strains=15,
        n_obs=1000,
        n_variables=50,
        n_factors=3,
        sigma_y2=0.1,
        generic_group_size=20,
    )
    spec = replace(
        spec,
        sigma_eps2=sigma_eps2,
        seed=seed,
        n_factors=3,
        factor_names=("antiserum", "test", "date"),
    )
    rng = seeds.stream(seed, seeds.STREAM_SIMULATE, 1)
    draws = rng.normal(mu_w, 0.1, spec.n_variables)
    for _ in range(100):
        bad = draws >= 0.0
        if not bad.any():
            break
        draws[bad] = rng.normal(mu_w, 0.1, int(bad.sum()))
    draws = np.minimum(draws, -1e-12)
    return _build_dataset(spec, rng, w_values=draws)


@dataclass(frozen=True)
class MismatchData:
    y: np.ndarray
    x_r: np.ndarray
    x_ir: np.ndarray
    pair_id: np.ndarray
    w_r: float


def generate_mismatch(
    n: int,
    correlated: bool,
    seed: int = 0,
    n_pairs: int = 55,
    sigma_y2: float = 0.1,
    sigma_eps2: float = 0.5,
) -> MismatchData:
    """Two-column linear-model dataset for the noise-mismatch study.

    One column carries a true negative coefficient, the other none.  The
    design, coefficient and pair assignment depend only on ``(seed, n)``,
    so the iid-noise and pair-correlated variants of one seed are a matched
    comparison; only the noise stream differs.
    """
    if n not in (500, 1000, 2000):
        raise ValueError("n must be one of 500, 1000, 2000")
    shared = seeds.stream(seed, seeds.STREAM_SIMULATE, 2, n, 0)
    pair_id = _assign_pairs(n, n_pairs, shared)
    x_pair = (shared.random((n_pairs, 2)) < 0.5).astype(float)
    w_r = float(shared.uniform(-0.4, -0.2))
    x_r = x_pair[pair_id, 0]
    x_ir = x_pair[pair_id, 1]

    noise_rng = seeds.stream(seed, seeds.STREAM_SIMULATE, 2, n, 2 if correlated else 1)
    y = w_r * x_r + noise_rng.normal(0.0, np.sqrt(sigma_y2), n)
    if correlated:
        eps = noise_rng.normal(0.0, np.sqrt(sigma_eps2), n_pairs)
        y = y + eps[pair_id]
    return MismatchData(y=y, x_r=x_r, x_ir=x_ir, pair_id=pair_id, w_r=w_r)
