"""Divide-and-conquer MCMC over pair-level shards.

Running a shard with the full prior makes the product of shard posteriors
carry that prior once per shard, i.e. raised to the shard count.  The
correction loop therefore searches for nominal hyperparameters whose
powered prior matches the intended one: draw from the powered prior without
data, fit each declared family to the draws by maximum likelihood (the
sample-based Kullback-Leibler minimiser), and test the fit against a
dispersion predicate, inflating the nominal values between rounds.

Powered standard families are exact:

    N(m, v)^K  = N(m, v/K)
    IG(a, b)^K = IG(Ka + K - 1, Kb)
    Beta(a, b)^K = Beta(Ka - K + 1, Kb - K + 1)   (proper iff both > 0)

Components whose prior variance is scaled by the model-error variance draw
their scale from its powered component first; that single ancestral pass is
the no-data sweep of the hierarchy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import polygamma, psi as digamma

from . import seeds
from .data import Dataset, Hyperparameters
from .sampler import ChainStore, SamplerConfig, run_chains

__all__ = [
    "ShardPlan",
    "Component",
    "PriorFamilySpec",
    "CombinedSummaries",
    "partition",
    "prior_power_sample",
    "kl_fit_hyper",
    "prior_correct",
    "combine_subposteriors",
    "shard_fit",
]


class PriorPowerError(ValueError):
    """Powered family improper or fitting failed."""


@dataclass(frozen=True)
class ShardPlan:
    n_shards: int
    assignment: np.ndarray  # (P,) shard index per pair
    seed: int


def partition(data: Dataset, n_shards: int, seed: int):
    """Split pairs into balanced shards; returns (plan, shard datasets).

    Shard datasets re-index their pairs densely but keep global group ids,
    so random-effect coefficients stay comparable across shards.
    """
    if n_shards < 2:
        raise ValueError("need at least 2 shards")
    if n_shards > data.n_pairs:
        raise ValueError("more shards than pairs")
    perm = seeds.stream(seed, seeds.STREAM_SHARD).permutation(data.n_pairs)
    assignment = np.empty(data.n_pairs, dtype=np.int64)
    shards = []
    for s in range(n_shards):
        pair_ids = np.sort(perm[s::n_shards])
        assignment[pair_ids] = s
        shards.append(data.subset_pairs(pair_ids))
    return ShardPlan(n_shards=n_shards, assignment=assignment, seed=seed), shards


@dataclass(frozen=True)
class Component:
    family: str  # gaussian | inverse_gamma | beta
    params: tuple[float, float]
    scaled_by: str | None = None  # name of the variance component scaling this one

    def variance(self) -> float:
        a, b = self.params
        if self.family == "gaussian":
            return b
        if self.family == "beta":
            s = a + b
            return a * b / (s * s * (s + 1.0))
        if self.family == "inverse_gamma":
            if a <= 2.0:
                return float("inf")
            return b * b / ((a - 1.0) ** 2 * (a - 2.0))
        raise ValueError(f"unknown family {self.family!r}")


@dataclass(frozen=True)
class PriorFamilySpec:
    """Declared families and current values for every corrected component."""

    components: dict[str, Component]

    @classmethod
    def from_hyperparameters(cls, hyper: Hyperparameters, n_factors: int) -> "PriorFamilySpec":
        hyper = hyper.for_factors(n_factors)
        comps = {
            "sigma_y2": Component("inverse_gamma", (hyper.alpha_y, hyper.beta_y)),
            "sigma_eps2": Component("inverse_gamma", (hyper.alpha_eps, hyper.beta_eps)),
            "sigma_w2": Component("inverse_gamma", (hyper.alpha_w, hyper.beta_w)),
            "pi": Component("beta", (hyper.alpha_pi, hyper.beta_pi)),
            "mu_w": Component("gaussian", (hyper.mu0, hyper.sigma02), scaled_by="sigma_eps2"),
            "w0": Component("gaussian", (hyper.mu_w0, hyper.sigma_w02), scaled_by="sigma_eps2"),
        }
        for k in range(n_factors):
            comps[f"sigma_b2_{k}"] = Component(
                "inverse_gamma", (hyper.alpha_b[k], hyper.beta_b[k])
            )
        return cls(components=comps)

    def to_hyperparameters(self, n_factors: int) -> Hyperparameters:
        c = self.components
        return Hyperparameters(
            alpha_y=c["sigma_y2"].params[0],
            beta_y=c["sigma_y2"].params[1],
            alpha_eps=c["sigma_eps2"].params[0],
            beta_eps=c["sigma_eps2"].params[1],
            alpha_w=c["sigma_w2"].params[0],
            beta_w=c["sigma_w2"].params[1],
            mu0=c["mu_w"].params[0],
            sigma02=c["mu_w"].params[1],
            mu_w0=c["w0"].params[0],
            sigma_w02=c["w0"].params[1],
            alpha_pi=c["pi"].params[0],
            beta_pi=c["pi"].params[1],
            alpha_b=tuple(c[f"sigma_b2_{k}"].params[0] for k in range(n_factors)),
            beta_b=tuple(c[f"sigma_b2_{k}"].params[1] for k in range(n_factors)),
        )


def _powered_params(name: str, comp: Component, k: int) -> tuple[float, float]:
    a, b = comp.params
    if comp.family == "gaussian":
        return a, b / k
    if comp.family == "inverse_gamma":
        shape = k * a + k - 1
        if shape <= 0:
            raise PriorPowerError(f"powered inverse-gamma improper for {name}")
        return shape, k * b
    if comp.family == "beta":
        pa, pb = k * a - k + 1, k * b - k + 1
        if pa <= 0 or pb <= 0:
            raise PriorPowerError(
                f"powered beta improper for {name}: K*a-K+1={pa:g}, K*b-K+1={pb:g}"
            )
        return pa, pb
    raise ValueError(f"unknown family {comp.family!r}")


def prior_power_sample(
    psi_tilde: PriorFamilySpec,
    n_shards: int,
    n_samples: int,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Draw every declared component from the K-th power of its prior.

    Independent components use the exact powered families above.  Scaled
    Gaussians draw their variance factor from the powered scale component
    first (ancestral no-data pass), so their marginal is the corresponding
    scale mixture.
    """
    out: dict[str, np.ndarray] = {}
    deferred = []
    for name, comp in psi_tilde.components.items():
        if comp.scaled_by is not None:
            deferred.append((name, comp))
            continue
        a, b = _powered_params(name, comp, n_shards)
        if comp.family == "gaussian":
            out[name] = rng.normal(a, np.sqrt(b), n_samples)
        elif comp.family == "inverse_gamma":
            out[name] = b / rng.gamma(a, size=n_samples)
        else:
            out[name] = rng.beta(a, b, n_samples)
    for name, comp in deferred:
        if comp.family != "gaussian":
            raise PriorPowerError(f"scaled component {name} must be gaussian")
        if comp.scaled_by not in out:
            raise PriorPowerError(f"scale component {comp.scaled_by} missing for {name}")
        mean, var = comp.params
        scale = out[comp.scaled_by]
        out[name] = rng.normal(mean, np.sqrt(var * scale / n_shards), n_samples)
    return out


def _fit_gaussian(x: np.ndarray) -> tuple[float, float]:
    var = float(np.var(x))
    if var == 0.0:
        raise PriorPowerError("degenerate sample: zero variance in gaussian fit")
    return float(np.mean(x)), var


def _fit_inverse_gamma(x: np.ndarray, tol: float = 1e-10, max_iter: int = 100):
    mean_log = float(np.mean(np.log(x)))
    log_mean_inv = float(np.log(np.mean(1.0 / x)))
    c = mean_log + log_mean_inv
    if c <= 0.0:
        raise PriorPowerError("degenerate sample: inverse-gamma fit has no spread")
    t = np.log(max(0.5 / c, 1e-3))
    for _ in range(max_iter):
        a = np.exp(t)
        f = np.log(a) - digamma(a) - c
        if abs(f) <= tol:
            shape = float(a)
            return shape, float(shape / np.mean(1.0 / x))
        df = (1.0 / a - polygamma(1, a)) * a
        t -= f / df
    raise PriorPowerError("inverse-gamma fit: Newton did not converge")


def _fit_beta(x: np.ndarray, tol: float = 1e-10, max_iter: int = 100):
    m1 = float(np.mean(np.log(x)))
    m2 = float(np.mean(np.log1p(-x)))
    mean, var = float(np.mean(x)), float(np.var(x))
    if var == 0.0:
        raise PriorPowerError("degenerate sample: zero variance in beta fit")
    t = max(mean * (1.0 - mean) / var - 1.0, 1e-3)
    u = np.log([mean * t, (1.0 - mean) * t])
    for _ in range(max_iter):
        a, b = np.exp(u)
        g = np.array([digamma(a) - digamma(a + b) - m1, digamma(b) - digamma(a + b) - m2])
        if np.max(np.abs(g)) <= tol:
            return float(a), float(b)
        tri = polygamma(1, a + b)
        jac = np.array(
            [
                [(polygamma(1, a) - tri) * a, -tri * b],
                [-tri * a, (polygamma(1, b) - tri) * b],
            ]
        )
        u -= np.linalg.solve(jac, g)
    raise PriorPowerError("beta fit: Newton did not converge")


def kl_fit_hyper(samples: dict[str, np.ndarray], family: PriorFamilySpec) -> PriorFamilySpec:
    """Maximum-likelihood fit of each declared family to its samples.

    Maximising the sample log likelihood minimises the Monte-Carlo estimate
    of the divergence from the sampled distribution to the family member.
    """
    fitted = {}
    for name, comp in family.components.items():
        x = np.asarray(samples[name], dtype=float)
        if x.size < 100:
            raise PriorPowerError(f"need >= 100 samples per component, got {x.size} for {name}")
        if comp.family == "gaussian":
            params = _fit_gaussian(x)
        elif comp.family == "inverse_gamma":
            params = _fit_inverse_gamma(x)
        else:
            params = _fit_beta(x)
        fitted[name] = Component(comp.family, params, scaled_by=comp.scaled_by)
    return PriorFamilySpec(components=fitted)


def default_dispersion_check(target: PriorFamilySpec):
    """Every fitted variance at least its target; components with infinite
    target variance are skipped (nothing finite can exceed them)."""

    def check(fitted: PriorFamilySpec) -> bool:
        for name, comp in target.components.items():
            goal = comp.variance()
            if not np.isfinite(goal):
                continue
            if fitted.components[name].variance() < goal:
                return False
        return True

    return check


def _inflate(target: PriorFamilySpec, n_shards: int) -> PriorFamilySpec:
    """Nominal values whose K-th power best matches ``target``.

    Gaussian and Beta invert exactly; the inverse-gamma shape map is only
    feasible for shapes above K-1 and is floored otherwise.
    """
    k = n_shards
    out = {}
    for name, comp in target.components.items():
        a, b = comp.params
        if comp.family == "gaussian":
            out[name] = Component(comp.family, (a, b * k), scaled_by=comp.scaled_by)
        elif comp.family == "beta":
            out[name] = Component(comp.family, ((a + k - 1) / k, (b + k - 1) / k))
        else:
            out[name] = Component(comp.family, (max((a - k + 1) / k, 1e-3), b / k))
    return PriorFamilySpec(components=out)


@dataclass
class CorrectionResult:
    psi: PriorFamilySpec  # fitted full-data prior implied by the nominal values
    psi_tilde: PriorFamilySpec  # nominal values to run each shard with
    rounds: int


def prior_correct(
    psi_tilde: PriorFamilySpec,
    n_shards: int,
    dispersion_check=None,
    max_rounds: int = 5,
    n_samples: int = 20000,
    seed: int = 0,
) -> CorrectionResult:
    """Correction loop: sample the powered prior, fit, test, inflate.

    The input doubles as the intended prior; the loop stops at the first
    fitted spec the predicate accepts and reports both the fit and the
    nominal values that produced it.
    """
    target = psi_tilde
    if dispersion_check is None:
        dispersion_check = default_dispersion_check(target)
    nominal = psi_tilde
    rng = seeds.stream(seed, seeds.STREAM_PRIOR)
    for round_index in range(max_rounds):
        samples = prior_power_sample(nominal, n_shards, n_samples, rng)
        fitted = kl_fit_hyper(samples, nominal)
        if dispersion_check(fitted):
            return CorrectionResult(psi=fitted, psi_tilde=nominal, rounds=round_index + 1)
        nominal = _inflate(target, n_shards)
    raise PriorPowerError(f"dispersion predicate not satisfied within {max_rounds} rounds")


@dataclass
class CombinedSummaries:
    inclusion: np.ndarray  # (J,)
    gaussian: dict[str, tuple[float, float]]  # name -> (mean, variance)
    conflicts: list[int] = field(default_factory=list)
    shard_inclusion: np.ndarray | None = None  # (S, J)


def _shard_scalars(chains: list[ChainStore]) -> dict[str, np.ndarray]:
    stacked = [c.stacked() for c in chains]
    out = {}
    for key in ("w0", "mu_w", "pi", "sigma_y2", "sigma_eps2", "sigma_w2"):
        out[key] = np.concatenate([s[key] for s in stacked])
    sb = np.concatenate([s["sigma_b2"] for s in stacked], axis=0)
    for k in range(sb.shape[1]):
        out[f"sigma_b2_{k}"] = sb[:, k]
    for key, label in (("w", "w"), ("b", "b")):
        arr = np.concatenate([s[key] for s in stacked], axis=0)
        for i in range(arr.shape[1]):
            out[f"{label}_{i}"] = arr[:, i]
    return out


def combine_subposteriors(shard_chains: list[list[ChainStore]]) -> CombinedSummaries:
    """Combine shard posteriors: Gaussian products for continuous scalars,
    independent Bernoulli products for the inclusion indicators.

    The combination is order-invariant.  An indicator estimated exactly 0
    on one shard and exactly 1 on another has an undefined product and is
    reported as a conflict (probability NaN).
    """
    if not shard_chains:
        raise ValueError("no shards to combine")
    gammas = []
    scalars = []
    for chains in shard_chains:
        stacked = [c.stacked() for c in chains]
        gammas.append(np.concatenate([s["gamma"] for s in stacked], axis=0).mean(axis=0))
        scalars.append(_shard_scalars(chains))
    probs = np.vstack(gammas)

    with np.errstate(divide="ignore"):
        log_on = np.sum(np.log(probs), axis=0)
        log_off = np.sum(np.log1p(-probs), axis=0)
    inclusion = np.empty(probs.shape[1])
    conflicts = []
    for j in range(probs.shape[1]):
        on, off = log_on[j], log_off[j]
        if np.isneginf(on) and np.isneginf(off):
            inclusion[j] = np.nan
            conflicts.append(j)
        elif np.isneginf(on):
            inclusion[j] = 0.0
        elif np.isneginf(off):
            inclusion[j] = 1.0
        else:
            inclusion[j] = 1.0 / (1.0 + np.exp(off - on))

    gaussian = {}
    for key in scalars[0]:
        means = np.array([float(np.mean(s[key])) for s in scalars])
        variances = np.array([max(float(np.var(s[key], ddof=1)), 1e-30) for s in scalars])
        precision = np.sum(1.0 / variances)
        gaussian[key] = (float(np.sum(means / variances) / precision), float(1.0 / precision))

    return CombinedSummaries(
        inclusion=inclusion,
        gaussian=gaussian,
        conflicts=conflicts,
        shard_inclusion=probs,
    )


def shard_fit(
    data: Dataset,
    hyper: Hyperparameters,
    config: SamplerConfig,
    n_shards: int,
) -> tuple[ShardPlan, list[list[ChainStore]]]:
    """Partition the data and fit every shard with shard-derived seeds."""
    plan, shards = partition(data, n_shards, config.seed)
    all_chains = []
    for s, shard in enumerate(shards):
        shard_seed = int(
            np.random.SeedSequence(config.seed, spawn_key=(seeds.STREAM_SHARD, 1 + s))
            .generate_state(1)[0]
        )
        all_chains.append(run_chains(shard, hyper, replace(config, seed=shard_seed)))
    return plan, all_chains
