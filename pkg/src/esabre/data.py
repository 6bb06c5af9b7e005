"""Domain types, dataset ingestion and validation.

The measurement table stores, per observation, the response ``y``, the id of
the reference/test pair it was measured on, and one group id per
random-effect factor.  The pair design stores one fixed-effect row per pair
(intercept column first).  The incidence matrix mapping observations to
pairs and the random-effects indicator matrix are never materialised: all
downstream algebra works from ``pair_id`` and flat group indices, which is
what keeps the latent-mean sampler's per-iteration cost independent of the
number of observations.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "RandomEffectsLayout",
    "ObservationTable",
    "PairDesign",
    "Hyperparameters",
    "ModelState",
    "Truth",
    "Dataset",
    "load_dataset",
    "write_dataset",
    "incidence_counts",
    "group_index",
]


class DataError(ValueError):
    """Raised on malformed or inconsistent input data."""


@dataclass(frozen=True)
class RandomEffectsLayout:
    """Random-effect factor structure: ``sizes[k]`` groups for factor k."""

    sizes: tuple[int, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.sizes) != len(self.names):
            raise DataError("layout sizes and names differ in length")
        if any(g < 1 for g in self.sizes):
            raise DataError("every random-effect factor needs at least one group")

    @property
    def n_factors(self) -> int:
        return len(self.sizes)

    @property
    def n_coefficients(self) -> int:
        return int(sum(self.sizes))

    @property
    def offsets(self) -> np.ndarray:
        """Start index of each factor's block in the flat coefficient vector."""
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)

    def subset(self, factors: tuple[int, ...]) -> "RandomEffectsLayout":
        return RandomEffectsLayout(
            sizes=tuple(self.sizes[k] for k in factors),
            names=tuple(self.names[k] for k in factors),
        )


@dataclass(frozen=True)
class ObservationTable:
    """Per-measurement records: response, pair id, group id per factor."""

    obs_id: np.ndarray  # (N,) int64
    y: np.ndarray  # (N,) float64
    pair_id: np.ndarray  # (N,) int64
    groups: np.ndarray  # (N, K) int64

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class PairDesign:
    """P x (J+1) fixed-effect design over pairs; column 0 is the intercept."""

    x_star: np.ndarray  # (P, J+1) float64, column 0 all ones, rest 0/1

    @property
    def n_pairs(self) -> int:
        return self.x_star.shape[0]

    @property
    def n_variables(self) -> int:
        return self.x_star.shape[1] - 1

    @property
    def x(self) -> np.ndarray:
        """Design without the intercept column."""
        return self.x_star[:, 1:]


@dataclass(frozen=True)
class Hyperparameters:
    """Fixed prior constants.

    Inverse-gamma (shape, scale) pairs for the measurement noise, the
    latent-mean model error, the slab width and each random-effect factor
    variance; Gaussian (mean, variance) pairs for the intercept and the
    shared coefficient mean; a Beta pair for the inclusion probability.
    Defaults are the vague settings used throughout the studies.
    """

    alpha_y: float = 0.001
    beta_y: float = 0.001
    alpha_eps: float = 0.001
    beta_eps: float = 0.001
    alpha_w: float = 0.001
    beta_w: float = 0.001
    mu0: float = 0.0
    sigma02: float = 100.0
    mu_w0: float = 0.0
    sigma_w02: float = 100.0
    alpha_pi: float = 1.0
    beta_pi: float = 4.0
    alpha_b: tuple[float, ...] = ()
    beta_b: tuple[float, ...] = ()

    def __post_init__(self):
        positives = {
            "alpha_y": self.alpha_y,
            "beta_y": self.beta_y,
            "alpha_eps": self.alpha_eps,
            "beta_eps": self.beta_eps,
            "alpha_w": self.alpha_w,
            "beta_w": self.beta_w,
            "sigma02": self.sigma02,
            "sigma_w02": self.sigma_w02,
            "alpha_pi": self.alpha_pi,
            "beta_pi": self.beta_pi,
        }
        for name, value in positives.items():
            if not value > 0:
                raise DataError(f"hyperparameter {name} must be > 0, got {value}")
        for name, values in (("alpha_b", self.alpha_b), ("beta_b", self.beta_b)):
            if any(not v > 0 for v in values):
                raise DataError(f"hyperparameter {name} entries must be > 0")

    def for_factors(self, n_factors: int) -> "Hyperparameters":
        """Broadcast per-factor IG pairs to ``n_factors`` entries."""
        alpha = self.alpha_b if self.alpha_b else (0.001,) * n_factors
        beta = self.beta_b if self.beta_b else (0.001,) * n_factors
        if len(alpha) == 1:
            alpha = alpha * n_factors
        if len(beta) == 1:
            beta = beta * n_factors
        if len(alpha) != n_factors or len(beta) != n_factors:
            raise DataError(
                f"per-factor hyperparameters have {len(alpha)} entries, expected {n_factors}"
            )
        return replace(self, alpha_b=tuple(alpha), beta_b=tuple(beta))


@dataclass
class ModelState:
    """One MCMC state.  ``w`` is full length J with exact zeros off-support."""

    mu_y: np.ndarray  # (P,)
    w0: float
    w: np.ndarray  # (J,)
    gamma: np.ndarray  # (J,) int8 in {0,1}
    mu_w: float
    sigma_y2: float
    sigma_eps2: float
    sigma_w2: float
    b: np.ndarray  # (sum G_k,)
    sigma_b2: np.ndarray  # (K,)
    pi: float

    def copy(self) -> "ModelState":
        return ModelState(
            mu_y=self.mu_y.copy(),
            w0=self.w0,
            w=self.w.copy(),
            gamma=self.gamma.copy(),
            mu_w=self.mu_w,
            sigma_y2=self.sigma_y2,
            sigma_eps2=self.sigma_eps2,
            sigma_w2=self.sigma_w2,
            b=self.b.copy(),
            sigma_b2=self.sigma_b2.copy(),
            pi=self.pi,
        )

    def validate(self):
        if not np.all((self.w == 0.0) == (self.gamma == 0)):
            raise DataError("w must be exactly zero where gamma is zero and nonzero elsewhere")
        for name in ("sigma_y2", "sigma_eps2", "sigma_w2"):
            if not getattr(self, name) > 0:
                raise DataError(f"{name} must be > 0")
        if not np.all(self.sigma_b2 > 0):
            raise DataError("sigma_b2 entries must be > 0")
        if not 0.0 < self.pi < 1.0:
            raise DataError("pi must lie in (0, 1)")


@dataclass(frozen=True)
class Truth:
    """Simulation ground truth: fixed-effect indicators and factor flags."""

    gamma: np.ndarray  # (J,) int8
    re_included: dict[str, bool] = field(default_factory=dict)


class Dataset:
    """Immutable bundle of observations, pair design and factor layout.

    ``allow_sparse_groups`` permits internal sub-datasets (cross-validation
    folds, shards) whose observations do not cover every group; coefficients
    of uncovered groups then carry no data term in the sampler.
    """

    def __init__(
        self,
        obs: ObservationTable,
        design: PairDesign,
        layout: RandomEffectsLayout,
        truth: Truth | None = None,
        allow_sparse_groups: bool = False,
    ):
        self.obs = obs
        self.design = design
        self.layout = layout
        self.truth = truth
        self._validate(allow_sparse_groups)

        self.n_obs = obs.n_obs
        self.n_pairs = design.n_pairs
        self.n_variables = design.n_variables
        self.counts = incidence_counts(obs, self.n_pairs)
        self.flat_groups = group_index(obs, layout)
        # Per-factor observation counts per group (diagonal of the
        # random-effects cross-product).
        self.group_counts = np.bincount(
            self.flat_groups.ravel(), minlength=layout.n_coefficients
        ).astype(np.int64)

    def _validate(self, allow_sparse_groups: bool):
        obs, design, layout = self.obs, self.design, self.layout
        n = obs.n_obs
        if obs.pair_id.shape != (n,) or obs.obs_id.shape != (n,):
            raise DataError("observation columns have inconsistent lengths")
        if obs.groups.shape != (n, layout.n_factors):
            raise DataError(
                f"expected {layout.n_factors} group columns, got {obs.groups.shape[1]}"
            )
        if not np.all(np.isfinite(obs.y)):
            raise DataError("responses must be finite")
        p = design.n_pairs
        if np.any(obs.pair_id < 0) or np.any(obs.pair_id >= p):
            raise DataError("pair_id out of range")
        present = np.bincount(obs.pair_id, minlength=p)
        if not allow_sparse_groups and np.any(present == 0):
            missing = int(np.flatnonzero(present == 0)[0])
            raise DataError(f"pair {missing} has no observations")
        for k, size in enumerate(layout.sizes):
            g = obs.groups[:, k]
            if np.any(g < 0) or np.any(g >= size):
                raise DataError(f"group id out of range for factor {layout.names[k]}")
            if not allow_sparse_groups:
                used = np.bincount(g, minlength=size)
                if np.any(used == 0):
                    raise DataError(
                        f"group ids not dense for factor {layout.names[k]}: "
                        f"group {int(np.flatnonzero(used == 0)[0])} unused"
                    )
        if design.x_star.ndim != 2 or design.x_star.shape[1] < 1:
            raise DataError("design must be a P x (J+1) matrix")
        if not np.all(design.x_star[:, 0] == 1.0):
            raise DataError("design column 0 must be identically 1")
        rest = design.x_star[:, 1:]
        if not np.all((rest == 0.0) | (rest == 1.0)):
            raise DataError("design entries outside column 0 must be 0/1 indicators")

    def zb(self, b: np.ndarray) -> np.ndarray:
        """Random-effect contribution per observation for coefficients ``b``."""
        return b[self.flat_groups].sum(axis=1)

    def zt_dot(self, r: np.ndarray) -> np.ndarray:
        """Accumulate per-coefficient sums of ``r`` (length-N) over groups."""
        out = np.zeros(self.layout.n_coefficients)
        for k in range(self.layout.n_factors):
            out += np.bincount(
                self.flat_groups[:, k], weights=r, minlength=self.layout.n_coefficients
            )
        return out

    def pair_sums(self, r: np.ndarray) -> np.ndarray:
        """Per-pair sums of a length-N vector."""
        return np.bincount(self.obs.pair_id, weights=r, minlength=self.n_pairs)

    def subset_pairs(self, pair_ids: np.ndarray) -> "Dataset":
        """Dataset restricted to ``pair_ids``, pairs re-indexed densely.

        Group ids keep their global meaning, so coefficient vectors remain
        comparable across subsets.
        """
        pair_ids = np.asarray(pair_ids, dtype=np.int64)
        keep = np.isin(self.obs.pair_id, pair_ids)
        local = np.full(self.n_pairs, -1, dtype=np.int64)
        local[pair_ids] = np.arange(pair_ids.size)
        obs = ObservationTable(
            obs_id=self.obs.obs_id[keep],
            y=self.obs.y[keep],
            pair_id=local[self.obs.pair_id[keep]],
            groups=self.obs.groups[keep],
        )
        design = PairDesign(self.design.x_star[pair_ids])
        return Dataset(obs, design, self.layout, truth=self.truth, allow_sparse_groups=True)

    def subset_factors(self, factors: tuple[int, ...]) -> "Dataset":
        """Dataset keeping only the given random-effect factors."""
        obs = ObservationTable(
            obs_id=self.obs.obs_id,
            y=self.obs.y,
            pair_id=self.obs.pair_id,
            groups=self.obs.groups[:, list(factors)].reshape(self.n_obs, len(factors)),
        )
        return Dataset(obs, self.design, self.layout.subset(factors), truth=self.truth)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same = (
            np.array_equal(self.obs.obs_id, other.obs.obs_id)
            and np.array_equal(self.obs.y, other.obs.y)
            and np.array_equal(self.obs.pair_id, other.obs.pair_id)
            and np.array_equal(self.obs.groups, other.obs.groups)
            and np.array_equal(self.design.x_star, other.design.x_star)
            and self.layout == other.layout
        )
        if not same:
            return False
        if (self.truth is None) != (other.truth is None):
            return False
        if self.truth is not None:
            return (
                np.array_equal(self.truth.gamma, other.truth.gamma)
                and self.truth.re_included == other.truth.re_included
            )
        return True


def incidence_counts(obs: ObservationTable, n_pairs: int | None = None) -> np.ndarray:
    """Observations per pair; the diagonal of the incidence cross-product."""
    p = int(obs.pair_id.max()) + 1 if n_pairs is None else n_pairs
    return np.bincount(obs.pair_id, minlength=p).astype(np.int64)


def group_index(obs: ObservationTable, layout: RandomEffectsLayout) -> np.ndarray:
    """Flat coefficient index per observation and factor.

    Column k holds ``offsets[k] + group_id[k]``; accumulating over these
    indices reproduces the random-effects cross-products without ever
    forming the indicator matrix.
    """
    if obs.groups.shape[1] != layout.n_factors:
        raise DataError("observation group columns do not match layout")
    for k, size in enumerate(layout.sizes):
        if np.any(obs.groups[:, k] >= size):
            raise DataError(f"group id >= {size} for factor {layout.names[k]}")
    return obs.groups + layout.offsets[:-1][None, :]


def _format(value: float) -> str:
    return repr(float(value))


def load_dataset(
    obs_path: str | Path,
    design_path: str | Path,
    layout: RandomEffectsLayout,
    truth_path: str | Path | None = None,
) -> Dataset:
    """Load and validate a dataset from the CSV/JSON interchange files."""
    obs_path, design_path = Path(obs_path), Path(design_path)
    with open(obs_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = ["obs_id", "y", "pair_id", *layout.names]
        if header != expected:
            raise DataError(f"bad observation header {header}, expected {expected}")
        rows = list(reader)
    if not rows:
        raise DataError("empty observation file")
    try:
        obs_id = np.array([int(r[0]) for r in rows], dtype=np.int64)
        y = np.array([float(r[1]) for r in rows])
        pair_id = np.array([int(r[2]) for r in rows], dtype=np.int64)
        groups = np.array(
            [[int(v) for v in r[3 : 3 + layout.n_factors]] for r in rows], dtype=np.int64
        ).reshape(len(rows), layout.n_factors)
    except ValueError as exc:
        raise DataError(f"failed to parse {obs_path}: {exc}") from exc

    with open(design_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) < 2 or header[0] != "pair_id" or header[1] != "x0":
            raise DataError(f"bad design header in {design_path}")
        drows = list(reader)
    try:
        dp = np.array([int(r[0]) for r in drows], dtype=np.int64)
        x_star = np.array([[float(v) for v in r[1:]] for r in drows])
    except ValueError as exc:
        raise DataError(f"failed to parse {design_path}: {exc}") from exc
    if np.unique(dp).size != dp.size:
        raise DataError("duplicate pair_id rows in design")
    order = np.argsort(dp)
    if not np.array_equal(dp[order], np.arange(dp.size)):
        raise DataError("design pair_id values must be dense 0..P-1")
    x_star = x_star[order]

    truth = None
    if truth_path is not None:
        with open(truth_path, encoding="utf-8") as fh:
            raw = json.load(fh)
        truth = Truth(
            gamma=np.asarray(raw["gamma"], dtype=np.int8),
            re_included={k: bool(v) for k, v in raw.get("re_included", {}).items()},
        )

    return Dataset(
        ObservationTable(obs_id=obs_id, y=y, pair_id=pair_id, groups=groups),
        PairDesign(x_star),
        layout,
        truth=truth,
    )


def write_dataset(data: Dataset, out_dir: str | Path) -> dict[str, Path]:
    """Write a dataset in the interchange format; returns the paths written.

    Floats are written with shortest round-trip ``repr`` so a write/load
    cycle reproduces values exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "obs": out_dir / "observations.csv",
        "design": out_dir / "design.csv",
    }
    with open(paths["obs"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["obs_id", "y", "pair_id", *data.layout.names])
        for i in range(data.n_obs):
            writer.writerow(
                [
                    int(data.obs.obs_id[i]),
                    _format(data.obs.y[i]),
                    int(data.obs.pair_id[i]),
                    *[int(g) for g in data.obs.groups[i]],
                ]
            )
    with open(paths["design"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", *[f"x{j}" for j in range(data.n_variables + 1)]])
        for p in range(data.n_pairs):
            row = [int(p)]
            row.append(_format(data.design.x_star[p, 0]))
            row.extend(str(int(v)) for v in data.design.x_star[p, 1:])
            writer.writerow(row)
    if data.truth is not None:
        paths["truth"] = out_dir / "truth.json"
        with open(paths["truth"], "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "gamma": [int(g) for g in data.truth.gamma],
                    "re_included": dict(sorted(data.truth.re_included.items())),
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
    return paths
