import numpy as np
import pytest

from esabre.data import (
    DataError,
    Dataset,
    Hyperparameters,
    ObservationTable,
    PairDesign,
    RandomEffectsLayout,
    group_index,
    incidence_counts,
    load_dataset,
    write_dataset,
)
from esabre.simulate import SD_SCENARIOS, ScenarioSpec, generate_basic
from dataclasses import replace


def tiny_layout(k=1, sizes=(2,)):
    return RandomEffectsLayout(sizes=sizes, names=tuple(f"f{i}" for i in range(k)))


def make_obs(y, pair_id, groups):
    y = np.asarray(y, dtype=float)
    return ObservationTable(
        obs_id=np.arange(y.size, dtype=np.int64),
        y=y,
        pair_id=np.asarray(pair_id, dtype=np.int64),
        groups=np.asarray(groups, dtype=np.int64).reshape(y.size, -1),
    )


class TestConstruction:
    def test_three_rows_two_pairs(self):
        obs = make_obs([1.0, 2.0, 3.0], [0, 0, 1], [[0], [1], [0]])
        design = PairDesign(np.array([[1.0, 0.0], [1.0, 1.0]]))
        data = Dataset(obs, design, tiny_layout())
        assert data.n_pairs == 2
        assert data.n_obs == 3
        assert data.n_variables == 1

    def test_pair_out_of_range(self):
        obs = make_obs([1.0, 2.0], [0, 5], [[0], [1]])
        design = PairDesign(np.array([[1.0, 0.0], [1.0, 1.0]]))
        with pytest.raises(DataError, match="pair_id out of range"):
            Dataset(obs, design, tiny_layout())

    def test_uncovered_pair_rejected(self):
        obs = make_obs([1.0, 2.0], [0, 0], [[0], [1]])
        design = PairDesign(np.array([[1.0, 0.0], [1.0, 1.0]]))
        with pytest.raises(DataError, match="has no observations"):
            Dataset(obs, design, tiny_layout())

    def test_non_dense_groups_rejected(self):
        obs = make_obs([1.0, 2.0], [0, 1], [[0], [0]])
        design = PairDesign(np.array([[1.0, 0.0], [1.0, 1.0]]))
        with pytest.raises(DataError, match="not dense"):
            Dataset(obs, design, tiny_layout())

    def test_non_binary_design_rejected(self):
        obs = make_obs([1.0, 2.0], [0, 1], [[0], [1]])
        design = PairDesign(np.array([[1.0, 0.5], [1.0, 1.0]]))
        with pytest.raises(DataError, match="0/1"):
            Dataset(obs, design, tiny_layout())

    def test_intercept_column_required(self):
        obs = make_obs([1.0, 2.0], [0, 1], [[0], [1]])
        design = PairDesign(np.array([[0.0, 0.0], [1.0, 1.0]]))
        with pytest.raises(DataError, match="column 0"):
            Dataset(obs, design, tiny_layout())

    def test_nonfinite_response_rejected(self):
        obs = make_obs([1.0, np.inf], [0, 1], [[0], [1]])
        design = PairDesign(np.array([[1.0, 0.0], [1.0, 1.0]]))
        with pytest.raises(DataError, match="finite"):
            Dataset(obs, design, tiny_layout())


class TestIncidence:
    def test_counting(self):
        obs = make_obs([1.0, 2.0, 3.0], [0, 0, 1], [[0], [1], [0]])
        assert incidence_counts(obs, 2).tolist() == [2, 1]

    def test_identity_case(self):
        obs = make_obs([1.0, 2.0, 3.0], [0, 1, 2], [[0], [1], [0]])
        assert incidence_counts(obs, 3).tolist() == [1, 1, 1]

    def test_sd1_bookkeeping(self):
        data = generate_basic(SD_SCENARIOS["sd1"])
        assert data.counts.sum() == 2000
        assert data.counts.size == 55
        assert np.all(data.counts >= 1)


class TestGroupIndex:
    def test_single_factor_identity(self):
        obs = make_obs([1.0, 2.0, 3.0], [0, 1, 2], [[0], [1], [1]])
        idx = group_index(obs, tiny_layout())
        assert idx[:, 0].tolist() == [0, 1, 1]

    def test_offset_arithmetic(self):
        layout = RandomEffectsLayout(sizes=(2, 3), names=("a", "b"))
        obs = make_obs([1.0], [0], [[1, 0]])
        idx = group_index(obs, layout)
        assert idx[0].tolist() == [1, 2 + 0]

    def test_cross_products_match_dense(self):
        rng = np.random.default_rng(0)
        layout = RandomEffectsLayout(sizes=(3, 2), names=("a", "b"))
        n = 10
        groups = np.column_stack(
            [
                np.concatenate([np.arange(3), rng.integers(0, 3, n - 3)]),
                np.concatenate([np.arange(2), rng.integers(0, 2, n - 2)]),
            ]
        )
        obs = make_obs(rng.normal(size=n), np.arange(n) % 4, groups)
        design = PairDesign(np.column_stack([np.ones(4), rng.integers(0, 2, (4, 2))]).astype(float))
        data = Dataset(obs, design, layout)
        # dense indicator matrices reconstructed from the index arrays
        z = np.zeros((n, layout.n_coefficients), dtype=np.int64)
        for i in range(n):
            for k in range(2):
                z[i, data.flat_groups[i, k]] = 1
        m = np.zeros((n, 4), dtype=np.int64)
        m[np.arange(n), obs.pair_id] = 1
        assert np.array_equal(np.diag(z.T @ z), data.group_counts)
        assert np.array_equal(np.diag(m.T @ m), data.counts)
        r = rng.normal(size=n)
        assert np.allclose(z.T @ r, data.zt_dot(r))
        assert np.allclose(m.T @ r, data.pair_sums(r))


class TestRoundTrip:
    def test_write_then_load_identical(self, tmp_path):
        spec = replace(SD_SCENARIOS["sd1"], n_obs=120, n_strains=5, seed=9)
        data = generate_basic(spec)
        paths = write_dataset(data, tmp_path)
        loaded = load_dataset(
            paths["obs"], paths["design"], data.layout, truth_path=paths["truth"]
        )
        assert loaded == data

    def test_load_rejects_bad_header(self, tmp_path):
        data = generate_basic(ScenarioSpec(n_strains=3, n_obs=20, n_variables=4, seed=1))
        paths = write_dataset(data, tmp_path)
        text = paths["obs"].read_text().replace("obs_id", "row")
        paths["obs"].write_text(text)
        with pytest.raises(DataError, match="header"):
            load_dataset(paths["obs"], paths["design"], data.layout)


class TestSubsets:
    def test_subset_pairs_reindexes_and_keeps_groups(self):
        data = generate_basic(ScenarioSpec(n_strains=4, n_obs=50, n_variables=5, seed=2))
        sub = data.subset_pairs(np.array([1, 3, 5]))
        assert sub.n_pairs == 3
        assert sub.layout == data.layout
        assert np.array_equal(sub.design.x_star, data.design.x_star[[1, 3, 5]])

    def test_subset_factors(self):
        data = generate_basic(
            ScenarioSpec(n_strains=4, n_obs=50, n_variables=5, n_factors=3, seed=2)
        )
        sub = data.subset_factors((0, 2))
        assert sub.layout.names == (data.layout.names[0], data.layout.names[2])
        assert sub.obs.groups.shape == (50, 2)


class TestHyperparameters:
    def test_positive_constraints(self):
        with pytest.raises(DataError):
            Hyperparameters(alpha_y=0.0)
        with pytest.raises(DataError):
            Hyperparameters(sigma02=-1.0)

    def test_factor_broadcast(self):
        h = Hyperparameters(alpha_b=(0.5,), beta_b=(0.5,)).for_factors(3)
        assert h.alpha_b == (0.5, 0.5, 0.5)
        with pytest.raises(DataError):
            Hyperparameters(alpha_b=(0.5, 0.5), beta_b=(0.5, 0.5)).for_factors(3)
