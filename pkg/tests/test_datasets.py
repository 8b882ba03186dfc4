import numpy as np
import pytest
from sklearn.metrics import mutual_info_score

from dlab.datasets import Circles, Factor, FactorSpec, GridWorld, circles_render, dataset_from_name, gridworld_render
from dlab.exceptions import FactorError


class TestCircles:
    def test_centered_disc_is_symmetric(self):
        img = circles_render(0.5, 0.5, size=16)[..., 0]
        np.testing.assert_allclose(img, img[:, ::-1], atol=1e-12)
        np.testing.assert_allclose(img, img[::-1, :], atol=1e-12)

    def test_mirrored_positions(self):
        a = circles_render(0.2, 0.5, size=16)[..., 0]
        b = circles_render(0.8, 0.5, size=16)[..., 0]
        np.testing.assert_allclose(a, b[:, ::-1], atol=1e-12)

    @pytest.mark.parametrize("x, y", [(0.5, 0.5), (0.3, 0.7), (0.65, 0.25)])
    def test_disc_area(self, x, y):
        assert circles_render(x, y, size=16).mean() == pytest.approx(0.0314, abs=0.01)

    def test_x_moves_columns(self):
        img = circles_render(0.25, 0.5, size=16)[..., 0]
        assert img[:, :8].sum() > img[:, 8:].sum()
        assert img[:8, :].sum() == pytest.approx(img[8:, :].sum())

    @pytest.mark.parametrize("x", [0.1, 0.9])
    def test_out_of_range(self, x):
        with pytest.raises(FactorError):
            circles_render(x, 0.5)

    def test_batch_is_seed_deterministic(self):
        ds = Circles(size=8)
        a, fa = ds.sample_batch(16, np.random.default_rng(4))
        b, fb = ds.sample_batch(16, np.random.default_rng(4))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(fa, fb)
        assert a.shape == (16, 8, 8, 1)
        assert 0.0 <= a.min() and a.max() <= 1.0


class TestGridWorld:
    def test_intensity_scales_pixels(self):
        cards = {"x": 4, "intensity": 3}
        dim = gridworld_render([2, 1], cards)
        bright = gridworld_render([2, 3], cards)
        np.testing.assert_allclose(bright, 2.0 * dim)

    def test_every_tuple_renders_distinctly(self):
        ds = GridWorld({"x": 4, "y": 4, "shape": 2})
        images = ds.observations_from_factors(ds.spec.grid()).reshape(32, -1)
        assert len(np.unique(images, axis=0)) == 32

    def test_largest_centered_square(self):
        img = gridworld_render([3, 1], {"scale": 3, "shape": 2})[..., 0]
        expected = np.zeros((16, 16))
        expected[4:12, 4:12] = 1.0
        np.testing.assert_allclose(img, expected)

    def test_discrete_factor_frequencies(self, rng):
        ds = GridWorld({"x": 4, "y": 4})
        factors = ds.sample_factors(10_000, rng)
        for value in range(1, 5):
            assert np.mean(factors[:, 0] == value) == pytest.approx(0.25, abs=0.02)

    def test_factors_are_independent(self, rng):
        factors = GridWorld({"x": 4, "y": 4}).sample_factors(10_000, rng)
        assert mutual_info_score(factors[:, 0], factors[:, 1]) < 0.01

    def test_batch_matches_render(self, rng):
        ds = GridWorld({"x": 4, "y": 4, "shape": 2})
        images, factors = ds.sample_batch(1, rng)
        np.testing.assert_array_equal(images[0], ds.render(factors[0]))

    @pytest.mark.parametrize("cards", [{"x": 4}, {"x": 4, "colour": 2}, {"x": 4, "shape": 3}])
    def test_rejects_bad_layouts(self, cards):
        with pytest.raises(FactorError):
            GridWorld(cards)

    def test_index_out_of_range(self):
        with pytest.raises(FactorError):
            gridworld_render([5, 1], {"x": 4, "y": 4})


class TestConditionalSampling:
    def test_fixed_factor_shares_value(self, rng):
        _, factors = GridWorld({"x": 4, "y": 4, "shape": 2}).sample_fixed(1, 32, rng)
        assert len(np.unique(factors[:, 1])) == 1

    def test_pairs_agree_on_one_factor(self, rng):
        _, _, a, b = GridWorld({"x": 4, "y": 4, "shape": 2}).sample_pairs(2, 50, rng)
        np.testing.assert_array_equal(a[:, 2], b[:, 2])
        assert not np.array_equal(a, b)


class TestFactorSpec:
    def test_grid_last_factor_fastest(self):
        spec = FactorSpec((Factor("a", cardinality=2), Factor("b", cardinality=3)))
        np.testing.assert_array_equal(spec.grid()[:4], [[1, 1], [1, 2], [1, 3], [2, 1]])

    def test_duplicate_names(self):
        with pytest.raises(FactorError):
            FactorSpec((Factor("a", cardinality=2), Factor("a", cardinality=3)))

    def test_continuous_range(self):
        with pytest.raises(FactorError):
            Factor("x", low=1.0, high=1.0)


class TestDatasetFromName:
    def test_circles(self):
        assert dataset_from_name("circles:size=8").image_shape == (8, 8, 1)

    def test_gridworld_default(self):
        assert dataset_from_name("gridworld").spec.names == ["x", "y", "shape"]

    def test_gridworld_options(self):
        ds = dataset_from_name("gridworld:x=3,scale=2,size=32")
        assert ds.spec.names == ["x", "scale"] and ds.image_shape == (32, 32, 1)

    def test_unknown(self):
        with pytest.raises(FactorError):
            dataset_from_name("no-such-dataset")
