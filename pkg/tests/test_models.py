import math

import numpy as np
import pytest

from conftest import tiny_config
from dlab import settings
from dlab.datasets import Circles, Factor, FactorSpec, GridWorld
from dlab.exceptions import ConfigError, DivergenceError, FactorError, LatentError, ObservationError, ShapeError
from dlab.latent import active_categories, category_mask, sample_gumbel
from dlab.models import (Discriminator, ModelConfig, TrainedModel, build_model, discriminator_step, elbo_loss,
                         factor_dvae_loss, label_bins, permute_dims, semi_sup_loss, st_gap, supervised_term, train)
from dlab.optim import zero_grad
from dlab.serializers import encode_arrays
from dlab.tensor import Tensor, backward


def _zero_last(module):
    last = module.layers[-1]
    last.weight.data = np.zeros_like(last.weight.data)
    last.bias.data = np.zeros_like(last.bias.data)
    return last


def _assert_encoder_gradient(model, loss, points=((0, 0), (3, 2), (7, 5), (15, 7)), h=1e-5):
    weight = model.encoder.layers[1].weight
    zero_grad(model.parameters())
    backward(loss())
    analytic = weight.grad.copy()
    for idx in points:
        keep = weight.data[idx]
        weight.data[idx] = keep + h
        up = loss().item()
        weight.data[idx] = keep - h
        down = loss().item()
        weight.data[idx] = keep
        numeric = (up - down) / (2 * h)
        assert abs(analytic[idx] - numeric) <= 1e-3 * max(1.0, abs(numeric))


class TestBuild:
    def test_discrete_head(self, rng):
        model = build_model(tiny_config(n=10, m=64), rng)
        params = model.encode(np.zeros((1, 8, 8, 1)))
        assert params.log_alpha.shape == (1, 10, 64)

    def test_gaussian_head(self, rng):
        model = build_model(tiny_config(latent_kind="gaussian", n=10), rng)
        params = model.encode(np.zeros((1, 8, 8, 1)))
        assert params.mu.shape == (1, 10) and (params.sigma.data > 0).all()

    def test_paper_conv_shapes(self, rng):
        config = tiny_config(preset="paper_conv", image_size=64, channels=3, n=10, m=64)
        model = build_model(config, rng)
        assert model.encoder.layers[-1].weight.shape == (256, 640)
        assert model.decode_images(np.zeros((1, 10))).shape == (1, 64, 64, 3)

    def test_broadcast_decoder_shape(self, rng):
        model = build_model(tiny_config(preset="broadcast_circles", image_size=16), rng)
        assert model.decode_images(np.full((2, 2), 0.5)).shape == (2, 16, 16, 1)

    def test_same_seed_same_weights(self):
        a = build_model(tiny_config(), np.random.default_rng(3))
        b = build_model(tiny_config(), np.random.default_rng(3))
        assert encode_arrays(a.arrays()) == encode_arrays(b.arrays())

    @pytest.mark.parametrize("key, value", [("preset", "resnet"), ("latent_kind", "beta"), ("m", 1),
                                            ("objective", "tc")])
    def test_invalid_settings(self, key, value):
        with pytest.raises(ConfigError) as err:
            tiny_config(**{key: value}).validate()
        assert err.value.key == key

    def test_paper_conv_needs_64_pixels(self):
        with pytest.raises(ConfigError):
            tiny_config(preset="paper_conv", image_size=32).validate()

    def test_unknown_config_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"n": 2, "width": 3})


class TestElbo:
    def test_zero_decoder_costs_log2_per_pixel(self, rng):
        model = build_model(tiny_config(), rng)
        _zero_last(model.decoder)
        terms = elbo_loss(model, rng.random((4, 8, 8, 1)), rng)
        assert terms.recon.item() == pytest.approx(64 * math.log(2))

    def test_standard_posterior_has_no_kl(self, rng):
        model = build_model(tiny_config(latent_kind="gaussian"), rng)
        _zero_last(model.encoder)
        terms = elbo_loss(model, rng.random((4, 8, 8, 1)), rng)
        assert terms.kl.item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_categories_have_no_kl(self, rng):
        model = build_model(tiny_config(), rng)
        _zero_last(model.encoder)
        assert elbo_loss(model, rng.random((4, 8, 8, 1)), rng).kl.item() == pytest.approx(0.0, abs=1e-12)

    def test_pixels_outside_unit_interval(self, rng):
        model = build_model(tiny_config(), rng)
        with pytest.raises(ObservationError):
            elbo_loss(model, np.full((2, 8, 8, 1), 1.5), rng)

    def test_wrong_image_size(self, rng):
        model = build_model(tiny_config(), rng)
        with pytest.raises(ShapeError):
            elbo_loss(model, np.zeros((2, 16, 16, 1)), rng)

    def test_eval_mode_is_deterministic(self, rng):
        model = build_model(tiny_config(), rng)
        x = rng.random((4, 8, 8, 1))
        a = elbo_loss(model, x, np.random.default_rng(1), mode="eval").negative_elbo.item()
        b = elbo_loss(model, x, np.random.default_rng(2), mode="eval").negative_elbo.item()
        assert a == b

    def test_encoder_gradient_against_finite_differences(self, rng):
        model = build_model(tiny_config(image_size=4, hidden=8, m=4), rng)
        x = rng.random((3, 4, 4, 1))
        noise = sample_gumbel((3, 2, 4), 1.0, rng)
        _assert_encoder_gradient(model, lambda: elbo_loss(model, x, None, noise=noise).negative_elbo)


class TestStGap:
    def test_one_hot_posterior_has_no_gap(self, rng):
        config = tiny_config()
        model = build_model(config, rng)
        last = _zero_last(model.encoder)
        last.bias.data[::config.m] = 1000.0
        assert st_gap(model, rng.random((6, 8, 8, 1)), rng) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_posterior_has_gap(self, rng):
        model = build_model(tiny_config(), rng)
        _zero_last(model.encoder)
        assert st_gap(model, rng.random((6, 8, 8, 1)), rng) > 0

    def test_seeded(self, rng):
        model = build_model(tiny_config(), rng)
        x = rng.random((6, 8, 8, 1))
        a = st_gap(model, x, np.random.default_rng(5), scale=1.0)
        b = st_gap(model, x, np.random.default_rng(5), scale=1.0)
        assert a == b

    def test_gaussian_rejected(self, rng):
        model = build_model(tiny_config(latent_kind="gaussian"), rng)
        with pytest.raises(LatentError):
            st_gap(model, np.zeros((2, 8, 8, 1)), rng)


class TestPermuteDims:
    def test_identical_rows_unchanged(self, rng):
        z = np.tile([0.1, 0.7, 0.3], (16, 1))
        np.testing.assert_array_equal(permute_dims(z, rng), z)

    def test_columns_keep_their_values(self, rng):
        z = rng.normal(size=(32, 3))
        out = permute_dims(z, rng)
        np.testing.assert_array_equal(np.sort(out, axis=0), np.sort(z, axis=0))
        np.testing.assert_allclose(out.sum(axis=0), z.sum(axis=0))

    def test_seeded(self, rng):
        z = rng.normal(size=(32, 3))
        a = permute_dims(z, np.random.default_rng(7))
        b = permute_dims(z, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)


class TestFactorObjective:
    def _setup(self, rng):
        model = build_model(tiny_config(), rng)
        disc = Discriminator(2, rng, width=8, depth=2)
        x = rng.random((4, 8, 8, 1))
        noise = sample_gumbel((4, 2, 8), 1.0, rng)
        return model, disc, x, noise

    def test_zero_gamma_is_the_elbo(self, rng):
        model, disc, x, noise = self._setup(rng)
        total, _, _ = factor_dvae_loss(model, disc, x, 0.0, rng, noise=noise)
        assert total.item() == elbo_loss(model, x, rng, noise=noise).negative_elbo.item()

    def test_equal_logits_have_no_tc(self, rng):
        model, disc, x, noise = self._setup(rng)
        _zero_last(disc.net)
        _, _, tc = factor_dvae_loss(model, disc, x, 10.0, rng, noise=noise)
        assert tc.item() == 0.0

    def test_unit_logit_gap(self, rng):
        model, disc, x, noise = self._setup(rng)
        last = _zero_last(disc.net)
        last.bias.data[:] = [1.0, 0.0]
        _, _, tc = factor_dvae_loss(model, disc, x, 10.0, rng, noise=noise)
        assert tc.item() == pytest.approx(10.0)

    def test_indistinguishable_batches(self, rng):
        disc = Discriminator(2, rng, width=8, depth=2)
        z = rng.random((16, 2))
        for _ in range(5):
            assert discriminator_step(disc, z, z.copy()) >= math.log(2) - 1e-12

    def test_separable_batches(self, rng):
        disc = Discriminator(2, rng, width=16, depth=2, lr=1e-2)
        loss = None
        for _ in range(300):
            real = 3.0 + 0.3 * rng.standard_normal((32, 2))
            fake = -3.0 + 0.3 * rng.standard_normal((32, 2))
            loss = discriminator_step(disc, real, fake)
        assert loss < 0.1

    def test_discriminator_is_seeded(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            disc = Discriminator(2, rng, width=8, depth=2)
            z = rng.random((8, 2))
            return [discriminator_step(disc, z, permute_dims(z, rng)) for _ in range(3)]

        assert run(4) == run(4)

    def test_objective_gradient_against_finite_differences(self, rng):
        model = build_model(tiny_config(image_size=4, hidden=8, m=4), rng)
        disc = Discriminator(2, rng, width=8, depth=2)
        x = rng.random((3, 4, 4, 1))
        noise = sample_gumbel((3, 2, 4), 1.0, rng)
        _assert_encoder_gradient(model, lambda: factor_dvae_loss(model, disc, x, 10.0, None, noise=noise)[0])

    def test_shape_mismatch(self, rng):
        disc = Discriminator(2, rng, width=8, depth=1)
        with pytest.raises(ShapeError):
            discriminator_step(disc, np.zeros((4, 2)), np.zeros((3, 2)))


class TestSemiSupervision:
    spec = FactorSpec((Factor("a", cardinality=2), Factor("b", cardinality=4)))

    def test_zero_omega_is_the_elbo(self, rng):
        model = build_model(tiny_config(), rng)
        x = rng.random((4, 8, 8, 1))
        factors = np.array([[1, 1], [2, 4], [1, 3], [2, 2]], dtype=float)
        total, terms, _ = semi_sup_loss(model, x, factors, self.spec, 0.0, rng)
        assert total.item() == terms.negative_elbo.item()

    def test_label_bins_hit_the_top_category(self):
        bins = label_bins(self.spec, [[2, 1], [1, 4]], 64)
        np.testing.assert_array_equal(bins, [[63, 0], [0, 63]])

    def test_bins_round_half_up(self):
        spec = FactorSpec((Factor("a", cardinality=3),))
        np.testing.assert_array_equal(label_bins(spec, [[2]], 4)[:, 0], [2])

    def test_masked_top_value_lands_on_the_last_active_category(self):
        spec = FactorSpec((Factor("a", cardinality=2),))
        bins = label_bins(spec, [[1], [2]], 64)[:, 0]
        np.testing.assert_array_equal(bins, [0, 63])
        assert category_mask(1, 64, [2])[0, bins].all()

    @pytest.mark.parametrize("m", [8, 64])
    def test_labels_agree_with_the_mask(self, m):
        for c in range(2, 9):
            spec = FactorSpec((Factor("a", cardinality=c),))
            bins = label_bins(spec, np.arange(1, c + 1)[:, None], m)[:, 0]
            np.testing.assert_array_equal(bins, active_categories(m, c) - 1)
            assert category_mask(1, m, [c])[0, bins].all()

    def test_supplied_base_replaces_the_elbo(self, rng):
        model = build_model(tiny_config(), rng)
        x = rng.random((2, 8, 8, 1))
        total, terms, sup = semi_sup_loss(model, x, [[1, 1], [2, 4]], self.spec, 2.0, rng, base=Tensor(3.0))
        assert terms is None
        assert total.item() == pytest.approx(3.0 + 2.0 * sup.item())

    def test_negative_omega(self, rng):
        model = build_model(tiny_config(), rng)
        with pytest.raises(ConfigError):
            semi_sup_loss(model, rng.random((1, 8, 8, 1)), [[1, 1]], self.spec, -1.0, rng)

    def test_objective_gradient_against_finite_differences(self, rng):
        model = build_model(tiny_config(image_size=4, hidden=8, m=4), rng)
        x = rng.random((3, 4, 4, 1))
        factors = np.array([[1, 2], [2, 4], [1, 3]], dtype=float)
        noise = sample_gumbel((3, 2, 4), 1.0, rng)

        def loss():
            base = elbo_loss(model, x, None, noise=noise).negative_elbo
            return semi_sup_loss(model, x, factors, self.spec, 5.0, None, masked=True, base=base)[0]

        _assert_encoder_gradient(model, loss)

    def test_matching_posterior_costs_nothing(self, rng):
        config = tiny_config()
        model = build_model(config, rng)
        last = _zero_last(model.encoder)
        last.bias.data[:config.m] = settings.MASK_LOGIT
        last.bias.data[0] = 0.0
        spec = FactorSpec((Factor("a", cardinality=2),))
        term = supervised_term(model, rng.random((3, 8, 8, 1)), np.ones((3, 1)), spec)
        assert term.item() == 0.0

    def test_out_of_range_label(self, rng):
        model = build_model(tiny_config(), rng)
        with pytest.raises(FactorError):
            supervised_term(model, rng.random((1, 8, 8, 1)), [[3, 1]], self.spec)

    def test_too_many_factors(self, rng):
        model = build_model(tiny_config(n=1), rng)
        with pytest.raises(FactorError):
            supervised_term(model, rng.random((1, 8, 8, 1)), [[1, 1]], self.spec)

    @pytest.mark.parametrize("rs", ["bce", "l2"])
    def test_gaussian_penalties(self, rng, rs):
        model = build_model(tiny_config(latent_kind="gaussian", gaussian_rs=rs), rng)
        term = supervised_term(model, rng.random((3, 8, 8, 1)), [[1, 1], [2, 3], [1, 4]], self.spec)
        assert np.isfinite(term.item())

    def test_masked_loss_uses_label_cardinalities(self, rng):
        model = build_model(tiny_config(), rng)
        x = rng.random((2, 8, 8, 1))
        _, terms, _ = semi_sup_loss(model, x, [[1, 1], [2, 4]], self.spec, 1.0, rng, masked=True)
        probs = np.exp(terms.params.log_alpha.data - terms.params.log_alpha.data.max(axis=-1, keepdims=True))
        inactive = ~category_mask(2, 8, [2, 4])
        assert not probs[:, inactive].any()


class TestTrain:
    def test_loss_goes_down(self):
        config = tiny_config(steps=200, hidden=32, batch_size=16)
        _, log = train(config, Circles(size=8))
        total = (log["recon"] + log["kl"]).rolling(20).mean().dropna()
        assert total.iloc[-1] < total.iloc[0]

    def test_zero_steps_returns_the_initial_model(self):
        config = tiny_config(steps=0)
        model, log = train(config, Circles(size=8))
        initial = build_model(tiny_config(steps=0), np.random.default_rng(config.seed).spawn(6)[0])
        assert model.steps == 0 and log.empty
        for name, p in initial.parameters().items():
            np.testing.assert_array_equal(model.parameters()[name].data, p.data)

    def test_same_seed_same_model(self):
        a, log_a = train(tiny_config(), Circles(size=8))
        b, log_b = train(tiny_config(), Circles(size=8))
        assert encode_arrays(a.arrays()) == encode_arrays(b.arrays())
        assert log_a.equals(log_b)

    def test_losses_reported(self):
        model, log = train(tiny_config(steps=3), Circles(size=8))
        assert set(model.losses) >= {"recon", "kl", "neg_elbo", "st_gap"}
        assert list(log["step"]) == [1, 2, 3]

    def test_factor_objective_logs_tc(self):
        _, log = train(tiny_config(objective="factor", gamma=10.0, steps=3), Circles(size=8))
        assert (log["tc"] != 0).all()

    def test_semi_objective_reports_validation_term(self):
        config = tiny_config(objective="semi", omega=10.0, num_labels=20, steps=3, masked=True)
        model, _ = train(config, GridWorld({"x": 4, "y": 4}, size=8))
        assert np.isfinite(model.losses["sup_val"])
        assert model.config.mask_sizes == [4, 4]
        assert model.mask.sum(axis=1).tolist() == [4, 4]

    def test_masked_run_leaves_the_callers_config_alone(self):
        config = tiny_config(objective="semi", omega=10.0, num_labels=20, steps=1, masked=True)
        first, _ = train(config, GridWorld({"x": 4, "y": 4}, size=8))
        second, _ = train(config, GridWorld({"x": 3, "y": 5}, size=8))
        assert config.mask_sizes is None
        assert first.config.mask_sizes == [4, 4]
        assert second.config.mask_sizes == [3, 5]

    def test_dataset_must_fit(self):
        with pytest.raises(ConfigError):
            train(tiny_config(), Circles(size=16))

    def test_divergence(self):
        with pytest.raises(DivergenceError):
            train(tiny_config(lr=float("inf"), steps=5), Circles(size=8))


class TestCheckpoint:
    def test_round_trip_keeps_representation(self, rng, tmp_path):
        model = build_model(tiny_config(), rng)
        model.save(tmp_path / "run")
        loaded = TrainedModel.load(tmp_path / "run")
        x = rng.random((5, 8, 8, 1))
        np.testing.assert_array_equal(loaded.representation(x), model.representation(x))
        assert loaded.config == model.config
