"""Tests for loss terms, Adam, the lr schedule, config parsing and training."""

import numpy as np
import pytest

from orinorm import autodiff as ad
from orinorm import geometry, training
from orinorm.autodiff import Tensor
from orinorm.errors import NonFiniteGradient
from orinorm.model import ModelConfig, init_params
from orinorm.training import (AdamState, TrainConfig, adam_step,
                              coplanarity_target, loss_mse, loss_sgn, loss_sin,
                              loss_tau, lr_at, sign_labels, total_loss)

TINY = ModelConfig(patch_size=16, global_size=16, feature_dim=16, heads=4)


class TestLossSin:
    def test_zero_on_exact_match(self):
        n = np.array([[0.0, 0.0, 1.0]])
        assert float(loss_sin(Tensor(n), n).data) < 1e-11

    def test_flip_invariant(self):
        rng = np.random.default_rng(0)
        pred = rng.normal(size=(4, 3))
        pred /= np.linalg.norm(pred, axis=1, keepdims=True)
        gt = rng.normal(size=(4, 3))
        gt /= np.linalg.norm(gt, axis=1, keepdims=True)
        a = float(loss_sin(Tensor(pred), gt).data)
        b = float(loss_sin(Tensor(-pred), gt).data)
        assert abs(a - b) < 1e-12

    def test_orthogonal_is_one(self):
        pred = np.array([[1.0, 0.0, 0.0]])
        gt = np.array([[0.0, 1.0, 0.0]])
        assert abs(float(loss_sin(Tensor(pred), gt).data) - 1.0) < 1e-9

    def test_equals_sine_of_angle(self):
        for deg in (10.0, 30.0, 60.0):
            rad = np.radians(deg)
            pred = np.array([[np.cos(rad), np.sin(rad), 0.0]])
            gt = np.array([[1.0, 0.0, 0.0]])
            assert abs(float(loss_sin(Tensor(pred), gt).data) - np.sin(rad)) < 1e-9

    def test_gradient(self):
        rng = np.random.default_rng(1)
        d = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        gt = rng.normal(size=(3, 3))
        gt /= np.linalg.norm(gt, axis=1, keepdims=True)
        assert ad.grad_check(lambda: loss_sin(d, gt), [d]) < 1e-4


class TestLossSgn:
    def test_logit_zero_label_one_is_ln2(self):
        assert abs(float(loss_sgn(Tensor([0.0]), [1.0]).data) - np.log(2.0)) < 1e-12

    def test_confident_correct_is_small(self):
        assert float(loss_sgn(Tensor([20.0]), [1.0]).data) < 1e-8
        assert float(loss_sgn(Tensor([-20.0]), [0.0]).data) < 1e-8

    def test_confident_wrong_is_large(self):
        assert float(loss_sgn(Tensor([-20.0]), [1.0]).data) > 19.0

    def test_extreme_logits_finite(self):
        out = loss_sgn(Tensor([1e4, -1e4]), [0.0, 1.0])
        assert np.isfinite(out.data)

    def test_gradient(self):
        s = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
        y = np.array([1.0, 0.0, 1.0])
        assert ad.grad_check(lambda: loss_sgn(s, y), [s]) < 1e-4


class TestLossMse:
    def test_zero_on_match(self):
        gt = np.random.default_rng(2).normal(size=(1, 5, 3))
        gates = np.full((1, 5, 1), 0.7)
        assert float(loss_mse(Tensor(gt), gt, Tensor(gates)).data) == 0.0

    def test_gates_scale_error(self):
        gt = np.zeros((1, 4, 3))
        pred = np.ones((1, 4, 3))           # squared diff 3 per point
        half = float(loss_mse(Tensor(pred), gt, Tensor(np.full((1, 4, 1), 0.5))).data)
        full = float(loss_mse(Tensor(pred), gt, Tensor(np.ones((1, 4, 1)))).data)
        assert abs(full - 3.0) < 1e-12
        assert abs(half - 1.5) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(3)
        pred = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        gt = rng.normal(size=(2, 4, 3))
        gates = rng.uniform(0.1, 0.9, size=(2, 4, 1))
        assert ad.grad_check(lambda: loss_mse(pred, gt, Tensor(gates)), [pred]) < 1e-4


class TestCoplanarityTarget:
    def test_point_on_plane_gets_one(self):
        coords = np.array([[[1.0, 0.0, 0.0], [0.0, 0.0, 0.5]]])
        target = coplanarity_target(coords, np.array([[0.0, 0.0, 1.0]]))
        assert target[0, 0] == 1.0            # in-plane point
        assert target[0, 1] < 1.0             # off-plane point

    def test_floor_on_xi(self):
        # single tiny offset: xi floors at 0.05^2 = 0.0025
        coords = np.array([[[0.0, 0.0, 1e-4]]])
        target = coplanarity_target(coords, np.array([[0.0, 0.0, 1.0]]))
        expected = np.exp(-(1e-4 ** 2) / 0.0025 ** 2)
        assert abs(target[0, 0] - expected) < 1e-12

    def test_adaptive_xi_above_floor(self):
        # large offsets push xi to 0.3 * mean(proj^2)
        coords = np.array([[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]])
        target = coplanarity_target(coords, np.array([[0.0, 0.0, 1.0]]))
        xi = 0.3 * 1.0
        expected = np.exp(-1.0 / xi ** 2)
        np.testing.assert_allclose(target[0], expected)

    def test_in_unit_interval(self):
        rng = np.random.default_rng(4)
        coords = rng.normal(size=(3, 20, 3))
        gt = rng.normal(size=(3, 3))
        gt /= np.linalg.norm(gt, axis=1, keepdims=True)
        target = coplanarity_target(coords, gt)
        assert np.all(target > 0) and np.all(target <= 1)


class TestTotalLoss:
    def test_weighted_sum_fixture(self):
        # loss weights 0.1 + 0.1 + 0.5 + 1.0 sum to 1.7: unit component
        # losses must combine to exactly that total
        cfg = TrainConfig()
        weights = (cfg.lambda_sin, cfg.lambda_sgn, cfg.lambda_mse, cfg.lambda_tau)
        assert sum(weights) == pytest.approx(1.7)

    def test_components_match_total(self):
        rng = np.random.default_rng(5)
        cfg = TrainConfig()
        direction = Tensor(rng.normal(size=(2, 3)))
        direction = ad.normalize(direction)
        sign_logit = Tensor(rng.normal(size=2))
        gates = Tensor(rng.uniform(0.1, 0.9, size=(2, 4, 1)))
        nbr = Tensor(rng.normal(size=(2, 4, 3)))
        gt_q = rng.normal(size=(2, 3))
        gt_q /= np.linalg.norm(gt_q, axis=1, keepdims=True)
        gt_nbr = rng.normal(size=(2, 4, 3))
        coords = rng.normal(size=(2, 4, 3))
        labels = sign_labels(direction.data, gt_q)
        total, parts = total_loss(direction, sign_logit, gates, nbr,
                                  gt_q, gt_nbr, coords, labels, cfg)
        expected = (cfg.lambda_sin * parts["sin"] + cfg.lambda_sgn * parts["sgn"]
                    + cfg.lambda_mse * parts["mse"] + cfg.lambda_tau * parts["tau"])
        assert abs(float(total.data) - expected) < 1e-12


class TestSignLabels:
    def test_agreement(self):
        d = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
        gt = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        np.testing.assert_array_equal(sign_labels(d, gt), [1.0, 0.0])


class TestAdam:
    def test_converges_on_quadratic(self):
        from orinorm.model import ModelParams
        x = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        params = ModelParams({"x": x})
        state = AdamState()
        for _ in range(2000):
            ad.zero_grads([x])
            loss = ad.sum_reduce(ad.square(x))
            ad.backward(loss)
            adam_step(params, state, 0.05)
        assert np.all(np.abs(x.data) < 1e-3)

    def test_first_step_size_is_lr(self):
        # bias correction makes the first Adam step have magnitude ~lr
        from orinorm.model import ModelParams
        x = Tensor(np.array([10.0]), requires_grad=True)
        params = ModelParams({"x": x})
        adam = AdamState()
        ad.backward(ad.sum_reduce(ad.square(x)))
        adam_step(params, adam, 0.01)
        assert abs(x.data[0] - (10.0 - 0.01)) < 1e-6

    def test_non_finite_gradient_raises(self):
        from orinorm.model import ModelParams
        x = Tensor(np.array([1.0]), requires_grad=True)
        x.grad = np.array([np.nan])
        with pytest.raises(NonFiniteGradient):
            adam_step(ModelParams({"x": x}), AdamState(), 0.01)


class TestLrSchedule:
    def test_fixture_values(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == pytest.approx(9e-4)
        assert lr_at(399, cfg) == pytest.approx(9e-4)
        assert lr_at(400, cfg) == pytest.approx(1.8e-4)
        assert lr_at(700, cfg) == pytest.approx(3.6e-5)
        assert lr_at(800, cfg) == pytest.approx(7.2e-6)

    def test_decay_is_one_fifth(self):
        cfg = TrainConfig()
        assert cfg.decay_factor == pytest.approx(0.2)


class TestFullModelGradient:
    def test_forward_plus_loss_matches_finite_differences(self):
        """Analytic gradients of the entire network and objective against
        central differences over every parameter entry."""
        from orinorm.model import forward

        cfg = ModelConfig(patch_size=8, global_size=8, feature_dim=8, heads=4)
        params = init_params(cfg, 0)
        rng = np.random.default_rng(0)
        patch = rng.normal(size=(1, cfg.patch_size, 3)) * 0.3
        patch[:, 0] = 0.0
        global_pts = rng.normal(size=(1, cfg.global_size, 3)) * 0.3
        gt_q = rng.normal(size=(1, 3))
        gt_q /= np.linalg.norm(gt_q)
        gt_nbr = rng.normal(size=(1, cfg.retained_points, 3))
        gt_nbr /= np.linalg.norm(gt_nbr, axis=-1, keepdims=True)
        retained = patch[:, :cfg.retained_points]
        train_cfg = TrainConfig()

        def build():
            direction, sign_logit, gates, nbr = forward(params, cfg, patch, global_pts)
            labels = sign_labels(direction.data, gt_q)
            loss, _ = total_loss(direction, sign_logit, gates, nbr,
                                 gt_q, gt_nbr, retained, labels, train_cfg)
            return loss

        assert ad.grad_check(build, params.values(), h=1e-5) < 1e-3


class TestTrainLoop:
    def _dataset(self):
        return [geometry.generate_shape("sphere", 200, 0),
                geometry.generate_shape("box", 200, 1)]

    def _cfg(self):
        return TrainConfig(epochs=2, samples_per_epoch=8, batch_size=4, seed=3)

    def test_runs_and_reports(self):
        params, history = training.train(self._dataset(), TINY, self._cfg())
        assert len(history) == 2
        assert {"epoch", "lr", "mean_loss", "mean_sin", "mean_sgn",
                "mean_mse", "mean_tau"} <= set(history[0])
        params.assert_finite()

    def test_deterministic_given_seed(self):
        _, h1 = training.train(self._dataset(), TINY, self._cfg())
        _, h2 = training.train(self._dataset(), TINY, self._cfg())
        assert h1 == h2

    def test_missing_normals_rejected(self):
        cloud = geometry.PointCloud(points=np.random.default_rng(6).normal(size=(50, 3)))
        with pytest.raises(ValueError):
            training.train([cloud], TINY, self._cfg())

    def test_history_csv(self, tmp_path):
        _, history = training.train(self._dataset(), TINY, self._cfg())
        out = tmp_path / "history.csv"
        training.write_history_csv(history, out)
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("epoch,lr,mean_loss")
        assert len(lines) == 3


class TestConfigParsing:
    def test_round_trip(self, tmp_path):
        text = """
        # training setup
        lr = 0.0009
        epochs = 2
        decay_epochs = 400,600,800
        patch_size = 16
        global_size = 16
        feature_dim = 16
        heads = 4
        use_attention = false
        """
        path = tmp_path / "cfg.txt"
        path.write_text(text)
        model_cfg, train_cfg = training.configs_from_file(path)
        assert model_cfg.patch_size == 16
        assert model_cfg.use_attention is False
        assert train_cfg.lr == pytest.approx(9e-4)
        assert train_cfg.decay_epochs == (400, 600, 800)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("banana = 3\n")
        with pytest.raises(ValueError):
            training.configs_from_file(path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("just some words\n")
        with pytest.raises(ValueError):
            training.configs_from_file(path)

    def test_negative_lr_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
