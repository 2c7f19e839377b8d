import numpy as np
import pytest

from drift_adapt.model import Conv2d, SegModel, build_model, dump_weights
from drift_adapt.synth import Scene, make_dataset
from drift_adapt.train import (TrainConfig, TrainingError, _params64, backward_train, cross_entropy,
                               forward_train, grad_check, quadratic_loss, train_source)


@pytest.fixture(scope="module")
def small_set():
    return make_dataset(3, (("train", 16),), h=32, w=32)["train"]


def linear_model(k=3, c=4, seed=0):
    rng = np.random.default_rng(seed)
    return SegModel([Conv2d(rng.normal(size=(k, c, 1, 1)), rng.normal(size=k), classifier=True)], k)


class TestLosses:
    def test_cross_entropy_uniform(self):
        loss, grad = cross_entropy(np.zeros((1, 4, 2, 2)), np.zeros((1, 2, 2), int))
        assert loss == pytest.approx(np.log(4))
        np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-12)

    def test_quadratic_zero_at_one_hot(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 1] = 1.0
        loss, grad = quadratic_loss(logits, np.ones((1, 1, 1), int))
        assert loss == 0.0 and not grad.any()


class TestGradCheck:
    def test_linear_quadratic_is_exact(self):
        x = np.random.default_rng(1).normal(size=(2, 4, 3, 3))
        labels = np.random.default_rng(2).integers(0, 3, size=(2, 3, 3))
        assert grad_check(linear_model(), x, labels, loss="quadratic") <= 1e-6

    def test_full_toy_model(self):
        model = build_model(num_classes=3, widths=(4, 6, 6, 6), seed=3)
        x = np.random.default_rng(4).random((2, 3, 8, 8))
        labels = np.random.default_rng(5).integers(0, 3, size=(2, 8, 8))
        assert grad_check(model, x, labels) <= 1e-2

    def test_symmetric_bias_gradients(self):
        model = linear_model(k=4)
        model.layers[0].bias[:] = 0.0
        logits, tape, _ = forward_train(model, _params64(model), np.zeros((1, 4, 3, 3)))
        _, dlogits = cross_entropy(logits, np.zeros((1, 3, 3), int))
        _, gbias = backward_train(tape, dlogits)
        assert gbias[1] == pytest.approx(gbias[2], abs=1e-15)
        assert gbias[2] == pytest.approx(gbias[3], abs=1e-15)
        assert gbias[0] == pytest.approx(-3 * gbias[1], abs=1e-12)


class TestTrainSource:
    def test_zero_learning_rate_keeps_weights(self, small_set):
        init = build_model(seed=2)
        model, _ = train_source(small_set, init, TrainConfig(epochs=1, learning_rate=0.0, bn_train_momentum=0.0))
        assert dump_weights(model) == dump_weights(init)

    def test_input_model_not_mutated(self, small_set):
        init = build_model(seed=2)
        before = dump_weights(init)
        train_source(small_set[:8], init, TrainConfig(epochs=1))
        assert dump_weights(init) == before

    def test_overfit_single_batch(self, small_set):
        model, log = train_source(small_set[:8], build_model(), TrainConfig(epochs=200, batch_size=8))
        assert log.metrics["train_pixel_accuracy"] >= 0.95

    def test_first_epoch_descends(self, small_set):
        _, log = train_source(small_set, build_model(), TrainConfig(epochs=1))
        assert log.epoch_loss[0] < log.init_loss

    def test_deterministic(self, small_set):
        a, log_a = train_source(small_set, build_model(), TrainConfig(epochs=2))
        b, log_b = train_source(small_set, build_model(), TrainConfig(epochs=2))
        assert dump_weights(a) == dump_weights(b)
        assert log_a.to_json() == log_b.to_json()

    def test_stored_stats_positive(self, small_set):
        model, _ = train_source(small_set, build_model(), TrainConfig(epochs=1))
        for layer in model.bn_layers:
            assert np.all(np.isfinite(layer.stored_mean)) and np.all(layer.stored_var > 0)

    def test_nan_loss_aborts_with_location(self, small_set):
        bad = [Scene(s.image.copy(), s.mask) for s in small_set]
        bad[5].image[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingError, match=r"epoch 0, batch \d"):
            train_source(bad, build_model(), TrainConfig(epochs=1))

    def test_bad_labels_rejected(self, small_set):
        with pytest.raises(ValueError, match="labels outside"):
            train_source(small_set, build_model(num_classes=2), TrainConfig(epochs=1))

    @pytest.mark.parametrize("kwargs", [{"learning_rate": -1.0}, {"batch_size": 0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


def test_recorded_clean_miou(source):
    _, log, _ = source
    assert log.metrics["test_miou"] >= 0.85
    assert log.epoch_loss[-1] < log.epoch_loss[0]
