from pathlib import Path

import numpy as np
import pytest

from drift_adapt import tensor as T
from drift_adapt.model import (BatchNorm2d, Conv2d, NormMode, SegModel, WeightFileError, bn_apply, build_model,
                               dump_weights, forward, load_weights, parse_weights, save_weights)
from drift_adapt.train import _stack

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def tiny():
    return build_model(num_classes=3, widths=(4, 8, 8, 8), seed=1)


class TestBnApply:
    def test_normalizes_with_batch_stats(self):
        x = np.random.default_rng(0).normal(2.0, 3.0, size=(4, 2, 8, 8)).astype(np.float32)
        mean, var = T.channel_stats(x)
        out = bn_apply(x, mean, var, np.ones(2), np.zeros(2)).astype(np.float64)
        m, v = T.channel_stats(out)
        np.testing.assert_allclose(m, 0, atol=1e-5)
        np.testing.assert_allclose(v, 1, atol=1e-3)

    def test_zero_scale_gives_shift(self):
        x = np.random.default_rng(1).normal(size=(1, 2, 3, 3))
        out = bn_apply(x, [0.0, 1.0], [1.0, 2.0], [0.0, 0.0], [0.5, -2.0])
        assert np.all(out[:, 0] == np.float32(0.5)) and np.all(out[:, 1] == np.float32(-2.0))

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        mean, var = rng.normal(size=3), rng.uniform(0.1, 2.0, 3)
        scale, shift = rng.normal(size=3), rng.normal(size=3)
        out = bn_apply(x, mean, var, scale, shift)
        for idx in np.ndindex(x.shape):
            c = idx[1]
            want = scale[c] * (float(x[idx]) - mean[c]) / np.sqrt(var[c] + 1e-5) + shift[c]
            assert abs(out[idx] - want) <= 1e-6 * max(1.0, abs(want))

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            bn_apply(np.zeros((1, 1, 2, 2)), [0.0], [-1.0], [1.0], [0.0])

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            bn_apply(np.zeros((1, 2, 2, 2)), [0.0], [1.0], [1.0], [0.0])


class TestModelStructure:
    def test_default_architecture(self):
        m = build_model()
        assert m.total_stride == 4
        assert m.feature_dim == 64
        assert len(m.bn_layers) == 5
        assert m.num_classes == 6

    def test_bn_layer_validation(self):
        with pytest.raises(ValueError, match="stored_var"):
            BatchNorm2d(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -1.0]))
        with pytest.raises(ValueError, match="scale"):
            BatchNorm2d(np.ones(3), np.zeros(2), np.zeros(2), np.ones(2))

    def test_classifier_must_be_last(self):
        head = Conv2d(np.zeros((2, 3, 1, 1)), np.zeros(2), classifier=True)
        tail = Conv2d(np.zeros((2, 2, 3, 3)), np.zeros(2), pad=1)
        with pytest.raises(ValueError, match="last parametric"):
            SegModel([head, tail], 2)
        with pytest.raises(ValueError, match="exactly one"):
            SegModel([tail], 2)

    def test_indivisible_input_rejected(self, tiny):
        with pytest.raises(T.ShapeError, match="divisible"):
            forward(tiny, np.zeros((1, 3, 10, 12)))


class TestForward:
    def setup_method(self):
        self.x = np.random.default_rng(3).random((2, 3, 16, 16)).astype(np.float32)

    @pytest.mark.parametrize("mode", list(NormMode))
    def test_probabilities_normalized(self, tiny, mode):
        override = tiny.stored_stats() if mode is NormMode.OVERRIDE else None
        out = forward(tiny, self.x, mode, override)
        assert out.probs.shape == (2, 3, 16, 16)
        assert out.features.shape == (2, 8, 4, 4)
        np.testing.assert_allclose(out.probs.sum(axis=1), 1, atol=1e-5)

    def test_stored_is_pure(self, tiny):
        a = forward(tiny, self.x).probs
        b = forward(tiny, self.x).probs
        assert a.tobytes() == b.tobytes()

    def test_override_with_stored_equals_stored(self, tiny):
        a = forward(tiny, self.x, NormMode.STORED).probs
        b = forward(tiny, self.x, NormMode.OVERRIDE, tiny.stored_stats()).probs
        assert a.tobytes() == b.tobytes()

    def test_batch_mode_centers_each_bn_output(self, tiny):
        m = tiny.copy()
        for layer in m.bn_layers:
            layer.scale = np.ones_like(layer.scale)
            layer.shift = np.zeros_like(layer.shift)
        seen = []

        def hook(i, bmean, bvar):
            seen.append(i)
            return bmean, bvar

        forward(m, self.x, NormMode.OVERRIDE, hook)
        assert seen == list(range(len(m.bn_layers)))
        # recompute every BN output directly and check its channel means
        x = self.x
        for layer in m.layers[:m.classifier_index]:
            if isinstance(layer, BatchNorm2d):
                mean, var = T.channel_stats(x)
                x = bn_apply(x, mean, var, layer.scale, layer.shift)
                np.testing.assert_allclose(T.channel_stats(x)[0], 0, atol=1e-4)
            elif isinstance(layer, Conv2d):
                x = layer(x)
            else:
                x = T.relu(x)

    def test_feature_tap_is_classifier_input(self, tiny):
        out = forward(tiny, self.x)
        head = tiny.layers[tiny.classifier_index]
        assert head(out.features).tobytes() == out.logits_low.tobytes()

    def test_override_length_checked(self, tiny):
        with pytest.raises(ValueError, match="BN layers"):
            forward(tiny, self.x, NormMode.OVERRIDE, tiny.stored_stats()[:2])

    def test_batch_independence_of_stored_mode(self, tiny):
        whole = forward(tiny, self.x).probs
        single = forward(tiny, self.x[1:]).probs
        assert whole[1:].tobytes() == single.tobytes()


class TestWeightFiles:
    def test_round_trip_bytes(self, tiny, tmp_path):
        save_weights(tiny, tmp_path / "a.dseg")
        again = load_weights(tmp_path / "a.dseg")
        save_weights(again, tmp_path / "b.dseg")
        assert (tmp_path / "a.dseg").read_bytes() == (tmp_path / "b.dseg").read_bytes()
        x = np.random.default_rng(4).random((1, 3, 8, 8))
        assert forward(again, x).probs.tobytes() == forward(tiny, x).probs.tobytes()

    def test_truncated_names_lengths(self, tiny):
        raw = dump_weights(tiny)
        with pytest.raises(WeightFileError, match=r"expected at least \d+ bytes, file has \d+"):
            parse_weights(raw[:-7])

    def test_bad_magic(self, tiny):
        with pytest.raises(WeightFileError, match="magic"):
            parse_weights(b"NOPE" + dump_weights(tiny)[4:])

    def test_trailing_bytes(self, tiny):
        with pytest.raises(WeightFileError):
            parse_weights(dump_weights(tiny) + b"\0")

    def test_golden_fixture(self):
        model = load_weights(FIXTURES / "tiny_model.dseg")
        x = T.read_tensor(FIXTURES / "tiny_input.dtns")
        want = T.read_tensor(FIXTURES / "tiny_output.dtns")
        np.testing.assert_allclose(forward(model, x).probs, want, atol=1e-6, rtol=0)


class TestTrainedSource:
    def test_stored_mode_reproduces_training_accuracy(self, source, dataset):
        model, log, _ = source
        correct = total = 0
        scenes = dataset["train"]
        for start in range(0, len(scenes), 8):
            x, y = _stack(scenes, range(start, min(start + 8, len(scenes))))
            correct += int((forward(model, x).probs.argmax(axis=1) == y).sum())
            total += y.size
        assert abs(correct / total - log.metrics["train_pixel_accuracy"]) <= 0.01

    def test_batch_stats_over_training_set_match_stored(self, source, dataset):
        model, _, _ = source
        x = np.concatenate([s.image for s in dataset["train"]])
        out = forward(model, x, NormMode.BATCH)
        for (bm, bv), layer in zip(out.batch_stats, model.bn_layers):
            sm, sv = layer.stored_mean.astype(np.float64), layer.stored_var.astype(np.float64)
            # layer-wise relative error; mean error is scaled by the channel spread
            assert np.linalg.norm(bm - sm) <= 0.05 * np.linalg.norm(np.sqrt(sv))
            assert np.linalg.norm(bv - sv) <= 0.05 * np.linalg.norm(sv)
