"""Loss, SGD stepping, full training runs, and k-fold partitioning."""

import numpy as np
import numpy.testing as npt
import pytest

from cbirnet.data import Sample, generate_synthetic_corpus, split_dataset
from cbirnet.errors import ConfigurationError, InputError, TrainingDiverged
from cbirnet.network import (
    ConvSpec,
    FCSpec,
    FullyConnected,
    LogSoftmaxSpec,
    MaxPoolSpec,
    Network,
    NetworkSpec,
    ReLUSpec,
)
from cbirnet.training import (
    TrainConfig,
    TrainReport,
    k_fold_cross_validate,
    nll_grad,
    nll_loss,
    sgd_step,
    stratified_folds,
    train,
)

from conftest import numeric_gradient, relative_error


def tiny_spec(num_classes=3, size=16):
    """A small but complete topology: conv, pool, two FCs, log-softmax."""
    return NetworkSpec(
        input_shape=(1, size, size),
        layers=(
            ConvSpec(4, 3, 3, stride=2, padding=1, bias_init=0.0),
            ReLUSpec(),
            MaxPoolSpec(window=2, stride=2),
            FCSpec(16, bias_init=1.0),
            ReLUSpec(),
            FCSpec(num_classes, bias_init=0.0),
            LogSoftmaxSpec(num_classes=num_classes),
        ))


def tiny_corpus(num_classes=3, per_class=10, size=16, seed=0):
    samples, names = generate_synthetic_corpus(num_classes, per_class, size,
                                               rng_seed=seed)
    return samples, names


class TestNllLoss:
    def test_uniform_over_24_classes(self):
        log_probs = np.full(24, -np.log(24.0))
        assert nll_loss(log_probs, 5) == pytest.approx(np.log(24.0))

    def test_certain_prediction_zero_loss(self):
        log_probs = np.full(4, -np.inf)
        log_probs[2] = 0.0
        assert nll_loss(log_probs, 2) == 0.0

    def test_gradient_minus_one_at_label(self):
        g = nll_grad(np.zeros(5), 3)
        npt.assert_array_equal(g, [0, 0, 0, -1, 0])

    def test_label_out_of_range_rejected(self):
        with pytest.raises(InputError):
            nll_loss(np.zeros(4), 4)
        with pytest.raises(InputError):
            nll_grad(np.zeros(4), -1)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 1e-4
        assert cfg.max_epochs == 30

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(learning_rate=-1e-4)
        with pytest.raises(ConfigurationError):
            TrainConfig(max_epochs=0)


class TestSgdStep:
    def make_sample(self, size=16, label=0, seed=0):
        img = np.random.default_rng(seed).random((1, size, size))
        return Sample(image=img, label=label, source_id="x")

    def test_zero_rate_leaves_parameters_bit_identical(self):
        net = Network.from_spec(tiny_spec())
        net.initialize(0)
        net.seed_dropout(0)
        before = [v.copy() for v, _ in net.parameters()]
        cfg = TrainConfig(learning_rate=0.0, max_epochs=1)
        sgd_step(net, self.make_sample(), cfg)
        for old, (new, _) in zip(before, net.parameters()):
            npt.assert_array_equal(old, new)

    def test_hand_traced_linear_step(self):
        # One pixel into a 2-class head: z_i = w_i * x + b_i. With x = 1,
        # w = (0.3, -0.2), b = 0, label 0, softmax p_i = e^{z_i}/sum, the
        # update is w_i -= lr * (p_i - [i == 0]) * x.
        spec = NetworkSpec(input_shape=(1, 1, 1),
                           layers=(FCSpec(2), LogSoftmaxSpec(num_classes=2)))
        net = Network.from_spec(spec)
        fc = net.layers[0]
        fc.weights[:] = [[0.3], [-0.2]]
        fc.biases[:] = 0.0
        z = np.array([0.3, -0.2])
        p = np.exp(z) / np.exp(z).sum()
        lr = 0.1
        expect_w = np.array([[0.3 - lr * (p[0] - 1.0)],
                             [-0.2 - lr * p[1]]])
        expect_b = np.array([-lr * (p[0] - 1.0), -lr * p[1]])
        sample = Sample(image=np.ones((1, 1, 1)), label=0, source_id="x")
        loss = sgd_step(net, sample, TrainConfig(learning_rate=lr))
        assert loss == pytest.approx(-np.log(p[0]))
        npt.assert_allclose(fc.weights, expect_w, rtol=1e-12)
        npt.assert_allclose(fc.biases, expect_b, rtol=1e-12)

    def test_two_steps_descend_on_fixed_sample(self):
        net = Network.from_spec(tiny_spec())
        net.initialize(1)
        net.seed_dropout(1)
        sample = self.make_sample(seed=3, label=1)
        cfg = TrainConfig(learning_rate=1e-4)
        first = sgd_step(net, sample, cfg)
        second = sgd_step(net, sample, cfg)
        assert second < first

    def test_nonfinite_loss_aborts(self):
        net = Network.from_spec(tiny_spec())
        net.initialize(0)
        net.seed_dropout(0)
        fc = [l for l in net.layers if isinstance(l, FullyConnected)][0]
        fc.weights[0, 0] = np.inf
        with np.errstate(invalid="ignore"):
            with pytest.raises(TrainingDiverged):
                sgd_step(net, self.make_sample(), TrainConfig())


class TestTrain:
    def run_tiny(self, epochs=3, seed=0, lr=0.05, per_class=10):
        samples, _ = tiny_corpus(per_class=per_class)
        net = Network.from_spec(tiny_spec())
        net.initialize(0)
        cfg = TrainConfig(learning_rate=lr, max_epochs=epochs, rng_seed=seed)
        return net, train(net, samples, cfg)

    def test_report_shape_and_finiteness(self):
        _, report = self.run_tiny(epochs=3)
        assert len(report.epoch_losses) == 3
        assert all(np.isfinite(l) and l >= 0 for l in report.epoch_losses)
        assert 0.0 <= report.final_train_error <= 1.0

    def test_loss_decreases(self):
        _, report = self.run_tiny(epochs=5)
        assert report.epoch_losses[-1] < report.epoch_losses[0]

    def test_update_count(self):
        _, report = self.run_tiny(epochs=2, per_class=11)
        assert report.num_updates == 2 * 33

    def test_single_epoch_one_update_per_sample(self):
        _, report = self.run_tiny(epochs=1)
        assert report.num_updates == 30

    def test_same_seed_identical_reports_and_parameters(self):
        net_a, rep_a = self.run_tiny(epochs=2, seed=7)
        net_b, rep_b = self.run_tiny(epochs=2, seed=7)
        assert rep_a == rep_b  # wall-clock excluded from equality
        for (va, _), (vb, _) in zip(net_a.parameters(), net_b.parameters()):
            npt.assert_array_equal(va, vb)

    def test_different_seed_different_trajectory(self):
        _, rep_a = self.run_tiny(epochs=2, seed=1)
        _, rep_b = self.run_tiny(epochs=2, seed=2)
        assert rep_a.epoch_losses != rep_b.epoch_losses

    def test_zero_rate_many_epochs_bit_identical(self):
        samples, _ = tiny_corpus()
        net = Network.from_spec(tiny_spec())
        net.initialize(3)
        before = [v.copy() for v, _ in net.parameters()]
        train(net, samples, TrainConfig(learning_rate=0.0, max_epochs=3))
        for old, (new, _) in zip(before, net.parameters()):
            npt.assert_array_equal(old, new)

    def test_empty_split_rejected(self):
        net = Network.from_spec(tiny_spec())
        with pytest.raises(InputError):
            train(net, [], TrainConfig())

    def test_tsv_round_trip(self):
        _, report = self.run_tiny(epochs=2)
        lines = report.to_tsv().splitlines()
        assert lines[0] == "epoch\tmean_loss\tseconds"
        assert len(lines) == 3
        for i, line in enumerate(lines[1:], start=1):
            epoch, loss, _ = line.split("\t")
            assert int(epoch) == i
            assert float(loss) == report.epoch_losses[i - 1]


class TestEndToEndGradient:
    def test_network_gradient_matches_finite_differences(self):
        # Whole-net check through conv, pool, FCs, and the loss; dropout
        # is absent from the tiny topology so eval and train agree.
        net = Network.from_spec(tiny_spec(size=8))
        net.initialize(0)
        x = np.random.default_rng(5).random((1, 8, 8))
        label = 2
        net.zero_grads()
        log_probs = net.forward(x, train=True)
        net.backward(nll_grad(log_probs, label))

        rng = np.random.default_rng(6)
        worst = 0.0
        for value, grad in net.parameters():
            flat_idx = rng.choice(value.size, size=min(10, value.size),
                                  replace=False)
            for fi in flat_idx:
                idx = np.unravel_index(fi, value.shape)
                orig = value[idx]
                value[idx] = orig + 1e-3
                hi = nll_loss(net.forward(x), label)
                value[idx] = orig - 1e-3
                lo = nll_loss(net.forward(x), label)
                value[idx] = orig
                numeric = (hi - lo) / 2e-3
                denom = max(1.0, abs(grad[idx]), abs(numeric))
                worst = max(worst, abs(grad[idx] - numeric) / denom)
        assert worst < 1e-4


class TestStratifiedFolds:
    def test_partition_identity(self):
        labels = np.repeat(np.arange(4), 10)
        folds = stratified_folds(labels, 2, rng_seed=0)
        assert len(folds) == 2
        for fold in folds:
            for c in range(4):
                assert np.sum(labels[fold] == c) == 5
        merged = np.sort(np.concatenate(folds))
        npt.assert_array_equal(merged, np.arange(40))

    def test_many_class_fold_sizes(self):
        labels = np.repeat(np.arange(24), 300)
        folds = stratified_folds(labels, 10, rng_seed=0)
        for fold in folds:
            assert fold.size == 24 * 30
            for c in range(24):
                assert np.sum(labels[fold] == c) == 30

    def test_uneven_classes_spread(self):
        labels = np.array([0] * 7 + [1] * 5)
        folds = stratified_folds(labels, 3, rng_seed=1)
        sizes = sorted(np.sum(labels[f] == 0) for f in folds)
        assert sizes == [2, 2, 3]

    def test_small_class_rejected(self):
        with pytest.raises(InputError):
            stratified_folds([0, 0, 1], 3, rng_seed=0)

    def test_k_below_two_rejected(self):
        with pytest.raises(InputError):
            stratified_folds([0, 0, 1, 1], 1, rng_seed=0)


class TestKFold:
    def test_reports_and_stability(self):
        samples, names = tiny_corpus(num_classes=3, per_class=12)
        cfg = TrainConfig(learning_rate=0.05, max_epochs=4, rng_seed=0)
        reports = k_fold_cross_validate(samples, tiny_spec(), cfg, k=3)
        assert len(reports) == 3
        fold_mean = np.mean([r.accuracy for r in reports])

        split = split_dataset(samples, names, train_fraction=0.7, rng_seed=0)
        net = Network.from_spec(tiny_spec())
        net.initialize(0)
        train(net, split.train, cfg)
        hits = sum(1 for s in split.test
                   if net.forward_classify(s.image)[1] == s.label)
        single = hits / len(split.test)
        assert fold_mean >= single - 0.05

    def test_undersized_class_rejected(self):
        samples = [Sample(np.zeros((1, 16, 16)), 0, f"a/{i}") for i in
                   range(3)] + [Sample(np.zeros((1, 16, 16)), 1, "b/0")]
        with pytest.raises(InputError):
            k_fold_cross_validate(samples, tiny_spec(num_classes=2),
                                  TrainConfig(), k=2)
