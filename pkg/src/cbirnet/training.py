"""Per-sample SGD on negative log-likelihood, plus k-fold cross-validation.

Training is deliberately plain: batch size 1, constant learning rate, no
momentum, no decay. One seed drives two independent streams (epoch shuffle
order and dropout masks), so a (seed, data, config) triple reproduces the
final parameters bit for bit. Non-finite losses or gradients abort instead
of clamping; silent NaN recovery hides gradient bugs.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, InputError, TrainingDiverged
from .metrics import classification_report, confusion_matrix
from .network import LogSoftmaxSpec, Network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 30
    rng_seed: int = 0
    shuffle_each_epoch: bool = True
    log_interval: int = 0  # samples between progress lines; 0 is silent

    def __post_init__(self):
        # Zero is allowed so no-op determinism checks can run through the
        # public path; only negative rates are nonsense.
        if self.learning_rate < 0:
            raise ConfigurationError(
                f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ConfigurationError(
                f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.log_interval < 0:
            raise ConfigurationError(
                f"log_interval must be >= 0, got {self.log_interval}")


@dataclass(frozen=True)
class TrainReport:
    """Per-epoch mean loss plus the end-state training error.

    epoch_seconds is wall-clock bookkeeping and excluded from equality:
    two runs of the same seeded config compare equal even though their
    timings differ.
    """

    epoch_losses: tuple
    final_train_error: float
    num_updates: int
    epoch_seconds: tuple = field(compare=False, default=())

    def to_tsv(self):
        lines = ["epoch\tmean_loss\tseconds"]
        for i, (loss, sec) in enumerate(
                zip(self.epoch_losses, self.epoch_seconds), start=1):
            lines.append(f"{i}\t{loss!r}\t{sec:.6f}")
        return "\n".join(lines) + "\n"


def nll_loss(log_probs, label):
    """Negative log-likelihood of the true class: -log_probs[label]."""
    n = log_probs.shape[0]
    if not 0 <= label < n:
        raise InputError(f"label {label} outside [0, {n})")
    return float(-log_probs[label])


def nll_grad(log_probs, label):
    """dLoss/dlog_probs: -1 at the true class, 0 elsewhere."""
    n = log_probs.shape[0]
    if not 0 <= label < n:
        raise InputError(f"label {label} outside [0, {n})")
    g = np.zeros(n, dtype=np.float64)
    g[label] = -1.0
    return g


def sgd_step(net, sample, config):
    """One forward/backward/update cycle on a single sample.

    Returns the sample's loss before the update. Aborts with
    TrainingDiverged on any non-finite loss or gradient.
    """
    net.zero_grads()
    log_probs = net.forward(sample.image, train=True)
    loss = nll_loss(log_probs, sample.label)
    if not np.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss {loss} on sample {sample.source_id}")
    net.backward(nll_grad(log_probs, sample.label))
    lr = config.learning_rate
    for value, grad in net.parameters():
        if not np.isfinite(grad).all():
            raise TrainingDiverged(
                f"non-finite gradient on sample {sample.source_id}")
        if lr != 0.0:
            value -= lr * grad
    return loss


def train(net, train_split, config):
    """Run max_epochs passes of per-sample SGD over a seeded shuffle.

    The config seed spawns two child streams: one orders the samples each
    epoch, the other drives dropout masks. The learning rate is constant
    throughout. Returns a TrainReport with per-epoch mean losses and the
    final fraction of misclassified training samples.
    """
    samples = list(train_split)
    if not samples:
        raise InputError("training split is empty")
    shuffle_seq, dropout_seq = np.random.SeedSequence(config.rng_seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    net.seed_dropout(dropout_seq)
    n = len(samples)
    epoch_losses = []
    epoch_seconds = []
    updates = 0
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        if config.shuffle_each_epoch:
            order = shuffle_rng.permutation(n)
        else:
            order = np.arange(n)
        total = 0.0
        for j, idx in enumerate(order, start=1):
            total += sgd_step(net, samples[idx], config)
            updates += 1
            if config.log_interval and j % config.log_interval == 0:
                log.info("epoch %d: %d/%d samples, running mean loss %.6f",
                         epoch, j, n, total / j)
        epoch_losses.append(total / n)
        epoch_seconds.append(time.perf_counter() - started)
        log.info("epoch %d: mean loss %.6f (%.2fs)",
                 epoch, epoch_losses[-1], epoch_seconds[-1])
    wrong = sum(1 for s in samples
                if net.forward_classify(s.image)[1] != s.label)
    return TrainReport(
        epoch_losses=tuple(epoch_losses),
        final_train_error=wrong / n,
        num_updates=updates,
        epoch_seconds=tuple(epoch_seconds),
    )


def stratified_folds(labels, k, rng_seed):
    """Partition sample indices into k folds, stratified by label.

    Within each class the (seeded) shuffled indices are dealt into k
    nearly equal chunks. Returns a list of k index arrays that are
    disjoint and exhaustive. Every class must have at least k samples.
    """
    if k < 2:
        raise InputError(f"k must be >= 2, got {k}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(rng_seed)
    folds = [[] for _ in range(k)]
    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        if idx.size < k:
            raise InputError(
                f"class {label} has {idx.size} samples, fewer than k={k}")
        shuffled = idx[rng.permutation(idx.size)]
        for f, chunk in enumerate(np.array_split(shuffled, k)):
            folds[f].extend(chunk.tolist())
    return [np.asarray(sorted(f)) for f in folds]


def k_fold_cross_validate(samples, network_spec, config, k=10, init_seed=0):
    """Train k fresh networks, each validated on its held-out fold.

    Folds are stratified by true label. Every fold's network starts from
    the same seeded initialization; its training shuffle/dropout seed is
    offset by the fold number so folds stay independent yet reproducible.
    Returns one ClassificationReport per fold.
    """
    samples = list(samples)
    num_classes = next(
        ls.num_classes for ls in reversed(network_spec.layers)
        if isinstance(ls, LogSoftmaxSpec))
    folds = stratified_folds([s.label for s in samples], k, config.rng_seed)
    reports = []
    for f, held_out in enumerate(folds):
        held_set = set(held_out.tolist())
        train_samples = [s for i, s in enumerate(samples)
                         if i not in held_set]
        net = Network.from_spec(network_spec)
        net.initialize(init_seed)
        fold_config = replace(config, rng_seed=config.rng_seed + f + 1)
        train(net, train_samples, fold_config)
        true = [samples[i].label for i in held_out]
        predicted = [net.forward_classify(samples[i].image)[1]
                     for i in held_out]
        cm = confusion_matrix(true, predicted, num_classes)
        reports.append(classification_report(cm))
        log.info("fold %d/%d: accuracy %.4f", f + 1, k, reports[-1].accuracy)
    return reports
