"""Classifier-judged sample quality: train a small fixed classifier on real
data, then score label-conditioned samples from two checkpoints.

The judge is deliberately not tuned (one hidden layer of 128, fixed
10-epoch budget); it only supports a relative comparison.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, backward, swish
from .data import MultimodalBatch
from .distributions import BernoulliParams, bernoulli_nll
from .layers import Adam, make_dense


class JudgeUnusableError(RuntimeError):
    """Judge classifier failed the sanity margin on held-out real data."""


class JudgeClassifier:
    def __init__(self, input_dim, num_classes, hidden=128, seed=0):
        rng = np.random.default_rng(seed)
        self.hidden_layer = make_dense(rng, input_dim, hidden)
        self.out_layer = make_dense(rng, hidden, num_classes)
        self.params = {
            "h.W": self.hidden_layer.W,
            "h.b": self.hidden_layer.b,
            "o.W": self.out_layer.W,
            "o.b": self.out_layer.b,
        }

    def logits(self, x):
        return self.out_layer(swish(self.hidden_layer(Tensor(np.asarray(x)))))

    def predict(self, x):
        return np.argmax(self.logits(x).data, axis=1)


def train_judge(x, labels_onehot, seed=0, epochs=10, batch_size=64, lr=1e-3):
    """Fixed-budget training of the judge on real (input, one-hot label) data."""
    clf = JudgeClassifier(x.shape[1], labels_onehot.shape[1], seed=seed)
    opt = Adam(clf.params, lr=lr)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            loss = bernoulli_nll(
                BernoulliParams(clf.logits(x[rows])), labels_onehot[rows]
            )
            opt.zero_grad()
            backward(loss)
            opt.step()
    return clf


def judge_accuracy(clf, x, labels):
    return float(np.mean(clf.predict(x) == labels))


def sample_quality(models, dataset, n, seed, image_modality=None, label_modality=None):
    """Judge accuracy per model on n label-conditioned generated samples.

    ``models`` is a dict tag -> MVAEModel sharing the dataset's topology.
    The judge trains on the real training split and must beat 1.5x chance
    on the held-out split, otherwise it is unusable as a comparator.
    """
    names = dataset.names
    image_modality = image_modality or names[0]
    label_modality = label_modality or names[1]
    x_train = dataset.train.values[image_modality]
    y_train = dataset.train.values[label_modality]
    x_eval = dataset.eval.values[image_modality]
    y_eval = np.argmax(dataset.eval.values[label_modality], axis=1)
    num_classes = y_train.shape[1]

    clf = train_judge(x_train, y_train, seed=seed)
    held_out = judge_accuracy(clf, x_eval, y_eval)
    chance = 1.0 / num_classes
    if held_out < 1.5 * chance:
        raise JudgeUnusableError(
            f"judge accuracy {held_out:.3f} below 1.5x chance ({1.5 * chance:.3f})"
        )

    # round-robin over classes so every label is conditioned on equally
    cond_labels = np.arange(n) % num_classes
    accuracies = {}
    for tag, model in models.items():
        preds = np.empty(n, dtype=np.int64)
        for cls in range(num_classes):
            rows = np.nonzero(cond_labels == cls)[0]
            onehot = np.zeros((1, num_classes))
            onehot[0, cls] = 1.0
            given = MultimodalBatch(
                values={
                    image_modality: np.zeros((1, x_train.shape[1])),
                    label_modality: onehot,
                },
                presence=np.array([[False, True]])
                if names[0] == image_modality
                else np.array([[True, False]]),
                names=names,
            )
            samples = model.generate_conditional(
                given, len(rows), seed=seed + 1000 + cls
            )
            preds[rows] = clf.predict(samples[image_modality])
        accuracies[tag] = float(np.mean(preds == cond_labels))
    return {"judge_held_out_accuracy": held_out, "accuracies": accuracies}
