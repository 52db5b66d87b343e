"""Task-agnostic classification over a :class:`GaussianMemory`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import linalg
from .errors import EmptyMemory, EmptyTask, InvalidConfig, NotPositiveDefinite
from .networks import MLP

CLASSIFIER_KINDS = ("bayes_full", "bayes_diag", "nmc", "linear_head")


@dataclass(frozen=True)
class ClassifierConfig:
    kind: str = "bayes_full"
    include_logdet: bool = True

    def __post_init__(self):
        if self.kind not in CLASSIFIER_KINDS:
            raise InvalidConfig(f"unknown classifier kind {self.kind!r}; choose from {CLASSIFIER_KINDS}")


class LinearHead:
    """An affine map over all memorized classes, trained on pseudo-features."""

    def __init__(self, mlp: MLP, class_ids):
        self.mlp = mlp
        self.class_ids = np.asarray(class_ids, dtype=int)

    def logits(self, features):
        return self.mlp.predict(np.atleast_2d(features))


def class_scores(features, memory, config: ClassifierConfig, head=None):
    """Per-class scores (higher is better) for a batch of feature rows.

    Returns ``(scores, class_ids)`` with classes in ascending id order, so that
    ``argmax`` breaks ties towards the lowest class id.
    """
    if len(memory) == 0:
        raise EmptyMemory("cannot classify with an empty memory")
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if config.kind == "linear_head":
        if head is None:
            raise InvalidConfig("linear_head classification requires a trained head")
        order = np.argsort(head.class_ids, kind="stable")
        return head.logits(x)[:, order], head.class_ids[order]
    ids = np.array(sorted(memory.class_ids()), dtype=int)
    scores = np.empty((x.shape[0], ids.size))
    s = memory.latent_dim
    for j, c in enumerate(ids):
        entry = memory[c]
        if config.kind == "nmc":
            d = x - entry.mean
            scores[:, j] = -np.sum(d * d, axis=1)
        elif config.kind == "bayes_diag":
            var = np.diag(entry.cov)
            if np.any(var <= linalg.PIVOT_FLOOR):
                raise NotPositiveDefinite(f"class {c} has a non-positive variance")
            d = x - entry.mean
            scores[:, j] = -0.5 * np.sum(d * d / var, axis=1)
            if config.include_logdet:
                scores[:, j] -= 0.5 * np.sum(np.log(var)) + 0.5 * s * linalg.LOG_2PI
        else:
            factor = memory.factor(c)
            scores[:, j] = -0.5 * linalg.mahalanobis_sq(x, entry.mean, factor)
            if config.include_logdet:
                scores[:, j] -= 0.5 * factor.logdet() + 0.5 * s * linalg.LOG_2PI
    return scores, ids


def classify(features, memory, config: ClassifierConfig = ClassifierConfig(), head=None):
    """Predicted class id for one feature vector, or an array of ids for a batch."""
    scores, ids = class_scores(features, memory, config, head)
    pred = ids[np.argmax(scores, axis=1)]
    return int(pred[0]) if np.ndim(features) == 1 else pred


def train_linear_head_from_memory(memory, samples_per_class, epochs, rng,
                                  lr=0.1, batch_size=128, momentum=0.9, weight_decay=5e-4):
    """Fit a linear classifier by cross-entropy on features sampled from every memorized Gaussian."""
    if len(memory) == 0:
        raise EmptyMemory("no classes to train a head on")
    ids = np.array(sorted(memory.class_ids()), dtype=int)
    xs, ys = [], []
    for j, c in enumerate(ids):
        e = memory[c]
        xs.append(linalg.sample_gaussian(e.mean, e.cov, samples_per_class, rng))
        ys.append(np.full(samples_per_class, j))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    mlp = MLP((memory.latent_dim, ids.size), name="pseudo_head", rng=rng)
    if ids.size == 1:
        return LinearHead(mlp, ids)
    params = mlp.parameters()
    for _ in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, order.size, batch_size):
            idx = order[start:start + batch_size]
            tape = ad.Tape()
            logits = mlp.forward(tape, tape.constant(x[idx]))
            loss = ad.softmax_cross_entropy(tape, logits, y[idx])
            ad.backward(tape, loss)
            ad.sgd_step(params, lr, weight_decay, momentum)
    return LinearHead(mlp, ids)


def recency_bias_probe(memory, eval_features, head=None):
    """Per-task averages exposing task-recency bias.

    ``eval_features`` maps class id to evaluation feature rows. For each origin
    task the result holds the mean squared Mahalanobis distance of each class's
    features to its memorized Gaussian and, when a linear head is given, the
    mean winning logit and the mean best logit among that task's own classes.
    """
    if len(memory) == 0:
        raise EmptyMemory("memory is empty")
    out = {}
    for task in memory.task_ids():
        entries = [e for e in memory.of_task(task) if e.class_id in eval_features]
        if not entries:
            raise EmptyTask(f"no evaluation features for task {task}")
        dists = []
        winning, own = [], []
        own_ids = {e.class_id for e in memory.of_task(task)}
        for e in entries:
            feats = np.atleast_2d(eval_features[e.class_id])
            if feats.shape[0] == 0:
                raise EmptyTask(f"class {e.class_id} has no evaluation features")
            dists.append(np.mean(linalg.mahalanobis_sq(feats, e.mean, memory.factor(e.class_id))))
            if head is not None:
                logits = head.logits(feats)
                winning.append(np.mean(logits.max(axis=1)))
                cols = [j for j, c in enumerate(head.class_ids) if c in own_ids]
                own.append(np.mean(logits[:, cols].max(axis=1)))
        row = {"mahalanobis_sq": float(np.mean(dists))}
        if head is not None:
            row["winning_logit"] = float(np.mean(winning))
            row["own_task_logit"] = float(np.mean(own))
        out[task] = row
    return out
