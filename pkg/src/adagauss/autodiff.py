"""A small reverse-mode differentiation tape over numpy arrays.

Each forward primitive appends a node to a :class:`Tape`; :func:`backward`
walks the tape once in reverse and writes gradients into every
:class:`Parameter` the loss depends on. Arrays that are not parameters enter
through :meth:`Tape.constant` and never receive gradients, which is how
frozen networks are kept out of the optimization.
"""

from __future__ import annotations

import math

import numpy as np

from . import linalg
from .errors import (
    CollapsedBatch,
    LabelOutOfRange,
    NaNGradient,
    NonFiniteUpdate,
    NonScalarLoss,
    NotPositiveDefinite,
    ShapeMismatch,
    TapeConsumed,
    TooFewSamples,
)


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, name="node", requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, shape={self.shape})"


class Parameter(Node):
    """A trainable leaf. ``velocity`` holds the SGD momentum buffer."""

    __slots__ = ("velocity",)

    def __init__(self, value, name="param"):
        value = np.array(value, dtype=float)
        super().__init__(value, name=name, requires_grad=True)
        self.grad = np.zeros_like(value)
        self.velocity = np.zeros_like(value)


class Tape:
    def __init__(self):
        self.nodes = []
        self.consumed = False

    def constant(self, value, name="const"):
        return Node(np.asarray(value, dtype=float), name=name)

    def record(self, value, parents, backward_fn, name):
        if self.consumed:
            raise TapeConsumed("cannot record onto a tape that was already run backward")
        requires = any(p.requires_grad for p in parents)
        node = Node(value, parents, backward_fn, name, requires_grad=requires)
        if requires:
            self.nodes.append(node)
        return node


def backward(tape: Tape, loss: Node):
    """Accumulate d(loss)/d(parameter) into ``Parameter.grad``; consumes the tape."""
    if tape.consumed:
        raise TapeConsumed("backward already ran on this tape; run a new forward pass")
    if np.size(loss.value) != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {np.shape(loss.value)}")
    tape.consumed = True
    for node in tape.nodes:
        node.grad = None
        for p in node.parents:
            if isinstance(p, Parameter):
                p.grad = np.zeros_like(p.value)
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise NaNGradient(f"non-finite adjoint flowing out of node '{node.name}'")
            parent.grad = g if parent.grad is None else parent.grad + g
        node.grad = None


def sgd_step(params, lr, weight_decay=0.0, momentum=0.0):
    """``v = momentum * v + g + wd * w``, then ``w -= lr * v``."""
    for p in params:
        velocity = momentum * p.velocity + p.grad + weight_decay * p.value
        value = p.value - lr * velocity
        if not np.all(np.isfinite(value)):
            raise NonFiniteUpdate(f"update of parameter '{p.name}' is not finite")
        p.velocity = velocity
        p.value = value


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``max_norm=None`` only measures.
    """
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm is not None and total > max_norm:
        factor = max_norm / total
        for p in params:
            p.grad = p.grad * factor
    return total


def reset_momentum(params):
    for p in params:
        p.velocity = np.zeros_like(p.value)


# --- forward primitives -----------------------------------------------------


def affine(tape, x, w, b):
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0] or b.value.shape != (wv.shape[1],):
        raise ShapeMismatch(f"affine: x {xv.shape}, W {wv.shape}, b {b.value.shape}")

    def back(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return tape.record(xv @ wv + b.value, (x, w, b), back, "affine")


def relu(tape, x):
    mask = x.value > 0.0

    def back(g):
        return (g * mask,)

    return tape.record(x.value * mask, (x,), back, "relu")


def tanh(tape, x):
    y = np.tanh(x.value)

    def back(g):
        return (g * (1.0 - y * y),)

    return tape.record(y, (x,), back, "tanh")


def add(tape, a, b):
    def back(g):
        return g, g

    return tape.record(a.value + b.value, (a, b), back, "add")


def scale(tape, a, factor):
    factor = float(factor)

    def back(g):
        return (g * factor,)

    return tape.record(a.value * factor, (a,), back, "scale")


def total(tape, a):
    shape = a.value.shape

    def back(g):
        return (np.full(shape, float(g)),)

    return tape.record(np.asarray(a.value.sum()), (a,), back, "sum")


def mean(tape, a):
    size = a.value.size
    shape = a.value.shape

    def back(g):
        return (np.full(shape, float(g) / size),)

    return tape.record(np.asarray(a.value.mean()), (a,), back, "mean")


def clamp_max(tape, a, ceiling):
    """``min(a, ceiling)``; the subgradient at the kink is taken as 0."""
    mask = a.value < ceiling

    def back(g):
        return (g * mask,)

    return tape.record(np.minimum(a.value, ceiling), (a,), back, "clamp_max")


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(tape, logits, labels):
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    z = logits.value
    labels = np.asarray(labels, dtype=int)
    n, k = z.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} for logits {z.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = _log_softmax(z)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (float(g) * d / n,)

    return tape.record(np.asarray(loss), (logits,), back, "softmax_cross_entropy")


def soft_cross_entropy(tape, logits, target_probs):
    """Mean over rows of ``-sum(p * log_softmax(logits))`` for fixed targets ``p``."""
    z = logits.value
    p = np.asarray(target_probs, dtype=float)
    if p.shape != z.shape:
        raise ShapeMismatch(f"targets {p.shape} vs logits {z.shape}")
    n = z.shape[0]
    logq = _log_softmax(z)
    loss = -(p * logq).sum() / n

    def back(g):
        q = np.exp(logq)
        return (float(g) * (q * p.sum(axis=1, keepdims=True) - p) / n,)

    return tape.record(np.asarray(loss), (logits,), back, "soft_cross_entropy")


def mse_rows(tape, a, b, reduction="mean"):
    """Squared Euclidean distance per row, reduced over rows by mean or sum."""
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"mse_rows: {a.value.shape} vs {b.value.shape}")
    diff = a.value - b.value
    n = diff.shape[0]
    denom = n if reduction == "mean" else 1
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g):
        d = (2.0 * float(g) / denom) * diff
        return d, -d

    return tape.record(np.asarray((diff * diff).sum() / denom), (a, b), back, "mse_rows")


def batch_covariance(tape, x):
    xv = x.value
    n = xv.shape[0]
    if n < 2:
        raise TooFewSamples(f"batch covariance needs at least 2 rows, got {n}")
    centered = xv - xv.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)

    def back(g):
        gs = g + g.T
        return (centered @ gs / (n - 1),)

    return tape.record(cov, (x,), back, "batch_covariance")


def cholesky_diag(tape, cov, jitter=0.0):
    """Diagonal of the Cholesky factor of ``cov + jitter * I``.

    Raises :class:`CollapsedBatch` when the matrix is not positive-definite;
    callers decide whether to retry with jitter.
    """
    a = cov.value
    if jitter:
        a = a + jitter * np.eye(a.shape[0])
    try:
        factor = linalg.cholesky(a)
    except NotPositiveDefinite as exc:
        raise CollapsedBatch(str(exc)) from None
    diag = np.diag(factor.lower).copy()

    def back(g):
        return (linalg.cholesky_backward(factor, np.diag(g)),)

    return tape.record(diag, (cov,), back, "cholesky_diag")
