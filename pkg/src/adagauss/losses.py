"""Training objectives recorded on an autodiff tape.

All functions return scalar tape nodes. Feature arguments that must not
receive gradients (the frozen previous extractor's outputs, targets of the
adapter loss) are plain arrays; everything else is a tape node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import CollapsedBatch, InvalidConfig, NoPreviousHeads, ShapeMismatch

DISTILLATION_MODES = ("none", "feature", "logit", "projected")
REDUCTIONS = ("mean", "sum")
JITTER = 1e-8


@dataclass(frozen=True)
class LossConfig:
    lam: float = 10.0
    beta: float = 1.0
    distillation_mode: str = "projected"
    reduction: str = "mean"
    logit_temperature: float = 2.0

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidConfig(f"lambda must be >= 0, got {self.lam}")
        if self.beta <= 0:
            raise InvalidConfig(f"beta must be > 0, got {self.beta}")
        if self.distillation_mode not in DISTILLATION_MODES:
            raise InvalidConfig(f"unknown distillation mode {self.distillation_mode!r}")
        if self.reduction not in REDUCTIONS:
            raise InvalidConfig(f"unknown reduction {self.reduction!r}")
        if self.logit_temperature <= 0:
            raise InvalidConfig("logit_temperature must be > 0")


def _const(tape, x):
    return x if isinstance(x, ad.Node) else tape.constant(x)


def loss_ce(tape, logits, labels):
    return ad.softmax_cross_entropy(tape, logits, labels)


def loss_pkd(tape, current_feats, projector, frozen_prev_feats, reduction="mean"):
    """Projected distillation: ``||phi(F_t(x)) - F_{t-1}(x)||^2`` reduced over the batch."""
    target = _const(tape, frozen_prev_feats)
    projected = projector.forward(tape, current_feats)
    if projected.shape != target.shape:
        raise ShapeMismatch(f"projector output {projected.shape} vs targets {target.shape}")
    return ad.mse_rows(tape, projected, target, reduction)


def loss_feature_kd(tape, current_feats, frozen_prev_feats, reduction="mean"):
    target = _const(tape, frozen_prev_feats)
    if current_feats.shape != target.shape:
        raise ShapeMismatch(f"features {current_feats.shape} vs targets {target.shape}")
    return ad.mse_rows(tape, current_feats, target, reduction)


def loss_logit_kd(tape, current_feats, frozen_prev_feats, old_heads, temperature=2.0):
    """LwF-style distillation through the frozen heads of earlier tasks.

    For each old head, the softened predictions of the previous extractor are
    the targets for the softened predictions of the current extractor. Each
    per-head term is the cross-entropy minus the (constant) target entropy,
    i.e. a KL divergence, so identical extractors give exactly zero; the
    terms are summed over heads.
    """
    if not old_heads:
        raise NoPreviousHeads("logit distillation needs heads from earlier tasks")
    terms = None
    for head in old_heads:
        prev_logits = head.predict(frozen_prev_feats) / temperature
        prev_logits = prev_logits - prev_logits.max(axis=1, keepdims=True)
        targets = np.exp(prev_logits)
        targets /= targets.sum(axis=1, keepdims=True)
        entropy = -float(np.mean(np.sum(targets * np.log(np.clip(targets, 1e-300, None)), axis=1)))
        curr = ad.scale(tape, head.forward(tape, current_feats), 1.0 / temperature)
        term = ad.add(tape, ad.soft_cross_entropy(tape, curr, targets), tape.constant(-entropy))
        terms = term if terms is None else ad.add(tape, terms, term)
    return terms


def cholesky_diagonal(tape, feats, jitter_log=None):
    """Cholesky diagonal of the batch covariance of ``feats``.

    With ``jitter_log`` (a mutable list) a non-positive-definite covariance is
    retried once with ``1e-8 * I`` added and the event is appended to the log;
    without it, :class:`CollapsedBatch` propagates.
    """
    cov = ad.batch_covariance(tape, feats)
    try:
        return ad.cholesky_diag(tape, cov)
    except CollapsedBatch:
        if jitter_log is None:
            raise
        jitter_log.append(1)
        return ad.cholesky_diag(tape, cov, jitter=JITTER)


def loss_ac(tape, batch_feats, beta=1.0, jitter_log=None):
    """Anti-collapse loss ``-(1/S) * sum_i min(a_i, beta)`` over the Cholesky diagonal."""
    diag = cholesky_diagonal(tape, batch_feats, jitter_log)
    return ad.scale(tape, ad.mean(tape, ad.clamp_max(tape, diag, beta)), -1.0)


def loss_adapter(tape, adapter, frozen_prev_feats, frozen_curr_feats, beta=1.0,
                 reduction="mean", anticollapse=True, jitter_log=None):
    """``||psi(F_{t-1}(x)) - F_t(x)||^2`` plus the anti-collapse loss of psi's outputs."""
    mapped = adapter.forward(tape, _const(tape, frozen_prev_feats))
    target = _const(tape, frozen_curr_feats)
    if mapped.shape != target.shape:
        raise ShapeMismatch(f"adapter output {mapped.shape} vs targets {target.shape}")
    loss = ad.mse_rows(tape, mapped, target, reduction)
    if anticollapse:
        loss = ad.add(tape, loss, loss_ac(tape, mapped, beta, jitter_log))
    return loss


def loss_total(tape, ce, ac=None, pkd=None, lam=10.0):
    """``ce + ac + lam * pkd``; absent terms are skipped."""
    loss = ce
    if ac is not None:
        loss = ad.add(tape, loss, ac)
    if pkd is not None and lam != 0.0:
        loss = ad.add(tape, loss, ad.scale(tape, pkd, lam))
    return loss
