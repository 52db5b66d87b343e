"""The continual-learning loop: train, memorize, adapt, evaluate, task after task."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diagnostics as diag
from .classifier import ClassifierConfig, classify, train_linear_head_from_memory
from .data import AccessAudit
from .errors import AdaGaussError, CollapsedBatch, EmptyMemory, InvalidConfig, RunFailure
from .linalg import seeded_rng
from .losses import (
    DISTILLATION_MODES,
    loss_ac,
    loss_adapter,
    loss_ce,
    loss_feature_kd,
    loss_logit_kd,
    loss_pkd,
    loss_total,
)
from .memory import ADAPT_MODES, GaussianMemory, adapt_all, memorize_task, save_memory
from .networks import (
    NetworkConfig,
    build_adapter,
    build_extractor,
    build_head,
    build_projector,
    clone_frozen,
    save_checkpoint,
)

log = logging.getLogger(__name__)

MAX_JITTER_STREAK = 10

# rng sub-stream tags
_INIT, _SHUFFLE, _ADAPTER_SHUFFLE, _TRANSPORT, _HEAD = range(5)


@dataclass
class HyperParams:
    lam: float = 10.0
    beta: float = 1.0
    n_samples: int = 10_000
    latent_dim: int = 64
    projector_factor: int = 32
    hidden_dims: tuple = (256, 256)
    activation: str = "relu"
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    lr_milestones: tuple = (60, 120, 180)
    lr_decay: float = 0.1
    adapter_epochs: int = 100
    adapter_lr: float = 0.01
    adapter_milestones: tuple = (45, 90)
    adapter_decay: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    grad_clip: float = 5.0
    reduction: str = "mean"
    logit_temperature: float = 2.0
    head_samples: int = 500
    head_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        self.adapter_milestones = tuple(int(m) for m in self.adapter_milestones)
        if self.batch_size < 2:
            raise InvalidConfig("batch_size must be >= 2 (the batch covariance must exist)")
        if self.epochs < 0 or self.adapter_epochs < 0:
            raise InvalidConfig("epoch counts must be >= 0")
        if self.n_samples < 2:
            raise InvalidConfig("n_samples must be >= 2")
        if self.grad_clip < 0:
            raise InvalidConfig("grad_clip must be >= 0 (0 disables clipping)")
        if self.beta <= 0 or self.lam < 0:
            raise InvalidConfig("beta must be > 0 and lambda >= 0")

    def network_config(self, input_dim):
        return NetworkConfig(input_dim, self.hidden_dims, self.latent_dim, self.projector_factor, self.activation)


@dataclass
class AblationConfig:
    classifier: str = "bayes_full"
    adapt_mode: str = "full"
    anticollapse: bool = True
    shrink: float = 0.0
    distillation: str = "projected"
    include_logdet: bool = True

    def __post_init__(self):
        ClassifierConfig(self.classifier)
        if self.adapt_mode not in ADAPT_MODES:
            raise InvalidConfig(f"unknown adapt_mode {self.adapt_mode!r}; choose from {ADAPT_MODES}")
        if self.distillation not in DISTILLATION_MODES:
            raise InvalidConfig(f"unknown distillation {self.distillation!r}; choose from {DISTILLATION_MODES}")
        if self.shrink < 0:
            raise InvalidConfig("shrink must be >= 0")

    @property
    def classifier_config(self):
        return ClassifierConfig(self.classifier, self.include_logdet)


@dataclass
class RunReport:
    acc_matrix: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    jitter_events: int = 0
    jitter_events_after_first_epoch: int = 0
    wall_time: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def a_last(self):
        return float(np.mean(self.acc_matrix[-1]))

    @property
    def a_inc(self):
        return float(np.mean([np.mean(row) for row in self.acc_matrix]))

    def add_series(self, name, task, value):
        self.diagnostics.setdefault(name, []).append((task, value))

    def add_metric(self, task, phase, metric, value):
        self.metrics.append((int(task), phase, metric, float(value)))

    def to_dict(self):
        return {
            "acc_matrix": self.acc_matrix,
            "a_last": self.a_last,
            "a_inc": self.a_inc,
            "jitter_events": self.jitter_events,
            "jitter_events_after_first_epoch": self.jitter_events_after_first_epoch,
            "diagnostics": {k: [[t, v] for t, v in s] for k, s in self.diagnostics.items()},
            "wall_time": self.wall_time,
            "flags": self.flags,
        }


class JitterLog(list):
    """Per-phase jitter bookkeeping with a fatal consecutive-step limit."""

    def __init__(self):
        super().__init__()
        self.events = []
        self.streak = 0

    def step_done(self, epoch):
        if self:
            self.events.extend([epoch] * len(self))
            self.streak += 1
            self.clear()
            if self.streak >= MAX_JITTER_STREAK:
                raise CollapsedBatch(
                    f"batch covariance stayed singular for {self.streak} consecutive steps"
                )
        else:
            self.streak = 0


def lr_at(epoch, base, milestones, decay):
    return base * decay ** sum(1 for m in milestones if epoch >= m)


def make_batches(n, batch_size, rng):
    """Shuffled index batches; a final batch of one sample is merged into the previous one."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _derived_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def train_task(extractor, prev_frozen, projector, head, task, hp: HyperParams, ab: AblationConfig,
               old_heads=(), rng=None, jitter_log=None):
    """Minibatch SGD on the combined objective for one task.

    Returns per-epoch means of every loss component as a dict of lists.
    """
    rng = rng if rng is not None else seeded_rng(hp.seed, _SHUFFLE, task.task_id)
    jitter_log = jitter_log if jitter_log is not None else JitterLog()
    x, y = task.train()
    labels = task.local_labels(y)
    mode = ab.distillation if prev_frozen is not None else "none"
    if mode == "logit" and not old_heads:
        mode = "none"
    prev_feats = prev_frozen.predict(x) if mode != "none" else None
    params = extractor.parameters() + head.parameters()
    if mode == "projected":
        params += projector.parameters()
    ad.reset_momentum(params)
    history = {k: [] for k in ("loss", "ce", "ac", "kd")}
    for epoch in range(hp.epochs):
        lr = lr_at(epoch, hp.lr, hp.lr_milestones, hp.lr_decay)
        sums = dict.fromkeys(history, 0.0)
        steps = 0
        for idx in make_batches(x.shape[0], hp.batch_size, rng):
            tape = ad.Tape()
            feats = extractor.forward(tape, tape.constant(x[idx]))
            ce = loss_ce(tape, head.forward(tape, feats), labels[idx])
            ac = loss_ac(tape, feats, hp.beta, jitter_log) if ab.anticollapse else None
            kd = None
            if mode == "projected":
                kd = loss_pkd(tape, feats, projector, prev_feats[idx], hp.reduction)
            elif mode == "feature":
                kd = loss_feature_kd(tape, feats, prev_feats[idx], hp.reduction)
            elif mode == "logit":
                kd = loss_logit_kd(tape, feats, prev_feats[idx], old_heads, hp.logit_temperature)
            loss = loss_total(tape, ce, ac, kd, hp.lam)
            ad.backward(tape, loss)
            ad.clip_grad_norm(params, hp.grad_clip or None)
            ad.sgd_step(params, lr, hp.weight_decay, hp.momentum)
            jitter_log.step_done(epoch)
            sums["loss"] += float(loss.value)
            sums["ce"] += float(ce.value)
            sums["ac"] += float(ac.value) if ac is not None else 0.0
            sums["kd"] += float(kd.value) if kd is not None else 0.0
            steps += 1
        for k in history:
            history[k].append(sums[k] / steps)
        if not math.isfinite(history["loss"][-1]):
            raise FloatingPointError(f"training loss became non-finite in epoch {epoch}")
    return history


def train_adapter(prev_frozen, curr_frozen, task, hp: HyperParams, anticollapse=True,
                  adapter=None, rng=None, jitter_log=None):
    """Fit the adapter mapping old-extractor features onto new-extractor features.

    Only the current task's training data is used. Returns ``(adapter, history)``
    where history holds the per-epoch mean squared error and total loss.
    """
    s = curr_frozen.output_dim
    if adapter is None:
        cfg = NetworkConfig(s, (s,), s, hp.projector_factor, hp.activation)
        adapter = build_adapter(cfg, seeded_rng(hp.seed, _INIT, task.task_id, 1))
    rng = rng if rng is not None else seeded_rng(hp.seed, _ADAPTER_SHUFFLE, task.task_id)
    jitter_log = jitter_log if jitter_log is not None else JitterLog()
    x, _ = task.train()
    src = prev_frozen.predict(x)
    dst = curr_frozen.predict(x)
    params = adapter.parameters()
    ad.reset_momentum(params)
    history = {"loss": [], "mse": []}
    for epoch in range(hp.adapter_epochs):
        lr = lr_at(epoch, hp.adapter_lr, hp.adapter_milestones, hp.adapter_decay)
        total, steps = 0.0, 0
        for idx in make_batches(x.shape[0], hp.batch_size, rng):
            tape = ad.Tape()
            loss = loss_adapter(tape, adapter, src[idx], dst[idx], hp.beta, hp.reduction,
                                anticollapse, jitter_log)
            ad.backward(tape, loss)
            ad.clip_grad_norm(params, hp.grad_clip or None)
            ad.sgd_step(params, lr, hp.weight_decay, hp.momentum)
            jitter_log.step_done(epoch)
            total += float(loss.value)
            steps += 1
        history["loss"].append(total / steps)
        history["mse"].append(adapter_mse(adapter, src, dst))
    return adapter, history


def adapter_mse(adapter, src, dst):
    diff = adapter.predict(src) - dst
    return float(np.mean(np.sum(diff * diff, axis=1)))


def evaluate(extractor, memory, tasks, classifier_config, head=None):
    """Task-agnostic accuracy on each task's test split, over all memorized classes."""
    if len(memory) == 0:
        raise EmptyMemory("nothing memorized yet")
    row = []
    for task in tasks:
        x, y = task.test()
        if y.size == 0:
            row.append(float("nan"))
            continue
        pred = classify(extractor.predict(x), memory, classifier_config, head)
        row.append(float(np.mean(pred == y)))
    return row


def _phase(task, name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except AdaGaussError as exc:
        raise RunFailure(task, name, exc) from exc
    except FloatingPointError as exc:
        raise RunFailure(task, name, exc) from exc


def run(stream, hp: HyperParams, ab: AblationConfig = AblationConfig(), oracle_diagnostics=False,
        checkpoint_dir=None, audit=None, observer=None):
    """Run the full class-incremental sequence and return a :class:`RunReport`.

    ``observer``, if given, is called as ``observer(stage, task_id, state)``
    after each stage with a dict of the live objects; it must not mutate them.
    """
    report = RunReport()
    audit = audit if audit is not None else AccessAudit()
    stream.attach_audit(audit)
    netcfg = hp.network_config(stream.input_dim)
    extractor = build_extractor(netcfg, seeded_rng(hp.seed, _INIT, 0))
    memory = GaussianMemory(hp.latent_dim)
    old_heads = []
    clf = ab.classifier_config
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    for task in stream.tasks:
        t = task.task_id
        audit.current_task = t
        timing = {}
        jitter = JitterLog()
        prev = clone_frozen(extractor) if t > 1 else None
        init_rng = seeded_rng(hp.seed, _INIT, t)
        projector = build_projector(netcfg, init_rng) if t > 1 else None
        head = build_head(netcfg, len(task.classes), init_rng, t)

        start = time.perf_counter()
        history = _phase(t, "train", train_task, extractor, prev, projector, head, task, hp, ab,
                         old_heads, jitter_log=jitter)
        timing["train"] = time.perf_counter() - start
        if hp.epochs:
            for key in ("loss", "ce", "ac", "kd"):
                report.add_metric(t, "train", f"train_{key}", history[key][-1])
                report.add_series(f"train_{key}", t, history[key][-1])
            report.add_series("train_loss_curve", t, history["loss"])

        _phase(t, "memorize", memorize_task, memory, extractor, task, ab.shrink)
        old_heads.append(clone_frozen(head))
        curr = clone_frozen(extractor)
        if observer:
            observer("memorized", t, {"memory": memory, "extractor": curr, "task": task})

        before = memory.copy()
        if t > 1 and ab.adapt_mode != "none":
            start = time.perf_counter()
            adapter, ahist = _phase(t, "adapter", train_adapter, prev, curr, task, hp, ab.anticollapse,
                                    jitter_log=jitter)
            timing["adapter"] = time.perf_counter() - start
            if hp.adapter_epochs == 0:
                report.flags.append(f"task {t}: adapter returned at initialization (zero epochs)")
                x_tr, _ = task.train()
                mse = adapter_mse(adapter, prev.predict(x_tr), curr.predict(x_tr))
            else:
                mse = ahist["mse"][-1]
                report.add_metric(t, "adapter", "adapter_loss", ahist["loss"][-1])
            report.add_metric(t, "adapter", "adapter_mse", mse)
            report.add_series("adapter_mse", t, mse)

            start = time.perf_counter()
            _phase(t, "adaptation", adapt_all, memory, adapter, hp.n_samples,
                   _derived_seed(hp.seed, _TRANSPORT, t), t, ab.adapt_mode, ab.shrink)
            timing["adaptation"] = time.perf_counter() - start
            shifts = diag.class_shift(before, memory)
            old_shift = [v for c, v in shifts.items() if memory[c].task_id < t]
            report.add_series("class_shift", t, shifts)
            report.add_metric(t, "adaptation", "mean_class_shift", np.mean(old_shift))

        pseudo_head = None
        start = time.perf_counter()
        if ab.classifier == "linear_head":
            pseudo_head = _phase(t, "eval", train_linear_head_from_memory, memory, hp.head_samples,
                                 hp.head_epochs, seeded_rng(hp.seed, _HEAD, t))
        row = _phase(t, "eval", evaluate, curr, memory, stream.tasks[:t], clf, pseudo_head)
        timing["eval"] = time.perf_counter() - start
        report.acc_matrix.append(row)
        for s, acc in enumerate(row, start=1):
            report.add_metric(t, "eval", f"acc_task{s:03d}", acc)
        report.add_metric(t, "eval", "acc_mean", np.mean(row))

        _diagnose_task(report, t, stream, memory, curr, ab, oracle_diagnostics)
        report.jitter_events += len(jitter.events)
        report.jitter_events_after_first_epoch += sum(1 for e in jitter.events if e >= 1)
        report.add_metric(t, "train", "jitter_events", len(jitter.events))
        report.wall_time[str(t)] = timing

        if checkpoint_dir is not None:
            save_checkpoint(extractor, checkpoint_dir / f"extractor_task{t:03d}.agnet")
            save_memory(before, checkpoint_dir / f"memory_task{t:03d}_pre.agmem")
            save_memory(memory, checkpoint_dir / f"memory_task{t:03d}.agmem")
        if observer:
            observer("evaluated", t, {"memory": memory, "extractor": curr, "task": task, "row": row})

    report.add_metric(stream.num_tasks, "summary", "a_last", report.a_last)
    report.add_metric(stream.num_tasks, "summary", "a_inc", report.a_inc)
    return report


def _diagnose_task(report, t, stream, memory, extractor, ab, oracle):
    seen = stream.tasks[:t]
    x_eval = np.concatenate([task.test_x for task in seen])
    if x_eval.shape[0] > extractor.output_dim:
        strength = diag.representation_strength(extractor, x_eval)
        report.add_metric(t, "diagnostics", "representation_strength", strength)
        report.add_series("representation_strength", t, strength)
    ranks = diag.cov_rank_and_inverse_norm(memory, ab.shrink)
    report.add_series("cov_rank", t, {k: v[0] for k, v in ranks.items()})
    report.add_series("cov_inverse_norm", t, {k: v[1] for k, v in ranks.items()})
    report.add_metric(t, "diagnostics", "cov_rank_mean", np.mean([v[0] for v in ranks.values()]))
    report.add_metric(t, "diagnostics", "cov_rank_min", min(v[0] for v in ranks.values()))
    if oracle and t > 1:
        reference = {}
        for task in seen[:-1]:
            for c in task.classes:
                reference[c] = task.test_x[task.test_y == c]
        fidelity = diag.memory_fidelity(memory, extractor, reference)
        for key in ("mean_l2", "cov_l2", "sym_kl"):
            value = float(np.mean([row[key] for row in fidelity.values()]))
            report.add_metric(t, "diagnostics", f"fidelity_{key}", value)
            report.add_series(f"fidelity_{key}", t, value)
