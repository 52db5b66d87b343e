"""Class-incremental task streams: synthetic Gaussian clusters, CSV ingestion, splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDataset,
    InvalidConfig,
    MissingLabelColumn,
    NonNumericFeature,
    ParseError,
    PlacementFailure,
    TooFewClasses,
)
from .linalg import seeded_rng

TRAIN_FRACTION = 0.8
STD_FLOOR = 1e-12
PLACEMENT_ATTEMPTS = 10_000


@dataclass
class LabeledSamples:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    label_names: tuple = ()

    @property
    def classes(self):
        return np.unique(np.concatenate([self.train_y, self.test_y]))


class AccessAudit:
    """Records every read of a task's training split together with the task being trained."""

    def __init__(self):
        self.current_task = 0
        self.reads = []

    def record(self, task_id):
        self.reads.append((self.current_task, task_id))

    def violations(self):
        return [(cur, tid) for cur, tid in self.reads if tid < cur]


class TaskData:
    def __init__(self, task_id, classes, train_x, train_y, test_x, test_y):
        self.task_id = int(task_id)
        self.classes = tuple(int(c) for c in classes)
        self._train_x = train_x
        self._train_y = train_y
        self.test_x = test_x
        self.test_y = test_y
        self.audit = None
        self._local = {c: i for i, c in enumerate(self.classes)}

    def train(self):
        """Training inputs and global labels; every call is logged to the audit."""
        if self.audit is not None:
            self.audit.record(self.task_id)
        return self._train_x, self._train_y

    def test(self):
        return self.test_x, self.test_y

    def local_labels(self, y):
        return np.array([self._local[int(c)] for c in y], dtype=int)

    @property
    def num_train(self):
        return self._train_y.shape[0]

    def train_counts(self):
        return {c: int(np.sum(self._train_y == c)) for c in self.classes}


@dataclass
class TaskStream:
    tasks: list
    true_gaussians: dict = field(default_factory=dict)

    @property
    def num_tasks(self):
        return len(self.tasks)

    @property
    def class_map(self):
        return {t.task_id: t.classes for t in self.tasks}

    @property
    def input_dim(self):
        return self.tasks[0].test_x.shape[1]

    def attach_audit(self, audit):
        for t in self.tasks:
            t.audit = audit
        return audit


@dataclass(frozen=True)
class SyntheticSpec:
    input_dim: int = 16
    classes_per_task: int = 4
    num_tasks: int = 5
    samples_per_class: int = 200
    cluster_spread: float = 1.0
    cluster_separation: float = 4.0
    anisotropy: float = 4.0
    seed: int = 0
    first_task_fraction: object = "equal"
    intrinsic_dim: int = 0

    @property
    def class_rank(self):
        """Dimension of each class's support (``intrinsic_dim``, or ``input_dim`` when 0)."""
        return self.intrinsic_dim or self.input_dim

    def __post_init__(self):
        counts = (self.input_dim, self.classes_per_task, self.num_tasks, self.samples_per_class)
        if min(counts) < 1:
            raise InvalidConfig(f"synthetic counts must be positive, got {counts}")
        if self.cluster_spread <= 0:
            raise InvalidConfig("cluster_spread must be > 0")
        if self.anisotropy < 1:
            raise InvalidConfig("anisotropy must be >= 1")
        if self.cluster_separation < 0:
            raise InvalidConfig("cluster_separation must be >= 0")
        if not 0 <= self.intrinsic_dim <= self.input_dim:
            raise InvalidConfig(f"intrinsic_dim must lie in [0, input_dim], got {self.intrinsic_dim}")
        _check_fraction(self.first_task_fraction)


def _check_fraction(fraction):
    if fraction != "equal" and fraction != 0.5:
        raise InvalidConfig(f"first_task_fraction must be 'equal' or 0.5, got {fraction!r}")


def _random_rotation(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def axis_scales(spec: SyntheticSpec):
    """Per-axis standard deviations, geometric from ``spread`` down to ``spread / anisotropy``."""
    d = spec.class_rank
    if d == 1:
        return np.array([spec.cluster_spread])
    return spec.cluster_spread * spec.anisotropy ** (-np.arange(d) / (d - 1))


def _place_means(rng, count, dim, separation):
    half_width = separation * max(1.0, count ** (1.0 / dim))
    means = []
    attempts = 0
    while len(means) < count:
        attempts += 1
        if attempts > PLACEMENT_ATTEMPTS:
            raise PlacementFailure(
                f"could not place {count} means {separation} apart in {dim} dims "
                f"within {PLACEMENT_ATTEMPTS} attempts"
            )
        proposal = rng.uniform(-half_width, half_width, size=dim)
        if all(np.linalg.norm(proposal - m) >= separation for m in means):
            means.append(proposal)
    return np.array(means)


def generate_synthetic(spec: SyntheticSpec) -> TaskStream:
    """One randomly rotated anisotropic Gaussian cluster per class, split 80/20 per class.

    With ``intrinsic_dim = k > 0`` every class lives in its own random
    k-dimensional affine subspace, so its true covariance has rank k.
    """
    rng = seeded_rng(spec.seed)
    num_classes = spec.classes_per_task * spec.num_tasks
    means = _place_means(rng, num_classes, spec.input_dim, spec.cluster_separation)
    scales = axis_scales(spec)
    n_train = int(round(TRAIN_FRACTION * spec.samples_per_class))
    parts = {"train_x": [], "train_y": [], "test_x": [], "test_y": []}
    truth = {}
    for c in range(num_classes):
        rot = _random_rotation(rng, spec.input_dim)
        basis = rot[:, :spec.class_rank] * scales
        x = means[c] + rng.standard_normal((spec.samples_per_class, spec.class_rank)) @ basis.T
        truth[c] = (means[c].copy(), basis @ basis.T)
        parts["train_x"].append(x[:n_train])
        parts["test_x"].append(x[n_train:])
        parts["train_y"].append(np.full(n_train, c))
        parts["test_y"].append(np.full(spec.samples_per_class - n_train, c))
    samples = LabeledSamples(
        np.concatenate(parts["train_x"]),
        np.concatenate(parts["train_y"]),
        np.concatenate(parts["test_x"]),
        np.concatenate(parts["test_y"]),
    )
    stream = split_incremental(samples, spec.num_tasks, spec.first_task_fraction, spec.seed)
    stream.true_gaussians = truth
    return stream


def task_sizes(num_classes, num_tasks, first_task_fraction="equal"):
    _check_fraction(first_task_fraction)
    if num_tasks < 1 or num_classes < num_tasks:
        raise TooFewClasses(f"{num_classes} classes cannot fill {num_tasks} tasks")
    if first_task_fraction == "equal":
        base, extra = divmod(num_classes, num_tasks)
        return [base + (1 if i < extra else 0) for i in range(num_tasks)]
    first = math.ceil(num_classes / 2)
    if num_tasks == 1:
        if first != num_classes:
            raise TooFewClasses("half-first with one task leaves classes unassigned")
        return [first]
    rest = num_classes - first
    if rest < num_tasks - 1:
        raise TooFewClasses(f"{rest} classes left for {num_tasks - 1} remaining tasks")
    return [first] + task_sizes(rest, num_tasks - 1)


def split_incremental(samples: LabeledSamples, num_tasks, first_task_fraction="equal", seed=0) -> TaskStream:
    """Shuffle class ids by ``seed`` and cut them into disjoint tasks.

    Equal mode gives floor(C/T) classes per task, the remainder going to the
    earliest tasks; half mode puts ceil(C/2) classes in task 1 and splits the
    rest equally.
    """
    classes = samples.classes
    sizes = task_sizes(classes.size, num_tasks, first_task_fraction)
    order = seeded_rng(seed, 1).permutation(classes)
    tasks = []
    start = 0
    for t, size in enumerate(sizes, start=1):
        cls = tuple(sorted(int(c) for c in order[start:start + size]))
        start += size
        tr = np.isin(samples.train_y, cls)
        te = np.isin(samples.test_y, cls)
        tasks.append(TaskData(
            t, cls,
            samples.train_x[tr], samples.train_y[tr],
            samples.test_x[te], samples.test_y[te],
        ))
    return TaskStream(tasks)


def load_csv_dataset(path, label_column, seed=0, test_fraction=1.0 - TRAIN_FRACTION) -> LabeledSamples:
    """Read a numeric CSV with a header, split it per class and z-score features.

    ``label_column`` is a header name or a zero-based column index. Labels may
    be arbitrary strings; they are mapped to integer ids in sorted order.
    Standardization statistics come from the training split only.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if isinstance(label_column, int) or str(label_column).isdigit():
            idx = int(label_column)
            if not 0 <= idx < len(header):
                raise MissingLabelColumn(f"label column index {idx} out of range")
        else:
            if label_column not in header:
                raise MissingLabelColumn(f"label column {label_column!r} not in header {header}")
            idx = header.index(label_column)
        rows, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            feats = []
            for j, cell in enumerate(row):
                if j == idx:
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise NonNumericFeature(f"column {header[j]!r} has non-numeric value {cell!r}", line) from None
                if not math.isfinite(value):
                    raise NonNumericFeature(f"column {header[j]!r} has non-finite value {cell!r}", line)
                feats.append(value)
            rows.append(feats)
            labels.append(row[idx].strip())
    if not rows:
        raise EmptyDataset(f"{path} has a header but no data rows")
    x = np.array(rows, dtype=float)
    names = sorted(set(labels))
    lookup = {name: i for i, name in enumerate(names)}
    y = np.array([lookup[name] for name in labels], dtype=int)

    rng = seeded_rng(seed, 2)
    train_idx, test_idx = [], []
    for c in range(len(names)):
        members = rng.permutation(np.flatnonzero(y == c))
        n_test = int(round(test_fraction * members.size))
        if members.size > 1:
            n_test = min(max(n_test, 1 if test_fraction > 0 else 0), members.size - 1)
        else:
            n_test = 0
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    train_idx = np.sort(np.array(train_idx, dtype=int))
    test_idx = np.sort(np.array(test_idx, dtype=int))
    mu = x[train_idx].mean(axis=0)
    sigma = x[train_idx].std(axis=0)
    constant = sigma < STD_FLOOR
    z = (x - mu) / np.where(constant, 1.0, sigma)
    z[:, constant] = 0.0
    return LabeledSamples(z[train_idx], y[train_idx], z[test_idx], y[test_idx], tuple(names))
