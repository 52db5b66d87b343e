"""Read-only measurements of representations and memorized distributions."""

from __future__ import annotations

import math

import numpy as np

from . import linalg
from .errors import ClassMismatch, EmptyMemory, NotPositiveDefinite, TooFewSamples
from .memory import shrink_cov


def representation_strength(extractor, inputs, fraction=0.95):
    """Number of covariance eigenvalues of the features needed to hold ``fraction`` of variance."""
    feats = extractor.predict(inputs)
    if feats.shape[0] < feats.shape[1] + 1:
        raise TooFewSamples(f"need at least {feats.shape[1] + 1} samples, got {feats.shape[0]}")
    return linalg.effective_dim(linalg.eig_sym(linalg.covariance(feats)), fraction)


def inverse_norm(cov, shrink=0.0):
    """Frobenius norm of the inverse covariance, ``inf`` when it cannot be inverted."""
    try:
        return float(np.linalg.norm(linalg.inverse_spd(shrink_cov(cov, shrink))))
    except NotPositiveDefinite:
        return math.inf


def cov_rank_and_inverse_norm(memory, shrink=0.0, rel_tol=1e-6):
    """Per origin task: mean numeric rank and mean inverse Frobenius norm of the covariances."""
    if len(memory) == 0:
        raise EmptyMemory("memory is empty")
    out = {}
    for task in memory.task_ids():
        entries = memory.of_task(task)
        ranks = [linalg.numeric_rank(e.cov, rel_tol) for e in entries]
        norms = [inverse_norm(e.cov, shrink) for e in entries]
        out[task] = (float(np.mean(ranks)), float(np.mean(norms)))
    return out


def covariance_spectra(memory):
    """Descending covariance eigenvalues per memorized class."""
    return {e.class_id: linalg.eig_sym(e.cov) for e in memory}


def eigenvalue_spread(memory):
    """Mean over classes of largest / smallest covariance eigenvalue (``inf`` if singular)."""
    ratios = []
    for ev in covariance_spectra(memory).values():
        ratios.append(ev[0] / ev[-1] if ev[-1] > 0 else math.inf)
    return float(np.mean(ratios))


def memory_fidelity(memory, extractor, reference_inputs):
    """Distances between memorized Gaussians and Gaussians re-estimated from held-out data.

    ``reference_inputs`` maps class id to held-out inputs of that class; they
    are encoded with the current ``extractor``. Returns, per origin task, the
    mean over its classes of the mean L2 distance, the covariance Frobenius
    distance and the symmetric KL divergence.
    """
    per_task = {}
    for e in memory:
        if e.class_id not in reference_inputs:
            continue
        feats = extractor.predict(reference_inputs[e.class_id])
        if feats.shape[0] < 2:
            raise TooFewSamples(f"class {e.class_id} has {feats.shape[0]} reference samples")
        mu, cov = linalg.estimate_gaussian(feats)
        try:
            kl = linalg.sym_kl((e.mean, e.cov), (mu, cov))
        except NotPositiveDefinite:
            kl = math.inf
        row = per_task.setdefault(e.task_id, {"mean_l2": [], "cov_l2": [], "sym_kl": []})
        row["mean_l2"].append(float(np.linalg.norm(e.mean - mu)))
        row["cov_l2"].append(float(np.linalg.norm(e.cov - cov)))
        row["sym_kl"].append(kl)
    return {
        task: {k: float(np.mean(v)) for k, v in row.items()}
        for task, row in sorted(per_task.items())
    }


def class_shift(memory_before, memory_after):
    """Euclidean displacement of each class mean between two memories."""
    before, after = set(memory_before.class_ids()), set(memory_after.class_ids())
    if before != after:
        raise ClassMismatch(f"class sets differ: {sorted(before ^ after)}")
    return {
        c: float(np.linalg.norm(memory_after[c].mean - memory_before[c].mean))
        for c in sorted(before)
    }
