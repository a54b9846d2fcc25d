"""Metric-learning losses over part features.

All losses take features ``f`` shaped ``[batch, b, C]`` and return a
scalar :class:`~partreid.autodiff.Tensor`. Per-part terms are summed and
the batch dimension is averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    alpha: float = 1.0
    beta: float = 0.05
    softmax_target: str = "class"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.alpha < 0:
            raise ValueError(f"margin alpha must be >= 0, got {self.alpha}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"temperature beta must lie in (0, 1], got {self.beta}")
        if self.softmax_target not in ("instance", "class"):
            raise ValueError(f"softmax_target must be 'instance' or 'class', got {self.softmax_target!r}")


@dataclass(frozen=True)
class BatchFeatures:
    f: ad.Tensor  # [batch, b, C]
    labels: np.ndarray  # [batch]
    image_indices: np.ndarray  # [batch] rows of the memory bank

    @property
    def batch(self):
        return self.f.shape[0]


@dataclass
class LossResult:
    value: ad.Tensor
    skipped: int = 0

    def __float__(self):
        return float(self.value.values)


def half_sq_l2(f, c):
    """0.5 * ||f - c||^2 over the last axis."""
    d = ad.add(f, ad.scale(c, -1.0))
    return ad.scale(ad.dot(d, d), 0.5)


def _batch_sum(terms, batch):
    """Sum of the selected terms divided by the batch size."""
    if terms.values.size == 0:
        return ad.Tensor(0.0)
    return ad.scale(ad.mean_over_region(terms), terms.values.size / batch)


def nearest_negative(f_values, labels, centers):
    """Index of the closest other-identity center per sample and part."""
    own = centers.index_of(labels)
    # [B, b, R] squared distances, constant w.r.t. the tape
    diff = f_values[:, :, None, :] - centers.centers.transpose(1, 0, 2)[None]
    d = 0.5 * (diff * diff).sum(axis=-1)
    d[np.arange(len(own)), :, own] = np.inf
    return d.argmin(axis=-1)


def triplet_center_loss(batch, centers, alpha):
    """Hinge pulling each part toward its identity center and away from the
    nearest other-identity center by at least ``alpha``."""
    if len(centers) < 2:
        raise ValueError("triplet-center loss needs centers for at least two identities")
    own = centers.index_of(batch.labels)
    if (own < 0).any():
        missing = np.asarray(batch.labels)[own < 0].tolist()
        raise ValueError(f"no center for identities {missing}")
    f = batch.f
    neg = nearest_negative(f.values, batch.labels, centers)
    parts = np.arange(f.shape[1])
    c_pos = centers.centers[own]  # [B, b, C]
    c_neg = centers.centers[neg, parts[None, :]]  # [B, b, C]
    hinge = ad.relu(ad.add(ad.add(half_sq_l2(f, c_pos), alpha), ad.scale(half_sq_l2(f, c_neg), -1.0)))
    return LossResult(_batch_sum(hinge, batch.batch))


def memory_softmax_loss(batch, bank, beta, softmax_target="instance", centers=None):
    """Cross-entropy of each part against the memory at temperature ``beta``.

    ``instance``: the target is the sample's own slot and the partition sum
    runs over initialized slots. ``class``: targets and sum run over class
    centers. Terms whose target is unavailable are skipped and counted.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"temperature beta must lie in (0, 1], got {beta}")
    f = batch.f
    n, b = f.shape[0], f.shape[1]
    if softmax_target == "instance":
        keys = bank.V.transpose(1, 0, 2)  # [b, M, C]
        mask = bank.initialized.T  # [b, M]
        target = np.repeat(np.asarray(batch.image_indices, dtype=np.int64)[:, None], b, axis=1)
        valid = bank.initialized[target[:, 0]]  # [B, b]
    elif softmax_target == "class":
        if centers is None:
            centers = bank.class_centers()
        keys = centers.centers.transpose(1, 0, 2)  # [b, R, C]
        mask = np.ones(keys.shape[:2], dtype=bool)
        own = centers.index_of(batch.labels)
        target = np.repeat(np.maximum(own, 0)[:, None], b, axis=1)
        valid = np.repeat((own >= 0)[:, None], b, axis=1)
        if keys.shape[1] == 0:
            valid[:] = False
    else:
        raise ValueError(f"unknown softmax target {softmax_target!r}")

    skipped = int((~valid).sum())
    if not valid.any():
        return LossResult(ad.Tensor(0.0), skipped)
    # per-part [b, B, C] @ [b, C, K] -> [B, b, K]
    raw = ad.matmul(ad.transpose(f, (1, 0, 2)), np.ascontiguousarray(keys.transpose(0, 2, 1)))
    scores = ad.scale(ad.transpose(raw, (1, 0, 2)), 1.0 / beta)
    lse = ad.logsumexp(scores, mask=mask[None])
    bi, pi = np.nonzero(valid)
    terms = ad.add(ad.take(lse, (bi, pi)), ad.scale(ad.take(scores, (bi, pi, target[bi, pi])), -1.0))
    return LossResult(_batch_sum(terms, n), skipped)


def batch_triplet_loss(batch, alpha):
    """Batch-all triplet hinge on half squared distances between samples.

    Used for the ablation baselines that train without class centers.
    """
    labels = np.asarray(batch.labels)
    same = labels[:, None] == labels[None, :]
    a, p, q = np.nonzero(same[:, :, None] & ~same[:, None, :] & ~np.eye(len(labels), dtype=bool)[:, :, None])
    if a.size == 0:
        return LossResult(ad.Tensor(0.0))
    f = batch.f
    fa = ad.take(f, (slice(None), None))
    fb = ad.take(f, (None, slice(None)))
    dist = half_sq_l2(fa, fb)  # [B, B, b]
    hinge = ad.relu(ad.add(ad.add(ad.take(dist, (a, p)), alpha), ad.scale(ad.take(dist, (a, q)), -1.0)))
    # mean over triplets, sum over parts
    return LossResult(ad.scale(ad.mean_over_region(hinge), hinge.shape[1]))


def combined_loss(tcl, sm, lam):
    """lam * tcl + sm."""
    return ad.add(ad.scale(tcl, lam), sm)
