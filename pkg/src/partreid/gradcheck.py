"""Finite-difference verification of the loss gradients on random toys."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import BatchFeatures, combined_loss, half_sq_l2, memory_softmax_loss, triplet_center_loss
from .memory import MemoryBank

KINK_GAP = 1e-3
TOLERANCE = 1e-5


@dataclass
class ToyProblem:
    f: np.ndarray  # [batch, b, C]
    labels: np.ndarray
    image_indices: np.ndarray
    bank: MemoryBank
    centers: object
    alpha: float
    beta: float
    lam: float


def _kink_margin(f, labels, centers, alpha):
    """Smallest distance of any hinge argument or negative choice from a switch."""
    own = centers.index_of(labels)
    diff = f[:, :, None, :] - centers.centers.transpose(1, 0, 2)[None]
    d = 0.5 * (diff * diff).sum(-1)
    pos = np.take_along_axis(d, own[:, None, None].repeat(d.shape[1], 1), axis=2)[..., 0]
    d[np.arange(len(own)), :, own] = np.inf
    srt = np.sort(d, axis=-1)
    hinge = pos + alpha - srt[..., 0]
    tie = srt[..., 1] - srt[..., 0] if d.shape[-1] > 2 else np.full(hinge.shape, np.inf)
    return min(np.abs(hinge).min(), tie.min())


def random_problem(rng, batch=4, parts=2, channels=8, identities=3, slots_per_identity=2):
    """Random bank/batch pair whose triplet-center hinges sit away from kinks."""
    while True:
        ids = np.repeat(np.arange(identities), slots_per_identity)
        bank = MemoryBank(ids, parts, channels, delta=0.5)
        for i in range(len(ids)):
            for p in range(parts):
                bank.update(i, p, rng.uniform(-1, 1, channels))
        centers = bank.class_centers()
        idx = rng.choice(len(ids), size=batch, replace=False)
        f = rng.uniform(-1, 1, size=(batch, parts, channels))
        alpha = float(rng.uniform(0.5, 2.0))
        if _kink_margin(f, ids[idx], centers, alpha) > KINK_GAP:
            return ToyProblem(f, ids[idx], idx, bank, centers, alpha, float(rng.uniform(0.1, 1.0)),
                              float(rng.uniform(0.1, 2.0)))


def loss_functions(problem):
    """Scalar functions of the feature tensor, keyed by loss name."""
    p = problem
    target = p.centers.centers[p.centers.index_of(p.labels)]

    def batch(t):
        return BatchFeatures(t, p.labels, p.image_indices)

    def hsl2(t):
        return ad.sum_all(half_sq_l2(t, target))

    def tcl(t):
        return triplet_center_loss(batch(t), p.centers, p.alpha).value

    def sm_instance(t):
        return memory_softmax_loss(batch(t), p.bank, p.beta, "instance").value

    def sm_class(t):
        return memory_softmax_loss(batch(t), p.bank, p.beta, "class", p.centers).value

    def combined(t):
        return combined_loss(tcl(t), sm_instance(t), p.lam)

    return {
        "half_sq_l2": hsl2,
        "triplet_center": tcl,
        "softmax_instance": sm_instance,
        "softmax_class": sm_class,
        "combined": combined,
    }


def run_gradcheck(seed=0, configs=50, step=1e-6):
    """Max relative error per loss over ``configs`` random problems."""
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(configs):
        problem = random_problem(rng)
        for name, fn in loss_functions(problem).items():
            err = ad.finite_diff_check(fn, problem.f, step)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
