"""Stripe partitioning and per-stripe average pooling."""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


@dataclass(frozen=True)
class PartFeatureSet:
    """Pooled part vectors for a batch: ``parts`` has shape ``[batch, b, C]``."""

    parts: ad.Tensor
    orientations: tuple
    sample_ids: tuple = ()

    @property
    def num_parts(self):
        return len(self.orientations)


def stripe_bounds(height, p):
    """Row ranges for ``p`` stripes; the last one absorbs ``height % p``."""
    if p < 1:
        raise ValueError(f"number of parts must be >= 1, got {p}")
    if p > height:
        raise ValueError(f"cannot cut {p} stripes from height {height}")
    size = height // p
    bounds = [(i * size, (i + 1) * size) for i in range(p - 1)]
    bounds.append(((p - 1) * size, height))
    return bounds


def partition(fm, p):
    """Cut a feature map into ``p`` contiguous stripes along its height."""
    return [ad.take(fm.data, (slice(None), slice(lo, hi))) for lo, hi in stripe_bounds(fm.height, p)]


def pool_parts(stripes):
    """Spatial mean of each ``[B, h, W, C]`` stripe -> list of ``[B, C]``."""
    if not stripes:
        raise ValueError("pool_parts needs at least one stripe")
    return [ad.mean_over_region(s, axes=(1, 2)) for s in stripes]


def _stack(vectors):
    b, c = vectors[0].shape
    return ad.concat([ad.reshape(v, (b, 1, c)) for v in vectors], axis=1)


def assemble(h_horiz, h_vert, p1, p2, sample_ids=(), normalize=True):
    if len(h_horiz) != p1 or len(h_vert) != p2:
        raise ValueError(
            f"assemble: expected {p1}+{p2} parts, got {len(h_horiz)}+{len(h_vert)}"
        )
    parts = _stack(list(h_horiz) + list(h_vert))
    if normalize:
        parts = ad.l2_normalize(parts, axis=-1)
    return PartFeatureSet(parts, (HORIZONTAL,) * p1 + (VERTICAL,) * p2, tuple(sample_ids))


def part_features(t, t_transposed, p1, p2, sample_ids=(), normalize=True):
    """Partition, pool and assemble both branches in one call."""
    h_horiz = pool_parts(partition(t, p1))
    h_vert = pool_parts(partition(t_transposed, p2)) if p2 else []
    return assemble(h_horiz, h_vert, p1, p2, sample_ids, normalize)
