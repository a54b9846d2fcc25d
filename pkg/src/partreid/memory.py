"""External exemplar memory: one slot per training image per part."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-12


def _normalize(v):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(norm >= NORM_EPS, v / np.where(norm >= NORM_EPS, norm, 1.0), 0.0)


@dataclass
class ClassCenters:
    """Per-identity, per-part means of the initialized memory slots."""

    labels: np.ndarray  # [R] identity labels, sorted
    centers: np.ndarray  # [R, b, C]
    counts: np.ndarray  # [R] slots contributing to each identity

    def index_of(self, labels):
        pos = {lab: i for i, lab in enumerate(self.labels.tolist())}
        return np.array([pos.get(lab, -1) for lab in np.asarray(labels).tolist()], dtype=np.int64)

    def __len__(self):
        return len(self.labels)


class MemoryBank:
    """Slot array ``V[M, b, C]`` with identity labels and init flags.

    Writes follow ``V <- delta*V + (1-delta)*h``; the first write to a slot
    stores ``h`` directly. Stored slots are unit-normalized when
    ``normalize`` is set.
    """

    def __init__(self, ids, num_parts, channels, delta=0.5, normalize=True):
        ids = np.asarray(ids)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("memory bank needs a non-empty list of identities")
        if not 0.0 <= delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {delta}")
        self.ids = ids.copy()
        self.ids.setflags(write=False)
        self.V = np.zeros((ids.size, num_parts, channels))
        self.initialized = np.zeros((ids.size, num_parts), dtype=bool)
        self.delta = float(delta)
        self.normalize = normalize

    @classmethod
    def from_records(cls, records, num_parts, channels, **kwargs):
        """One slot per training record, in manifest order."""
        return cls([r.identity for r in records], num_parts, channels, **kwargs)

    @property
    def size(self):
        return self.V.shape[0]

    @property
    def num_parts(self):
        return self.V.shape[1]

    @property
    def channels(self):
        return self.V.shape[2]

    def update(self, image_index, part_index, h, delta=None):
        """Blend one slot toward ``h``; returns the pre-normalization value."""
        delta = self.delta if delta is None else float(delta)
        if not 0.0 <= delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {delta}")
        if not (0 <= image_index < self.size and 0 <= part_index < self.num_parts):
            raise IndexError(
                f"slot ({image_index}, {part_index}) outside bank of {self.size}x{self.num_parts}"
            )
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (self.channels,) or not np.all(np.isfinite(h)):
            raise ValueError(f"memory write needs a finite vector of size {self.channels}")
        if self.initialized[image_index, part_index]:
            blended = delta * self.V[image_index, part_index] + (1.0 - delta) * h
            if delta == 1.0:
                return blended  # renormalizing would perturb the last bits
        else:
            blended = h.copy()
        self.V[image_index, part_index] = _normalize(blended) if self.normalize else blended
        self.initialized[image_index, part_index] = True
        return blended

    def update_many(self, image_indices, h, delta=None):
        """Write all parts of several images at once; ``h`` is ``[n, b, C]``.

        Equivalent to calling :meth:`update` per slot, image indices must be
        distinct.
        """
        delta = self.delta if delta is None else float(delta)
        if not 0.0 <= delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {delta}")
        idx = np.asarray(image_indices, dtype=np.int64)
        if len(np.unique(idx)) != idx.size:
            raise ValueError("update_many needs distinct image indices")
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise IndexError(f"image index outside bank of size {self.size}")
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (idx.size, self.num_parts, self.channels) or not np.all(np.isfinite(h)):
            raise ValueError("memory write needs finite vectors shaped [n, b, C]")
        init = self.initialized[idx][..., None]
        blended = np.where(init, delta * self.V[idx] + (1.0 - delta) * h, h)
        stored = _normalize(blended) if self.normalize else blended
        if delta == 1.0:
            stored = np.where(init, self.V[idx], stored)
        self.V[idx] = stored
        self.initialized[idx] = True
        return blended

    def class_centers(self, labels=None):
        """Group means of initialized slots, recomputed from scratch.

        Identities lacking an initialized slot for some part are left out.
        """
        uniq = np.unique(self.ids) if labels is None else np.unique(np.asarray(labels))
        lookup = {lab: i for i, lab in enumerate(uniq.tolist())}
        rows = np.array([lookup.get(lab, -1) for lab in self.ids.tolist()], dtype=np.int64)
        keep = rows >= 0
        sums = np.zeros((uniq.size, self.num_parts, self.channels))
        counts = np.zeros((uniq.size, self.num_parts))
        w = self.initialized[keep].astype(np.float64)
        np.add.at(sums, rows[keep], self.V[keep] * w[..., None])
        np.add.at(counts, rows[keep], w)
        slot_counts = np.zeros(uniq.size, dtype=np.int64)
        np.add.at(slot_counts, rows[keep], self.initialized[keep].any(axis=1).astype(np.int64))
        ok = (counts > 0).all(axis=1)
        centers = sums[ok] / counts[ok][..., None]
        return ClassCenters(uniq[ok], centers, slot_counts[ok])

    def similarity_scores(self, f, part_index, beta):
        """Scaled inner products ``V[i, part] . f / beta``; NaN for empty slots."""
        if not 0.0 < beta <= 1.0:
            raise ValueError(f"temperature must lie in (0, 1], got {beta}")
        f = np.asarray(f, dtype=np.float64)
        if f.shape != (self.channels,):
            raise ValueError(f"query vector must have size {self.channels}")
        scores = self.V[:, part_index] @ f / beta
        return np.where(self.initialized[:, part_index], scores, np.nan)

    def copy(self):
        other = MemoryBank.__new__(MemoryBank)
        other.ids = self.ids
        other.V = self.V.copy()
        other.initialized = self.initialized.copy()
        other.delta = self.delta
        other.normalize = self.normalize
        return other
