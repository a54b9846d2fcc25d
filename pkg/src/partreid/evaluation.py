"""Query/gallery ranking with junk filtering, AP/mAP and CMC."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Descriptor:
    sample_id: str
    identity: str
    camera: str
    vector: np.ndarray


@dataclass(frozen=True)
class DescriptorSet:
    """Column-wise storage for many descriptors."""

    sample_ids: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        n = len(self.sample_ids)
        if not (len(self.identities) == len(self.cameras) == len(self.vectors) == n):
            raise ValueError("descriptor columns have different lengths")
        if self.vectors.ndim != 2 or not np.all(np.isfinite(self.vectors)):
            raise ValueError("descriptor vectors must be a finite 2-d array")

    @classmethod
    def from_records(cls, records, vectors):
        return cls(
            np.array([r.sample_id for r in records]),
            np.array([r.identity for r in records]),
            np.array([r.camera for r in records]),
            np.asarray(vectors, dtype=np.float64),
        )

    @classmethod
    def from_list(cls, descriptors):
        descriptors = list(descriptors)
        return cls(
            np.array([d.sample_id for d in descriptors]),
            np.array([d.identity for d in descriptors]),
            np.array([d.camera for d in descriptors]),
            np.array([d.vector for d in descriptors], dtype=np.float64).reshape(len(descriptors), -1),
        )

    def __len__(self):
        return len(self.sample_ids)

    def __getitem__(self, i):
        return Descriptor(str(self.sample_ids[i]), str(self.identities[i]), str(self.cameras[i]), self.vectors[i])

    def subset(self, idx):
        idx = np.asarray(idx)
        return DescriptorSet(self.sample_ids[idx], self.identities[idx], self.cameras[idx], self.vectors[idx])


@dataclass(frozen=True)
class RankingResult:
    query_id: str
    ranked_ids: np.ndarray  # junk removed, best first
    matches: np.ndarray  # bool, same identity as the query
    ap: float | None  # None when the query has no non-junk match
    num_gt: int

    @property
    def first_match(self):
        """1-based rank of the first correct item, or None."""
        hits = np.flatnonzero(self.matches)
        return int(hits[0]) + 1 if hits.size else None


def similarities(query_vec, vectors, metric="cosine"):
    if metric == "cosine":
        qn = np.linalg.norm(query_vec)
        gn = np.linalg.norm(vectors, axis=1)
        denom = qn * gn
        raw = vectors @ query_vec
        return np.divide(raw, denom, out=np.zeros_like(raw), where=denom > 0)
    if metric == "euclidean":
        return -np.linalg.norm(vectors - query_vec, axis=1)
    raise ValueError(f"unknown metric {metric!r}")


def rank(query, gallery, metric="cosine", junk_camera=True):
    """Rank ``gallery`` for ``query``.

    The query itself and, when ``junk_camera`` is set, every item sharing
    both identity and camera with it are dropped first. Order is by
    decreasing similarity, ties by ascending sample id.
    """
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    same_id = gallery.identities == query.identity
    junk = gallery.sample_ids == query.sample_id
    if junk_camera:
        junk |= same_id & (gallery.cameras == query.camera)
    keep = np.flatnonzero(~junk)
    sims = similarities(np.asarray(query.vector, dtype=np.float64), gallery.vectors[keep], metric)
    ids = gallery.sample_ids[keep]
    order = np.lexsort((ids, -sims))
    matches = same_id[keep][order]
    num_gt = int(matches.sum())
    result = RankingResult(query.sample_id, ids[order], matches, None, num_gt)
    if num_gt:
        result = RankingResult(query.sample_id, ids[order], matches, average_precision(result), num_gt)
    return result


def average_precision(result):
    """Sum of precision at each correct rank divided by the ground-truth count."""
    matches = np.asarray(result.matches, dtype=bool)
    num_gt = int(matches.sum())
    if num_gt == 0:
        raise ValueError(f"query {result.query_id} has no ground truth; AP undefined")
    hits = np.flatnonzero(matches)
    precision = np.arange(1, num_gt + 1) / (hits + 1)
    return float(precision.sum() / num_gt)


def mean_ap(results):
    aps = [r.ap for r in results if r.ap is not None]
    if not aps:
        raise ValueError("no query with a defined AP")
    return float(np.mean(aps))


def cmc(results, max_k):
    """Fraction of (defined) queries whose first match is within rank k."""
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    firsts = np.array([r.first_match for r in results if r.ap is not None], dtype=np.int64)
    if firsts.size == 0:
        return np.zeros(max_k)
    return np.array([(firsts <= k).mean() for k in range(1, max_k + 1)])


def evaluate(queries, gallery, metric="cosine", junk_camera=True):
    results = [rank(queries[i], gallery, metric, junk_camera) for i in range(len(queries))]
    undefined = sum(r.ap is None for r in results)
    if undefined:
        log.info("%d queries without a non-junk match excluded from mAP", undefined)
    return results


def brute_force_oracle(query, gallery):
    """AP by a deliberately naive path: pure-Python cosine table, stable sort.

    Returns None when no non-junk item shares the query identity.
    """
    q = [float(v) for v in query.vector]
    qn = math.sqrt(sum(v * v for v in q))
    table = []
    for i in range(len(gallery)):
        sid = str(gallery.sample_ids[i])
        ident = str(gallery.identities[i])
        cam = str(gallery.cameras[i])
        if sid == query.sample_id or (ident == query.identity and cam == query.camera):
            continue
        g = [float(v) for v in gallery.vectors[i]]
        gn = math.sqrt(sum(v * v for v in g))
        s = sum(a * b for a, b in zip(q, g))
        sim = s / (qn * gn) if qn * gn > 0 else 0.0
        table.append((sim, sid, ident == query.identity))
    table.sort(key=lambda row: row[1])
    table.sort(key=lambda row: -row[0])
    n_gt = sum(1 for row in table if row[2])
    if n_gt == 0:
        return None
    total, correct = 0.0, 0
    for k, row in enumerate(table, start=1):
        if row[2]:
            correct += 1
            total += correct / k
    return total / n_gt


def random_baseline_map(results, shuffles=1000, seed=0):
    """Monte-Carlo mAP of uniformly shuffled rankings for the same queries."""
    rng = np.random.default_rng(seed)
    per_query = []
    for r in results:
        if r.ap is None:
            continue
        m = np.asarray(r.matches, dtype=bool)
        aps = [average_precision(RankingResult(r.query_id, r.ranked_ids, rng.permutation(m), None, r.num_gt))
               for _ in range(shuffles)]
        per_query.append(np.mean(aps))
    if not per_query:
        raise ValueError("no query with a defined AP")
    return float(np.mean(per_query))


def vehicleid_protocol(descriptors, trials=10, seed=0, metric="cosine", max_k=10):
    """Gallery of one random image per identity, every other image a probe.

    Metrics are averaged over ``trials`` seeded draws.
    """
    rng = np.random.default_rng(seed)
    idents = np.unique(descriptors.identities)
    maps, curves = [], []
    for _ in range(trials):
        chosen = np.array([rng.choice(np.flatnonzero(descriptors.identities == i)) for i in idents])
        probe_mask = np.ones(len(descriptors), dtype=bool)
        probe_mask[chosen] = False
        gallery = descriptors.subset(np.sort(chosen))
        probes = descriptors.subset(np.flatnonzero(probe_mask))
        results = evaluate(probes, gallery, metric, junk_camera=False)
        maps.append(mean_ap(results))
        curves.append(cmc(results, max_k))
    return {"mAP": float(np.mean(maps)), "cmc": np.mean(curves, axis=0), "trials": trials}


# --------------------------------------------------------------- reports


def summarize(results, max_k=10, trials=1, extra=None):
    curve = cmc(results, max(max_k, 10))
    summary = {
        "mAP": mean_ap(results),
        "cmc1": float(curve[0]),
        "cmc5": float(curve[4]),
        "cmc10": float(curve[9]),
        "trials": trials,
        "queries": len(results),
        "undefined_queries": sum(r.ap is None for r in results),
    }
    if extra:
        summary.update(extra)
    return summary


def write_summary(path, summary):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def write_ranking_csv(path, results, top=10):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "AP", "first_match_rank", "top10"])
        for r in results:
            w.writerow([
                r.query_id,
                "" if r.ap is None else repr(r.ap),
                "" if r.first_match is None else r.first_match,
                " ".join(str(s) for s in r.ranked_ids[:top]),
            ])
