"""Choosing which built caches to enable.

Each cache's validation predictions are recorded once; any subset is then
scored by replaying those records in ordinal order, so no cache-enabled
forward pass is needed per subset.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .engine import CacheEnabledModel, infer

MAX_EXHAUSTIVE = 20


@dataclass
class CacheRecord:
    ordinal: int
    layer: str
    predicted: np.ndarray
    confidence: np.ndarray
    threshold: float
    c1: int
    c2: int


@dataclass
class ValRecord:
    sample_ids: list
    caches: dict  # ordinal -> CacheRecord

    @property
    def ordinals(self):
        return sorted(self.caches)

    def costs(self):
        return {o: (c.c1, c.c2) for o, c in self.caches.items()}

    def to_dict(self):
        return {"sample_ids": self.sample_ids, "caches": [
            {"ordinal": c.ordinal, "layer": c.layer, "threshold": c.threshold, "c1": c.c1,
             "c2": c.c2, "predicted": c.predicted.tolist(),
             "confidence": [float(v) for v in c.confidence]}
            for _, c in sorted(self.caches.items())]}

    @classmethod
    def from_dict(cls, d):
        caches = {}
        for c in d["caches"]:
            caches[c["ordinal"]] = CacheRecord(
                c["ordinal"], c["layer"], np.asarray(c["predicted"], dtype=int),
                np.asarray(c["confidence"], dtype=np.float32), c["threshold"], c["c1"], c["c2"])
        return cls(list(d["sample_ids"]), caches)


def record_val_predictions(caches, datasets: dict, split: str = "val") -> ValRecord:
    """One pass of every cache over its own layer's validation records."""
    ids = None
    recs = {}
    for cache in caches:
        acts, _, sids = datasets[cache.layer].part(split)
        if ids is None:
            ids = sids
        elif sids != ids:
            raise ValueError(f"layer {cache.layer}: validation sample ids differ from other layers")
        pred, conf = cache.predict(acts)
        recs[cache.ordinal] = CacheRecord(cache.ordinal, cache.layer, pred, conf,
                                          float(cache.threshold), cache.c1, cache.c2)
    return ValRecord(ids or [], recs)


def replay_subset(record: ValRecord, subset) -> dict:
    """ordinal -> (hit sample ids, miss sample ids) for the caches in ``subset``."""
    alive = np.ones(len(record.sample_ids), bool)
    out = {}
    for o in sorted(set(subset)):
        c = record.caches[o]
        hit = alive & (c.confidence.astype(np.float64) >= c.threshold)
        miss = alive & ~hit
        out[o] = ([record.sample_ids[i] for i in np.flatnonzero(hit)],
                  [record.sample_ids[i] for i in np.flatnonzero(miss)])
        alive &= ~hit
    return out


def score_subset(replay: dict, costs: dict) -> int:
    """Caching score: FLOPs saved by hits minus cache overhead paid by misses."""
    k = 0
    for o, (hits, misses) in replay.items():
        c1, c2 = costs[o]
        k += len(hits) * (c2 - c1) - len(misses) * c1
    return int(k)


@dataclass
class SubsetChoice:
    subset: tuple
    score: int
    table: list

    def to_dict(self):
        return {"subset": list(self.subset), "score": self.score, "table": self.table}


def _tie_key(subset, score):
    return (-score, len(subset), subset)


def optimize(record: ValRecord, max_caches: int = MAX_EXHAUSTIVE) -> SubsetChoice:
    """Best-scoring subset over all 2**N subsets.

    Ties go to fewer caches, then the lexicographically smallest ordinals.
    """
    ords = record.ordinals
    if len(ords) > max_caches:
        raise ValueError(f"{len(ords)} caches exceed the exhaustive limit of {max_caches}")
    costs = record.costs()
    table = []
    best = None
    for mask in range(1 << len(ords)):
        subset = tuple(o for i, o in enumerate(ords) if mask >> i & 1)
        replay = replay_subset(record, subset)
        score = score_subset(replay, costs)
        table.append({"mask": mask, "subset": list(subset),
                      "hits": {str(o): len(h) for o, (h, _) in replay.items()},
                      "misses": {str(o): len(m) for o, (_, m) in replay.items()},
                      "score": score})
        if best is None or _tie_key(subset, score) < _tie_key(*best):
            best = (subset, score)
    return SubsetChoice(best[0], best[1], table)


def simulate_subset(caches, graph, inputs, sample_ids, subset) -> dict:
    """ordinal -> (hits, misses) counted from a real cache-enabled forward pass."""
    chosen = [c for c in caches if c.ordinal in set(subset)]
    model = CacheEnabledModel(graph, chosen)
    records = infer(model, inputs, sample_ids)
    reached = len(records)
    out = {}
    for c in model.caches:
        h = sum(1 for r in records if r.exit == c.ordinal)
        out[c.ordinal] = (h, reached - h)
        reached -= h
    return out, records


def oracle_optimize(caches, graph, inputs, sample_ids=None):
    """Brute force: run the cache-enabled model once per subset.

    Returns (best subset, {subset: (score, per-cache (hits, misses))}).  Only
    meant as a test oracle for :func:`optimize`.
    """
    caches = sorted(caches, key=lambda c: c.ordinal)
    ords = [c.ordinal for c in caches]
    by_ord = {c.ordinal: c for c in caches}
    results = {}
    best = None
    for r in range(len(ords) + 1):
        for subset in itertools.combinations(ords, r):
            counts, _ = simulate_subset(caches, graph, inputs, sample_ids, subset)
            score = sum(h * (by_ord[o].c2 - by_ord[o].c1) - m * by_ord[o].c1
                        for o, (h, m) in counts.items())
            results[subset] = (score, counts)
            if best is None or _tie_key(subset, score) < _tie_key(*best):
                best = (subset, score)
    return best[0], results
