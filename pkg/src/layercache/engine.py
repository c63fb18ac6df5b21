"""Cache-enabled inference with batch shrinking, and evaluation reports."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .builder import CacheModel
from .calibration import confusion_counts
from .core import DTYPE, ShapeError
from .graph import BackboneGraph

FINAL = "final"


class ResolveError(RuntimeError):
    def __init__(self, sample_id, exc):
        super().__init__(f"resolve callback failed for sample {sample_id!r}: {exc}")
        self.sample_id = sample_id


@dataclass(frozen=True)
class ExitRecord:
    sample_id: str
    exit: int | str  # cache ordinal, or FINAL
    predicted_class: int
    confidence: float
    path_flops: int
    timestamp: float = field(default=0.0, compare=False)

    def to_dict(self):
        return {"sample_id": self.sample_id, "exit": self.exit,
                "predicted_class": self.predicted_class, "confidence": self.confidence,
                "path_flops": self.path_flops}


class CacheEnabledModel:
    """A backbone plus the enabled cache models, in ordinal order."""

    def __init__(self, graph: BackboneGraph, caches: Sequence[CacheModel] = (),
                 tolerance: float | None = None):
        self.graph = graph
        self.caches = sorted(caches, key=lambda c: c.ordinal)
        self.tolerance = tolerance
        ords = [c.ordinal for c in self.caches]
        if len(set(ords)) != len(ords):
            raise ValueError(f"duplicate cache ordinals {ords}")
        self.by_layer = {}
        pos = {n: i for i, n in enumerate(graph.order)}
        last = -1
        for c in self.caches:
            if c.layer not in graph.nodes:
                raise ValueError(f"cache targets unknown layer {c.layer!r}")
            if not graph.dominates_output(c.layer):
                raise ValueError(f"layer {c.layer!r} does not dominate the output")
            if pos[c.layer] <= last:
                raise ValueError("cache ordinals must follow topological order")
            if c.layer in self.by_layer:
                raise ValueError(f"two caches on layer {c.layer!r}")
            last = pos[c.layer]
            self.by_layer[c.layer] = c
        self.cumulative = {c.layer: graph.cumulative_flops(c.layer) for c in self.caches}

    def without_caches(self) -> "CacheEnabledModel":
        return CacheEnabledModel(self.graph, [], self.tolerance)


def infer_batch(model: CacheEnabledModel, batch, resolve: Callable | None = None,
                sample_ids: Sequence | None = None) -> list:
    """Run one batch, resolving each sample at the first exit that takes it.

    ``resolve`` is called once per sample with its :class:`ExitRecord`, as
    soon as the sample's exit is known.  Returns the records in resolution
    order.
    """
    graph = model.graph
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim < 1 or len(x) == 0:
        raise ValueError("empty batch")
    if x.shape[1:] != tuple(graph.input_shape):
        raise ShapeError(f"batch shape {x.shape[1:]} does not match input {graph.input_shape}")
    ids = [str(i) for i in range(len(x))] if sample_ids is None else [str(s) for s in sample_ids]
    if len(ids) != len(x):
        raise ValueError(f"{len(ids)} sample ids for a batch of {len(x)}")

    records = []

    def emit(rec):
        records.append(rec)
        if resolve is not None:
            try:
                resolve(rec)
            except Exception as e:
                raise ResolveError(rec.sample_id, e) from e

    live = np.arange(len(x))
    acts = {}
    remaining = {n: len(graph.succs[n]) for n in graph.order}
    visited_c1 = 0
    for n in graph.order:
        if n == graph.input_node:
            out = graph.run_node(n, [x])
        else:
            out = graph.run_node(n, [acts[p] for p in graph.preds[n]])
            for p in graph.preds[n]:
                remaining[p] -= 1
                if remaining[p] == 0:
                    del acts[p]
        acts[n] = out
        cache = model.by_layer.get(n)
        if cache is None:
            continue
        pred, conf = cache.predict(out)
        visited_c1 += cache.c1
        hit = cache.hits(conf)
        flops = model.cumulative[n] + visited_c1
        for i in np.flatnonzero(hit):
            emit(ExitRecord(ids[live[i]], cache.ordinal, int(pred[i]), float(conf[i]), flops,
                            time.perf_counter()))
        if hit.any():
            keep = ~hit
            live = live[keep]
            acts = {k: v[keep] for k, v in acts.items()}
        if len(live) == 0:
            return records

    pd = acts[graph.output_node]
    if graph.nodes[graph.output_node].kind == "log-softmax":
        pd = np.exp(pd)
    pred = np.argmax(pd, axis=1)
    conf = np.max(pd, axis=1)
    flops = graph.total_flops + visited_c1
    for i, j in enumerate(live):
        emit(ExitRecord(ids[j], FINAL, int(pred[i]), float(conf[i]), flops, time.perf_counter()))
    return records


def infer(model: CacheEnabledModel, inputs, sample_ids=None, batch_size: int = 256) -> list:
    """Records for a whole dataset, ordered like ``inputs``."""
    x = np.asarray(inputs, dtype=DTYPE)
    ids = [str(i) for i in range(len(x))] if sample_ids is None else [str(s) for s in sample_ids]
    out = {}
    for i in range(0, len(x), batch_size):
        for rec in infer_batch(model, x[i:i + batch_size], sample_ids=ids[i:i + batch_size]):
            out[rec.sample_id] = rec
    return [out[s] for s in ids]


def average_flops(model: CacheEnabledModel, inputs, records=None):
    """(original, cache-enabled) mean per-sample FLOPs and the reduction ratio."""
    if records is None:
        records = infer(model, inputs)
    n = len(records)
    original = model.graph.total_flops
    enabled = sum(r.path_flops for r in records) / n
    return float(original), float(enabled), 1.0 - enabled / original


@dataclass
class ExitStats:
    exit: int | str
    layer: str
    reached: int
    hits: int
    cache_accuracy: float
    gt_accuracy: float
    effect: float
    counts: dict

    @property
    def hit_rate(self) -> float:
        return self.hits / self.reached if self.reached else 0.0

    def to_dict(self):
        return {"exit": self.exit, "layer": self.layer, "reached": self.reached, "hits": self.hits,
                "hit_rate": self.hit_rate, "cache_accuracy": self.cache_accuracy,
                "gt_accuracy": self.gt_accuracy, "effect": self.effect, "counts": self.counts}


@dataclass
class EvaluationReport:
    n: int
    exits: list
    base_accuracy: float
    cache_accuracy: float
    original_flops: float
    cache_enabled_flops: float
    latency_original: float | None
    latency_cache_enabled: float | None

    @property
    def flops_reduction(self) -> float:
        return 1.0 - self.cache_enabled_flops / self.original_flops

    @property
    def overall_hit_rate(self) -> float:
        return sum(e.hits for e in self.exits if e.exit != FINAL) / self.n

    def to_dict(self):
        return {"n": self.n, "base_accuracy": self.base_accuracy,
                "cache_enabled_accuracy": self.cache_accuracy,
                "original_flops": self.original_flops,
                "cache_enabled_flops": self.cache_enabled_flops,
                "flops_reduction": self.flops_reduction,
                "overall_hit_rate": self.overall_hit_rate,
                "latency_original_s": self.latency_original,
                "latency_cache_enabled_s": self.latency_cache_enabled,
                "exits": [e.to_dict() for e in self.exits]}

    def to_text(self) -> str:
        lines = [f"samples: {self.n}",
                 f"accuracy: base {self.base_accuracy:.4f}, cache-enabled {self.cache_accuracy:.4f}",
                 f"FLOPs/sample: original {self.original_flops:.0f}, cache-enabled "
                 f"{self.cache_enabled_flops:.0f} ({100 * self.flops_reduction:.2f}% reduction)"]
        if self.latency_original is not None:
            lines.append(f"latency/batch: original {1e3 * self.latency_original:.3f} ms, "
                         f"cache-enabled {1e3 * self.latency_cache_enabled:.3f} ms")
        lines.append("exit     layer            reached  hit_rate  cache_acc  gt_acc  effect")
        for e in self.exits:
            lines.append(f"{str(e.exit):8} {e.layer:16} {e.reached:7d}  {e.hit_rate:8.4f}  "
                         f"{e.cache_accuracy:9.4f}  {e.gt_accuracy:6.4f}  {e.effect:+.4f}")
        return "\n".join(lines)


def exit_stats(model: CacheEnabledModel, records, base_pred: dict, labels: dict) -> list:
    """Per-exit statistics recomputed from raw exit records."""
    n = len(records)
    reached = n
    stats = []
    exits = [(c.ordinal, c.layer) for c in model.caches] + [(FINAL, model.graph.output_node)]
    for ordinal, layer in exits:
        mine = [r for r in records if r.exit == ordinal]
        pred = np.array([r.predicted_class for r in mine], dtype=int)
        bpred = np.array([base_pred[r.sample_id] for r in mine], dtype=int)
        gt = np.array([labels[r.sample_id] for r in mine], dtype=int)
        k = len(mine)
        counts = confusion_counts(pred, bpred, gt, np.ones(k, bool))
        stats.append(ExitStats(
            ordinal, layer, reached, k,
            float(np.mean(pred == bpred)) if k else 0.0,
            float(np.mean(pred == gt)) if k else 0.0,
            (counts["notB_C"] - counts["B_notC"]) / n if n else 0.0,
            counts))
        reached -= k
    return stats


def _time_batches(fn, batches, reps, warmup):
    times = []
    for rep in range(reps + warmup):
        for b in batches:
            t0 = time.perf_counter()
            fn(b)
            dt = time.perf_counter() - t0
            if rep >= warmup:
                times.append(dt)
    return float(np.mean(times)) if times else None


def evaluate(model: CacheEnabledModel, inputs, labels, sample_ids=None, batch_size: int = 64,
             latency_reps: int = 100, warmup: int = 3) -> EvaluationReport:
    """Accuracy, per-exit statistics, FLOPs and latency on a labeled set."""
    x = np.asarray(inputs, dtype=DTYPE)
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise ValueError(f"{len(labels)} labels for {len(x)} samples")
    ids = [str(i) for i in range(len(x))] if sample_ids is None else [str(s) for s in sample_ids]
    base = model.graph.predict(x)
    base_pred = dict(zip(ids, np.argmax(base, axis=1).tolist()))
    gt = dict(zip(ids, labels.tolist()))
    records = infer(model, x, ids, batch_size)
    stats = exit_stats(model, records, base_pred, gt)
    base_acc = float(np.mean(np.argmax(base, axis=1) == labels))
    ce_acc = float(np.mean([r.predicted_class == gt[r.sample_id] for r in records]))
    orig, ce, _ = average_flops(model, x, records)
    lat_o = lat_c = None
    if latency_reps > 0:
        batches = [x[i:i + batch_size] for i in range(0, len(x), batch_size)]
        lat_o = _time_batches(model.graph.forward, batches, latency_reps, warmup)
        lat_c = _time_batches(lambda b: infer_batch(model, b), batches, latency_reps, warmup)
    return EvaluationReport(len(x), stats, base_acc, ce_acc, orig, ce, lat_o, lat_c)
