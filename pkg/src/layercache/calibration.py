"""Temperature scaling, calibration error, and confidence thresholds under a
per-cache accuracy-drop budget."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .builder import DISABLED_THRESHOLD, CacheModel

THETA_GRID = tuple(i / 100 for i in range(101))
TAU_RANGE = (0.05, 20.0)


def nll(logits, labels, temperature: float) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(logits / T)."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(z)), labels]))


def golden_section(f, lo: float, hi: float, tol: float = 1e-5, max_iter: int = 200) -> float:
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2


def fit_temperature(logits, labels, bounds=TAU_RANGE) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot calibrate on an empty set")
    tau = golden_section(lambda t: nll(logits, labels, t), *bounds)
    # the minimiser must not be worse than leaving the logits alone
    if nll(logits, labels, 1.0) < nll(logits, labels, tau):
        tau = 1.0
    return float(tau)


def calibrate_temperature(cache: CacheModel, md) -> float:
    """Temperature minimising the NLL of the backbone's argmax on the val split."""
    vx, vt, _ = md.part("val")
    return fit_temperature(cache.logits(vx), np.argmax(vt, axis=1))


def ece_from(confidence, correct, bins: int = 15) -> float:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    conf = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        return 0.0
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        m = idx == b
        if m.any():
            total += m.sum() * abs(conf[m].mean() - correct[m].mean())
    return float(total / conf.size)


def ece(cache: CacheModel, md, bins: int = 15, temperature: float | None = None) -> float:
    """Expected calibration error on the val split against backbone pseudo-labels."""
    vx, vt, _ = md.part("val")
    pd = cache.scaled_pd(cache.logits(vx), temperature)
    correct = np.argmax(pd, axis=1) == np.argmax(vt, axis=1)
    return ece_from(pd.max(axis=1), correct, bins)


@dataclass
class ThresholdReport:
    layer: str
    ordinal: int
    tolerance: float
    budget: float
    grid: list
    hit_rate: list
    cache_accuracy: list
    bound: list
    threshold: float
    n_samples: int

    @property
    def disabled(self) -> bool:
        return self.threshold > 1.0

    def rows(self):
        return [{"theta": t, "hit_rate": h, "cache_accuracy": c, "bound": b}
                for t, h, c, b in zip(self.grid, self.hit_rate, self.cache_accuracy, self.bound)]

    def to_dict(self):
        return {"layer": self.layer, "ordinal": self.ordinal, "tolerance": self.tolerance,
                "budget": self.budget, "threshold": self.threshold, "n_samples": self.n_samples,
                "rows": self.rows()}

    def to_text(self) -> str:
        th = "disabled" if self.disabled else f"{self.threshold:.2f}"
        lines = [f"cache {self.ordinal} @ {self.layer}: budget {self.budget:.6f} "
                 f"(T={self.tolerance}), threshold {th}",
                 "  theta  hit_rate  cache_acc  bound"]
        for t, h, c, b in zip(self.grid, self.hit_rate, self.cache_accuracy, self.bound):
            if round(t * 100) % 10 == 0:
                lines.append(f"  {t:5.2f}  {h:8.4f}  {c:9.4f}  {b:.5f}")
        return "\n".join(lines)


def threshold_curve(pred, confidence, reference, grid=THETA_GRID):
    """Hit rate, cache accuracy and HR*(1-CA) for each threshold in ``grid``.

    The bound column is computed as (disagreeing hits) / n, which equals
    HR*(1-CA) without the rounding of the product.
    """
    conf = np.asarray(confidence, dtype=np.float64)
    agree = np.asarray(pred) == np.asarray(reference)
    n = len(conf)
    hr, ca, bound = [], [], []
    for theta in grid:
        hit = conf >= theta
        h = int(hit.sum())
        a = int((hit & agree).sum())
        hr.append(h / n)
        ca.append(a / h if h else 1.0)
        bound.append((h - a) / n)
    return hr, ca, bound


def budget_for(tolerance: float, ordinal: int) -> float:
    return tolerance / 2 ** ordinal


def assign_threshold(cache: CacheModel, md, tolerance: float, ordinal: int | None = None,
                     grid=THETA_GRID) -> ThresholdReport:
    """Smallest grid threshold whose estimated accuracy drop fits the
    ordinal's share ``tolerance / 2**ordinal`` of the tolerance on the val
    split; the disabled sentinel if none does."""
    if not 0 <= tolerance < 1:
        raise ValueError("tolerance must be in [0, 1)")
    ordinal = cache.ordinal if ordinal is None else ordinal
    if ordinal < 1:
        raise ValueError("ordinal is 1-based")
    vx, vt, _ = md.part("val")
    if len(vx) == 0:
        raise ValueError(f"layer {md.layer}: empty validation split")
    pred, conf = cache.predict(vx)
    hr, ca, bound = threshold_curve(pred, conf, np.argmax(vt, axis=1), grid)
    budget = budget_for(tolerance, ordinal)
    theta = next((t for t, b in zip(grid, bound) if b <= budget), DISABLED_THRESHOLD)
    return ThresholdReport(cache.layer, ordinal, tolerance, budget, list(grid), hr, ca, bound,
                           theta, len(vx))


CATEGORIES = ("BC", "BC_wrong", "B_notC", "notB_C", "notB_notC")


@dataclass
class AccuracyEffect:
    counts: dict
    hits: int
    n: int

    @property
    def effect(self) -> float:
        """Rate of hits the cache fixes minus rate of hits it breaks."""
        if self.n == 0:
            return 0.0
        return (self.counts["notB_C"] - self.counts["B_notC"]) / self.n

    def to_dict(self):
        return {"counts": dict(self.counts), "hits": self.hits, "n": self.n, "effect": self.effect}


def confusion_counts(cache_pred, backbone_pred, labels, hit_mask) -> dict:
    c = np.asarray(cache_pred)[hit_mask]
    b = np.asarray(backbone_pred)[hit_mask]
    g = np.asarray(labels)[hit_mask]
    return {
        "BC": int(np.sum((b == c) & (b == g))),
        "BC_wrong": int(np.sum((b == c) & (b != g))),
        "B_notC": int(np.sum((b != c) & (b == g))),
        "notB_C": int(np.sum((b != c) & (c == g))),
        "notB_notC": int(np.sum((b != c) & (b != g) & (c != g))),
    }


def actual_accuracy_effect(cache: CacheModel, md, labels, threshold: float | None = None,
                           split: str | None = "test") -> AccuracyEffect:
    """Score a cache's hits against ground truth on a labeled split.

    ``labels`` is either a mapping from sample id to class or a sequence
    aligned with the records of ``split``.  Evaluation only.
    """
    if split is None:
        acts, teacher, ids = md.activations, md.teacher, md.sample_ids
    else:
        acts, teacher, ids = md.part(split)
    if isinstance(labels, dict):
        labels = [labels[i] for i in ids]
    labels = np.asarray(labels)
    if len(labels) != len(ids):
        raise ValueError(f"{len(labels)} labels for {len(ids)} samples")
    theta = cache.threshold if threshold is None else threshold
    pred, conf = cache.predict(acts)
    hit = np.asarray(conf, dtype=np.float64) >= theta
    counts = confusion_counts(pred, np.argmax(teacher, axis=1), labels, hit)
    return AccuracyEffect(counts, int(hit.sum()), len(ids))
