"""Shallow cache classifiers: search space, distillation training, selection."""
from __future__ import annotations

import base64
import itertools
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import core
from .core import DTYPE, Sequential, TrainConfig

DISABLED_THRESHOLD = 1.0 + 1e-6  # above any attainable confidence: never hits


@dataclass(frozen=True)
class SearchMenus:
    kernels: tuple = (1, 3, 5)
    strides: tuple = (1, 2)
    channels: tuple = (8, 16)
    widths: tuple = (32, 64)
    max_convs: int = 2
    max_linears: int = 2

    def __post_init__(self):
        for name in ("kernels", "strides", "channels", "widths"):
            if not getattr(self, name):
                raise ValueError(f"menu {name!r} is empty")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class CacheArchitecture:
    """``convs`` holds (channels, kernel, stride) per conv layer; ``hidden``
    holds widths of dense layers before the output layer."""

    convs: tuple = ()
    hidden: tuple = ()

    def layers(self, tap_shape, num_classes: int) -> list:
        tap_shape = tuple(tap_shape)
        out = []
        shape = tap_shape
        if self.convs and len(tap_shape) != 3:
            raise core.ShapeError(f"conv stack needs a (C, H, W) tap, got {tap_shape}")
        for ch, k, s in self.convs:
            out.append(core.conv2d(shape[0], ch, k, s))
            out.append(core.relu())
            shape = core.output_shape(out[-2], shape)
        if len(shape) == 3:
            out.append(core.global_avg_pool())
            shape = (shape[0],)
        elif len(shape) != 1:
            out.append(core.flatten())
            shape = (int(np.prod(shape)),)
        for w in self.hidden:
            out.append(core.dense(shape[0], w))
            out.append(core.relu())
            shape = (w,)
        out.append(core.dense(shape[0], num_classes))
        out.append(core.log_softmax_layer())
        return out

    def describe(self, tap_shape=None) -> str:
        parts = [f"conv{k}x{k}/s{s}->{c}" for c, k, s in self.convs]
        rank = 3 if tap_shape is None and self.convs else len(tap_shape or (0,))
        if rank == 3:
            parts.append("gap")
        elif rank != 1:
            parts.append("flatten")
        parts += [f"dense{w}" for w in self.hidden] + ["out"]
        return " | ".join(parts)

    def to_dict(self):
        return {"convs": [list(c) for c in self.convs], "hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(c) for c in d["convs"]), tuple(d["hidden"]))


def architecture_flops(arch: CacheArchitecture, tap_shape, num_classes) -> int:
    return core.sequence_flops(arch.layers(tap_shape, num_classes), tap_shape)


def _fits(arch, tap_shape, num_classes):
    try:
        arch.layers(tap_shape, num_classes)
    except core.ShapeError:
        return False
    return True


def enumerate_search_space(tap_shape, num_classes: int, menus: SearchMenus = SearchMenus(),
                           fallback_flops: int | None = None) -> list:
    """Every architecture in the menus whose shapes work out, cheaper than
    ``fallback_flops`` when given; shallowest and narrowest first."""
    tap_shape = tuple(tap_shape)
    max_convs = menus.max_convs if len(tap_shape) == 3 else 0
    conv_opts = [(c, k, s) for c in sorted(menus.channels)
                 for k in sorted(menus.kernels) for s in sorted(menus.strides)]
    archs = []
    for n_conv in range(max_convs + 1):
        for n_lin in range(1, menus.max_linears + 1):
            for convs in itertools.product(conv_opts, repeat=n_conv):
                for hidden in itertools.product(sorted(menus.widths), repeat=n_lin - 1):
                    arch = CacheArchitecture(tuple(convs), tuple(hidden))
                    if _fits(arch, tap_shape, num_classes):
                        archs.append(arch)

    def key(a):
        return (len(a.convs), len(a.hidden), sum(c for c, _, _ in a.convs), sum(a.hidden),
                a.convs, a.hidden)

    archs.sort(key=key)
    if fallback_flops is not None:
        archs = [a for a in archs if architecture_flops(a, tap_shape, num_classes) < fallback_flops]
    return archs


@dataclass
class CacheModel:
    layer: str
    architecture: CacheArchitecture
    tap_shape: tuple
    num_classes: int
    params: list
    c1: int
    c2: int
    ordinal: int
    temperature: float = 1.0
    threshold: float = DISABLED_THRESHOLD
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tap_shape = tuple(self.tap_shape)
        self.net = Sequential(self.architecture.layers(self.tap_shape, self.num_classes),
                              self.tap_shape, self.params)

    @property
    def enabled(self) -> bool:
        return self.threshold <= 1.0

    def logits(self, acts, chunk: int = 1024) -> np.ndarray:
        acts = np.asarray(acts, dtype=DTYPE)
        parts = [self.net.logits(acts[i:i + chunk]) for i in range(0, len(acts), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.num_classes), DTYPE)

    def scaled_pd(self, logits, temperature: float | None = None) -> np.ndarray:
        t = self.temperature if temperature is None else temperature
        return core.softmax(np.asarray(logits, dtype=DTYPE) / DTYPE(t))

    def predict(self, acts):
        """(predicted class, calibrated confidence) per row."""
        pd = self.scaled_pd(self.logits(acts))
        return np.argmax(pd, axis=1), np.max(pd, axis=1)

    def hits(self, confidence) -> np.ndarray:
        return np.asarray(confidence, dtype=np.float64) >= float(self.threshold)

    def with_(self, **kw) -> "CacheModel":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes()
                        for ps in self.params for p in ps)
        return {
            "layer": self.layer,
            "architecture": self.architecture.to_dict(),
            "tap_shape": list(self.tap_shape),
            "num_classes": self.num_classes,
            "c1": self.c1,
            "c2": self.c2,
            "ordinal": self.ordinal,
            "temperature": self.temperature,
            "threshold": self.threshold,
            "metrics": self.metrics,
            "weights": base64.b64encode(blob).decode(),
        }

    @classmethod
    def from_dict(cls, d) -> "CacheModel":
        arch = CacheArchitecture.from_dict(d["architecture"])
        layers = arch.layers(d["tap_shape"], d["num_classes"])
        raw = np.frombuffer(base64.b64decode(d["weights"]), dtype="<f4")
        params, off = [], 0
        for layer in layers:
            ps = []
            for s in core.param_shapes(layer):
                k = int(np.prod(s))
                ps.append(raw[off:off + k].astype(DTYPE).reshape(s))
                off += k
            params.append(ps)
        if off != raw.size:
            raise ValueError(f"cache {d['layer']}: weight blob size mismatch")
        return cls(d["layer"], arch, tuple(d["tap_shape"]), d["num_classes"], params,
                   d["c1"], d["c2"], d["ordinal"], d["temperature"], d["threshold"], d["metrics"])


def save_cache(cache: CacheModel, path) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(cache.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


def load_cache(path) -> CacheModel:
    with open(path) as f:
        return CacheModel.from_dict(json.load(f))


def agreement(cache: CacheModel, acts, teacher) -> float:
    """Fraction of rows where the cache's argmax matches the teacher's."""
    if len(acts) == 0:
        return 0.0
    pred = np.argmax(cache.logits(acts), axis=1)
    return float(np.mean(pred == np.argmax(teacher, axis=1)))


def train_cache(arch: CacheArchitecture, md, cfg: TrainConfig, candidate=None,
                init: CacheModel | None = None) -> CacheModel:
    """Distil the backbone's output PDs into ``arch`` from the medial dataset.

    Trains on the train split and early-stops on the val split.  ``candidate``
    supplies fallback FLOPs and the ordinal; ``init`` warm-starts from an
    existing cache's weights.
    """
    x, t, _ = md.part("train")
    vx, vt, _ = md.part("val")
    if len(x) == 0 or len(vx) == 0:
        raise ValueError(f"layer {md.layer}: empty train or val split")
    layers = arch.layers(md.tap_shape, md.num_classes)
    params = init.params if init is not None else None
    net = Sequential(layers, md.tap_shape, params, seed=cfg.seed)
    result = core.train(net, (x, t), cfg, (vx, vt))
    c2 = candidate.fallback_flops if candidate is not None else 0
    ordinal = candidate.ordinal if candidate is not None else 0
    cache = CacheModel(md.layer, arch, md.tap_shape, md.num_classes, result.params,
                       net.flops(), c2, ordinal)
    cache.metrics = {
        "val_accuracy": agreement(cache, vx, vt),
        "val_loss": result.val_loss[result.best_epoch - 1] if result.best_epoch else
        net.eval_loss(vx, vt),
        "epochs_run": len(result.train_loss),
        "best_epoch": result.best_epoch,
        "train_loss": result.train_loss,
    }
    return cache


def converged(accuracy: float, num_classes: int, margin: float = 0.05) -> bool:
    return accuracy > 1.0 / num_classes + margin


def is_converged(cache: CacheModel, md, margin: float = 0.05) -> bool:
    vx, vt, _ = md.part("val")
    return converged(agreement(cache, vx, vt), cache.num_classes, margin)


def select_architecture(rows, num_classes: int, slack: float = 0.01, margin: float = 0.05):
    """Index of the cheapest converged row within ``slack`` of the best
    accuracy, or None.  Rows are dicts with ``accuracy`` and ``c1``; earlier
    rows win ties."""
    ok = [i for i, r in enumerate(rows) if converged(r["accuracy"], num_classes, margin)]
    if not ok:
        return None
    best = max(rows[i]["accuracy"] for i in ok)
    near = [i for i in ok if rows[i]["accuracy"] >= best - slack - 1e-12]
    return min(near, key=lambda i: (rows[i]["c1"], i))


@dataclass
class SearchResult:
    layer: str
    selected: CacheModel | None
    rows: list

    @property
    def discarded(self) -> bool:
        return self.selected is None


def search(candidate, md, menus: SearchMenus, cfg: TrainConfig, slack: float = 0.01,
           margin: float = 0.05, epoch_cap: int = 30) -> SearchResult:
    """Train every architecture in the menus and keep the cheapest good one.

    Returns a SearchResult whose ``selected`` is None when no architecture
    beats chance by ``margin`` (the layer is discarded).
    """
    archs = enumerate_search_space(md.tap_shape, md.num_classes, menus, candidate.fallback_flops)
    capped = replace(cfg, max_epochs=min(cfg.max_epochs, epoch_cap))
    rows, models = [], []
    for arch in archs:
        cache = train_cache(arch, md, capped, candidate)
        models.append(cache)
        rows.append({"architecture": arch.describe(md.tap_shape), "spec": arch.to_dict(),
                     "accuracy": cache.metrics["val_accuracy"], "c1": cache.c1,
                     "converged": converged(cache.metrics["val_accuracy"], md.num_classes, margin),
                     "selected": False})
    pick = select_architecture(rows, md.num_classes, slack, margin)
    if pick is not None:
        rows[pick]["selected"] = True
    return SearchResult(candidate.name, None if pick is None else models[pick], rows)
