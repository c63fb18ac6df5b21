"""Desk-scale stand-ins for pre-trained backbones and their traffic.

``ImageMixture`` draws 10-class images from per-class smooth prototypes
with per-sample contrast and additive noise, so some samples are easy and
some hard.  ``conv_backbone_layers`` / ``mlp_backbone_layers`` describe chain graphs whose
block outputs are flagged for caching, and :func:`pretrain` fits them with
labels (standing in for whoever trained the backbone originally).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import core
from .core import DTYPE, Sequential, TrainConfig
from .graph import BackboneGraph, chain, save_model


@dataclass
class ImageMixture:
    num_classes: int = 10
    shape: tuple = (1, 16, 16)
    seed: int = 0
    noise: float = 1.0
    contrast: tuple = (0.4, 2.0)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        c, h, w = self.shape
        coarse = rng.standard_normal((self.num_classes, c, 4, 4))
        up = np.kron(coarse, np.ones((1, 1, (h + 3) // 4, (w + 3) // 4)))[:, :, :h, :w]
        # light 3x3 box blur keeps the prototypes smooth
        pad = np.pad(up, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        blur = sum(pad[:, :, i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9
        blur -= blur.mean(axis=(1, 2, 3), keepdims=True)
        blur /= blur.std(axis=(1, 2, 3), keepdims=True)
        self.prototypes = blur.astype(DTYPE)

    def sample(self, n: int, seed: int):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, self.num_classes, n)
        a = rng.uniform(*self.contrast, size=(n, 1, 1, 1))
        x = a * self.prototypes[y] + self.noise * rng.standard_normal((n,) + tuple(self.shape))
        return x.astype(DTYPE), y


@dataclass
class VectorMixture:
    """Gaussian clusters in ``dim`` dimensions with spread-out difficulty."""

    num_classes: int = 10
    dim: int = 16
    seed: int = 0
    noise: float = 1.0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.centers = (1.5 * rng.standard_normal((self.num_classes, self.dim))).astype(DTYPE)

    def sample(self, n: int, seed: int):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, self.num_classes, n)
        scale = rng.uniform(0.3, 1.6, size=(n, 1))
        x = self.centers[y] + self.noise * scale * rng.standard_normal((n, self.dim))
        return x.astype(DTYPE), y


def conv_backbone_layers(shape=(1, 16, 16), num_classes: int = 10, width: int = 16) -> list:
    """(name, layer, block_output) tuples for a five-block conv classifier."""
    c = shape[0]
    w = width
    return [
        ("conv1", core.conv2d(c, w // 2, 3, 1, 1), False),
        ("relu1", core.relu(), True),
        ("conv2", core.conv2d(w // 2, w, 3, 2, 1), False),
        ("relu2", core.relu(), True),
        ("conv3", core.conv2d(w, w, 3, 1, 1), False),
        ("relu3", core.relu(), True),
        ("conv4", core.conv2d(w, 2 * w, 3, 2, 1), False),
        ("relu4", core.relu(), True),
        ("gap", core.global_avg_pool(), False),
        ("fc1", core.dense(2 * w, 2 * w), False),
        ("relu5", core.relu(), True),
        ("fc2", core.dense(2 * w, num_classes), False),
        ("softmax", core.softmax_layer(), False),
    ]


def mlp_backbone_layers(dim: int = 16, num_classes: int = 10, width: int = 32,
                        blocks: int = 6) -> list:
    layers = []
    prev = dim
    for b in range(1, blocks + 1):
        layers.append((f"fc{b}", core.dense(prev, width), False))
        layers.append((f"block{b}", core.relu(), True))
        prev = width
    layers.append(("head", core.dense(prev, num_classes), False))
    layers.append(("softmax", core.softmax_layer(), False))
    return layers


def pretrain(layers, input_shape, num_classes, x, y, cfg: TrainConfig,
             val=None) -> BackboneGraph:
    """Fit a chain backbone on labeled data and return it as a graph."""
    specs = [l for _, l, _ in layers]
    train_specs = specs[:-1] + [core.log_softmax_layer()]
    net = Sequential(train_specs, input_shape, seed=cfg.seed)
    onehot = np.eye(num_classes, dtype=DTYPE)
    vdata = None if val is None else (val[0], onehot[val[1]])
    result = core.train(net, (x, onehot[y]), cfg, vdata)
    weights = {name: ps for (name, _, _), ps in zip(layers, result.params) if ps}
    return chain(layers, input_shape, num_classes, weights=weights)


def accuracy(graph: BackboneGraph, x, y) -> float:
    return float(np.mean(np.argmax(graph.predict(x), axis=1) == y))


def untrained(layers, input_shape, num_classes, seed=0) -> BackboneGraph:
    return chain(layers, input_shape, num_classes, seed=seed)


def write_toy_project(folder, seed: int = 0, n_pretrain: int = 3000, n_traffic: int = 4000,
                      noise: float = 2.0, pretrain_cfg: TrainConfig | None = None) -> dict:
    """Pretrain a conv backbone and lay out a ready-to-run pipeline project.

    Writes ``backbone/``, ``data/`` (traffic inputs plus held-back labels),
    and ``config.json``; returns the config dict and the backbone's accuracy
    on the traffic.
    """
    prob = ImageMixture(seed=seed, noise=noise)
    x, y = prob.sample(n_pretrain, seed + 1)
    vx, vy = prob.sample(max(n_pretrain // 6, 10), seed + 2)
    tx, ty = prob.sample(n_traffic, seed + 3)
    cfg = pretrain_cfg or TrainConfig(lr=3e-3, max_epochs=20, patience=3, seed=seed)
    g = pretrain(conv_backbone_layers(prob.shape, prob.num_classes), prob.shape,
                 prob.num_classes, x, y, cfg, val=(vx, vy))
    save_model(g, os.path.join(folder, "backbone", "model.json"))
    os.makedirs(os.path.join(folder, "data"), exist_ok=True)
    np.save(os.path.join(folder, "data", "inputs.npy"), tx)
    np.save(os.path.join(folder, "data", "labels.npy"), ty)
    config = {
        "backbone": "backbone/model.json",
        "data": "data",
        "artifacts": "artifacts",
        "tolerance": 0.02,
        "menus": {"kernels": [3], "strides": [2], "channels": [8], "widths": [32],
                  "max_convs": 2, "max_linears": 2},
        "train": {"lr": 0.003, "optimizer": "adam", "batch_size": 64, "max_epochs": 15,
                  "patience": 3, "seed": seed},
        "search_epochs": 15,
        "latency_reps": 10,
    }
    with open(os.path.join(folder, "config.json"), "w") as f:
        json.dump(config, f, indent=1)
        f.write("\n")
    return {"config": config, "backbone_accuracy": accuracy(g, tx, ty)}
