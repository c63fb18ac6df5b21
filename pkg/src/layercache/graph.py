"""Backbone DAG: manifest I/O, tapped forward passes, candidate layers.

Manifest layout (``<name>.json`` plus one ``<node>.bin`` per parameterized
node in the same directory)::

    {
      "format": "layercache-backbone/1",
      "num_classes": 10,
      "nodes": [
        {"name": "x", "kind": "input", "config": {"shape": [1, 16, 16]}},
        {"name": "conv1", "kind": "conv2d", "config": {...},
         "block_output": false, "weights": "conv1.bin"},
        ...
      ],
      "edges": [["x", "conv1"], ...]
    }

A weight blob holds the node's parameters back to back (weight, then bias;
or scale, then shift) as little-endian float32 in row-major order.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import core
from .core import DTYPE, LayerSpec, ShapeError

FORMAT = "layercache-backbone/1"
_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


class ManifestError(ValueError):
    pass


class MissingBlobError(ManifestError):
    pass


class BlobSizeError(ManifestError):
    pass


class CycleError(ManifestError):
    def __init__(self, node):
        super().__init__(f"cycle detected through node {node!r}")
        self.node = node


class GraphError(ManifestError):
    pass


@dataclass(frozen=True)
class CandidateLayer:
    name: str
    tap_shape: tuple
    cumulative_flops: int
    fallback_flops: int
    ordinal: int

    def to_dict(self):
        return {"name": self.name, "tap_shape": list(self.tap_shape),
                "cumulative_flops": self.cumulative_flops,
                "fallback_flops": self.fallback_flops, "ordinal": self.ordinal}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(d["tap_shape"]), int(d["cumulative_flops"]),
                   int(d["fallback_flops"]), int(d["ordinal"]))


def _topological_order(names: Sequence[str], succs: dict, preds: dict) -> list:
    indeg = {n: len(preds[n]) for n in names}
    rank = {n: i for i, n in enumerate(names)}
    ready = sorted((n for n in names if indeg[n] == 0), key=rank.get)
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m in succs[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
                ready.sort(key=rank.get)
    if len(order) != len(names):
        left = {n for n in names if indeg[n] > 0}
        # walk predecessors inside the leftover set until a node repeats
        node = min(left, key=rank.get)
        seen = []
        while node not in seen:
            seen.append(node)
            node = next(p for p in preds[node] if p in left)
        raise CycleError(node)
    return order


class BackboneGraph:
    """Immutable DAG of layers with weights.

    ``nodes`` maps name to :class:`LayerSpec` (insertion order is the manifest
    order); ``block_outputs`` names the nodes flagged as component outputs.
    """

    def __init__(self, nodes: dict, edges: Iterable, weights: dict, num_classes: int,
                 block_outputs: Iterable[str] = ()):
        self.nodes = dict(nodes)
        self.edges = [tuple(e) for e in edges]
        self.num_classes = int(num_classes)
        self.block_outputs = frozenset(block_outputs)
        for name in self.nodes:
            if not _NAME_RE.match(name):
                raise GraphError(f"invalid node name {name!r}")
        self.preds = {n: [] for n in self.nodes}
        self.succs = {n: [] for n in self.nodes}
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise GraphError(f"edge {a!r} -> {b!r} references an unknown node")
            self.succs[a].append(b)
            self.preds[b].append(a)
        names = list(self.nodes)
        self.order = _topological_order(names, self.succs, self.preds)

        sources = [n for n in names if not self.preds[n]]
        sinks = [n for n in names if not self.succs[n]]
        if len(sources) != 1 or len(sinks) != 1:
            raise GraphError(f"need exactly one input and one output node, got {sources} / {sinks}")
        self.input_node, self.output_node = sources[0], sinks[0]
        if self.nodes[self.input_node].kind != "input":
            raise GraphError(f"input node {self.input_node!r} must have kind 'input'")
        if self.nodes[self.output_node].kind not in ("softmax", "log-softmax"):
            raise GraphError("output node must be softmax or log-softmax")
        for n in names:
            if n != self.input_node and self.nodes[n].kind == "input":
                raise GraphError(f"node {n!r}: only the source may have kind 'input'")
            if self.nodes[n].kind != "add" and len(self.preds[n]) > 1:
                raise GraphError(f"node {n!r} ({self.nodes[n].kind}) has {len(self.preds[n])} inputs")
            if self.nodes[n].kind == "add" and len(self.preds[n]) < 2:
                raise GraphError(f"add node {n!r} needs at least two inputs")

        self.shapes = {}
        self.flops = {}
        for n in self.order:
            layer = self.nodes[n]
            if n == self.input_node:
                in_shape = tuple(layer.config["shape"])
            else:
                in_shapes = [self.shapes[p] for p in self.preds[n]]
                if any(s != in_shapes[0] for s in in_shapes):
                    raise ShapeError(f"node {n!r}: mismatched input shapes {in_shapes}")
                in_shape = in_shapes[0]
            self.shapes[n] = core.output_shape(layer, in_shape)
            f = core.layer_flops(layer, in_shape)
            if layer.kind == "add":
                f *= len(self.preds[n]) - 1
            self.flops[n] = f
        if self.shapes[self.output_node] != (self.num_classes,):
            raise ShapeError(f"output shape {self.shapes[self.output_node]} != ({self.num_classes},)")

        self.weights = {}
        for n in names:
            expected = [tuple(s) for s in core.param_shapes(self.nodes[n])]
            got = [np.asarray(w, dtype=DTYPE) for w in weights.get(n, [])]
            if [w.shape for w in got] != expected:
                raise BlobSizeError(f"node {n!r}: weights {[w.shape for w in got]} != {expected}")
            for w in got:
                w.setflags(write=False)
            self.weights[n] = got
        self.total_flops = sum(self.flops.values())
        self.content_hash = self._hash()

    # -- properties ---------------------------------------------------------

    @property
    def input_shape(self):
        return self.shapes[self.input_node]

    def _hash(self):
        h = hashlib.sha256()
        for n in self.order:
            h.update(_blob_bytes(self.weights[n]))
        return h.hexdigest()

    def reachable(self, start: str, removed: str | None = None, reverse=False) -> set:
        nbrs = self.preds if reverse else self.succs
        if start == removed:
            return set()
        seen = {start}
        todo = deque([start])
        while todo:
            n = todo.popleft()
            for m in nbrs[n]:
                if m != removed and m not in seen:
                    seen.add(m)
                    todo.append(m)
        return seen

    def dominates_output(self, node: str) -> bool:
        """True if every input->output path passes through ``node``."""
        return self.output_node not in self.reachable(self.input_node, removed=node)

    def cumulative_flops(self, node: str) -> int:
        return sum(self.flops[a] for a in self.reachable(node, reverse=True))

    # -- execution ------------------------------------------------------------

    def run_node(self, name: str, inputs: Sequence[np.ndarray]) -> np.ndarray:
        layer = self.nodes[name]
        if layer.kind == "add":
            out = inputs[0]
            for other in inputs[1:]:
                out = out + other
            return out
        return core.forward(layer, inputs[0], self.weights[name])

    def check_batch(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=DTYPE)
        if x.ndim < 1 or x.shape[1:] != tuple(self.input_shape):
            raise ShapeError(f"batch shape {x.shape[1:]} does not match input {self.input_shape}")
        return x

    def forward_with_taps(self, batch, tap_set: Iterable[str] = ()):
        """Run the backbone, returning (output PDs, {node: activation})."""
        taps = list(tap_set)
        for t in taps:
            if t not in self.nodes:
                raise KeyError(f"unknown tap {t!r}")
        x = self.check_batch(batch)
        acts = {}
        remaining = {n: len(self.succs[n]) for n in self.order}
        tapped = {}
        for n in self.order:
            if n == self.input_node:
                out = self.run_node(n, [x])
            else:
                out = self.run_node(n, [acts[p] for p in self.preds[n]])
                for p in self.preds[n]:
                    remaining[p] -= 1
                    if remaining[p] == 0 and p not in taps:
                        del acts[p]
            acts[n] = out
            if n in taps:
                tapped[n] = out
        out = acts[self.output_node]
        if self.nodes[self.output_node].kind == "log-softmax":
            out = np.exp(out)
        return out, tapped

    def forward(self, batch):
        return self.forward_with_taps(batch)[0]

    def predict(self, batch, chunk: int = 512):
        """Output PDs for an arbitrarily large batch, computed in chunks."""
        x = self.check_batch(batch)
        parts = [self.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)]
        if not parts:
            return np.zeros((0, self.num_classes), DTYPE)
        return np.concatenate(parts)

    # -- serialization ----------------------------------------------------------

    def to_manifest(self) -> dict:
        nodes = []
        for n, layer in self.nodes.items():
            d = {"name": n, **layer.to_dict(), "block_output": n in self.block_outputs}
            if self.weights[n]:
                d["weights"] = f"{n}.bin"
            nodes.append(d)
        return {"format": FORMAT, "num_classes": self.num_classes,
                "nodes": nodes, "edges": [list(e) for e in self.edges]}


def _blob_bytes(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def save_model(graph: BackboneGraph, path) -> None:
    path = os.fspath(path)
    folder = os.path.dirname(path) or "."
    os.makedirs(folder, exist_ok=True)
    for n in graph.order:
        if graph.weights[n]:
            with open(os.path.join(folder, f"{n}.bin"), "wb") as f:
                f.write(_blob_bytes(graph.weights[n]))
    with open(path, "w") as f:
        json.dump(graph.to_manifest(), f, indent=1)
        f.write("\n")


def load_model(path) -> BackboneGraph:
    path = os.fspath(path)
    folder = os.path.dirname(path) or "."
    try:
        with open(path) as f:
            m = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: {e}") from None
    if m.get("format") != FORMAT:
        raise ManifestError(f"{path}: unsupported format {m.get('format')!r}")
    nodes, weights, blocks = {}, {}, []
    for d in m["nodes"]:
        name = d["name"]
        layer = LayerSpec.from_dict(d)
        nodes[name] = layer
        if d.get("block_output"):
            blocks.append(name)
        shapes = core.param_shapes(layer)
        if not shapes:
            continue
        blob = d.get("weights")
        if blob is None:
            raise MissingBlobError(f"node {name!r} has parameters but no weight blob")
        bpath = os.path.join(folder, blob)
        if not os.path.exists(bpath):
            raise MissingBlobError(f"node {name!r}: weight blob {bpath} not found")
        raw = np.fromfile(bpath, dtype="<f4")
        need = sum(int(np.prod(s)) for s in shapes)
        if raw.size != need:
            raise BlobSizeError(f"node {name!r}: blob has {raw.size} floats, expected {need}")
        arrays, off = [], 0
        for s in shapes:
            k = int(np.prod(s))
            arrays.append(raw[off:off + k].astype(DTYPE).reshape(s))
            off += k
        weights[name] = arrays
    return BackboneGraph(nodes, m["edges"], weights, m["num_classes"], blocks)


def chain(layers: Sequence[tuple], input_shape, num_classes, seed=0, weights=None) -> BackboneGraph:
    """Build a chain graph from ``(name, LayerSpec, block_output)`` tuples.

    An input node named ``"input"`` is prepended.  Weights are initialised
    from ``seed`` unless given.
    """
    rng = np.random.default_rng(seed)
    nodes = {"input": core.input_layer(input_shape)}
    edges, blocks, w = [], [], {}
    prev = "input"
    for name, layer, is_block in layers:
        nodes[name] = layer
        edges.append((prev, name))
        if is_block:
            blocks.append(name)
        w[name] = (weights or {}).get(name) or core.init_params(layer, rng)
        prev = name
    return BackboneGraph(nodes, edges, w, num_classes, blocks)


def identify_candidates(graph: BackboneGraph, skip_last_k: int = 1) -> list:
    """Candidate layers for caching, ordered by topological position.

    A node qualifies when it is active at inference, flagged as a block
    output, dominates the output node and leaves some backbone compute after
    it; the last ``skip_last_k`` qualifying nodes are then dropped.
    """
    eligible = []
    for n in graph.order:
        if n in (graph.input_node, graph.output_node):
            continue
        layer = graph.nodes[n]
        if not layer.inference_active or n not in graph.block_outputs:
            continue
        if not graph.dominates_output(n):
            continue
        cum = graph.cumulative_flops(n)
        if graph.total_flops - cum <= 0:
            continue
        eligible.append((n, cum))
    if skip_last_k > 0:
        eligible = eligible[:-skip_last_k] if skip_last_k < len(eligible) else []
    return [CandidateLayer(n, tuple(graph.shapes[n]), cum, graph.total_flops - cum, i + 1)
            for i, (n, cum) in enumerate(eligible)]
