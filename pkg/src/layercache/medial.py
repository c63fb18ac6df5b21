"""Medial datasets: (activation at layer L, backbone output PD) pairs built
from unlabeled inference traffic.

File layout (all little-endian)::

    b"LCMD\\x01\\x00\\x00\\x00"          8-byte magic
    uint32                             header length in bytes
    header                             UTF-8 JSON: layer, tap_shape, num_classes,
                                       backbone_hash, record_count, sample_ids, splits
    float32[record_count, *tap_shape]  activations
    float32[record_count, num_classes] teacher PDs
"""
from __future__ import annotations

import json
import math
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .core import DTYPE, ShapeError

MAGIC = b"LCMD\x01\x00\x00\x00"
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.5, 0.2, 0.3)


class MedialFormatError(ValueError):
    pass


class StaleDataWarning(UserWarning):
    """Dataset was collected from a backbone with different weights."""


@dataclass
class MedialDataset:
    layer: str
    activations: np.ndarray
    teacher: np.ndarray
    sample_ids: list
    backbone_hash: str
    splits: np.ndarray | None = None  # array of split names, one per record

    def __post_init__(self):
        self.activations = np.asarray(self.activations, dtype=DTYPE)
        self.teacher = np.asarray(self.teacher, dtype=DTYPE)
        self.sample_ids = [str(s) for s in self.sample_ids]
        n = len(self.sample_ids)
        if len(self.activations) != n or len(self.teacher) != n:
            raise ShapeError(f"{n} ids, {len(self.activations)} activations, {len(self.teacher)} PDs")
        if self.splits is not None:
            self.splits = np.asarray(self.splits, dtype=object)

    def __len__(self):
        return len(self.sample_ids)

    @property
    def tap_shape(self):
        return tuple(self.activations.shape[1:])

    @property
    def num_classes(self):
        return self.teacher.shape[1]

    def part(self, name: str):
        """(activations, teacher PDs, sample ids) of one split."""
        if self.splits is None:
            raise ValueError("dataset has not been split")
        idx = np.flatnonzero(self.splits == name)
        return self.activations[idx], self.teacher[idx], [self.sample_ids[i] for i in idx]

    def pseudo_labels(self, name: str | None = None):
        t = self.teacher if name is None else self.part(name)[1]
        return np.argmax(t, axis=1)

    def equals(self, other: "MedialDataset") -> bool:
        same_splits = (self.splits is None and other.splits is None) or (
            self.splits is not None and other.splits is not None
            and list(self.splits) == list(other.splits))
        return (self.layer == other.layer and self.backbone_hash == other.backbone_hash
                and self.sample_ids == other.sample_ids and same_splits
                and self.activations.tobytes() == other.activations.tobytes()
                and self.activations.shape == other.activations.shape
                and self.teacher.tobytes() == other.teacher.tobytes())


def collect(graph, samples, candidates, sample_ids=None, chunk: int = 256) -> dict:
    """One MedialDataset per candidate, keyed by layer name.

    The teacher PD for every record is the backbone's own output; no labels
    are involved.
    """
    x = np.asarray(samples, dtype=DTYPE)
    if len(x) == 0:
        raise ValueError("no samples to collect from")
    if x.shape[1:] != tuple(graph.input_shape):
        raise ShapeError(f"sample shape {x.shape[1:]} != backbone input {graph.input_shape}")
    if sample_ids is None:
        width = len(str(len(x) - 1))
        sample_ids = [f"s{i:0{width}d}" for i in range(len(x))]
    sample_ids = [str(s) for s in sample_ids]
    if len(sample_ids) != len(x) or len(set(sample_ids)) != len(x):
        raise ValueError("sample ids must be unique and one per sample")
    names = [c.name if hasattr(c, "name") else str(c) for c in candidates]
    acts = {n: [] for n in names}
    pds = []
    for i in range(0, len(x), chunk):
        out, taps = graph.forward_with_taps(x[i:i + chunk], names)
        pds.append(out)
        for n in names:
            acts[n].append(taps[n])
    teacher = np.concatenate(pds)
    return {n: MedialDataset(n, np.concatenate(acts[n]), teacher, sample_ids, graph.content_hash)
            for n in names}


def split_assignment(sample_ids, ratios=DEFAULT_RATIOS, seed: int = 0) -> np.ndarray:
    """Split name per id; a pure function of the id set, ratios and seed."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(sample_ids)
    if n < 3:
        raise ValueError(f"need at least 3 records to split, got {n}")
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    by_id = sorted(range(n), key=lambda i: sample_ids[i])
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    for rank, pos in enumerate(perm):
        rec = by_id[pos]
        labels[rec] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return labels


def split(md: MedialDataset, ratios=DEFAULT_RATIOS, seed: int = 0) -> MedialDataset:
    return MedialDataset(md.layer, md.activations, md.teacher, md.sample_ids, md.backbone_hash,
                         split_assignment(md.sample_ids, ratios, seed))


def save(md: MedialDataset, path) -> None:
    header = {
        "layer": md.layer,
        "tap_shape": list(md.tap_shape),
        "num_classes": int(md.num_classes),
        "backbone_hash": md.backbone_hash,
        "record_count": len(md),
        "sample_ids": md.sample_ids,
        "splits": None if md.splits is None else list(md.splits),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(np.ascontiguousarray(md.activations, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(md.teacher, dtype="<f4").tobytes())


def load(path, backbone_hash: str | None = None) -> MedialDataset:
    """Read a dataset file; warn with StaleDataWarning on a hash mismatch."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC or len(data) < 12:
        raise MedialFormatError(f"{path}: not a medial dataset file")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise MedialFormatError(f"{path}: truncated header")
    try:
        h = json.loads(data[12:12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MedialFormatError(f"{path}: bad header ({e})") from None
    n = h["record_count"]
    tap = tuple(h["tap_shape"])
    a_count = n * int(np.prod(tap))
    t_count = n * h["num_classes"]
    body = data[12 + hlen:]
    if len(body) != 4 * (a_count + t_count):
        raise MedialFormatError(f"{path}: expected {4 * (a_count + t_count)} payload bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype="<f4")
    acts = arr[:a_count].astype(DTYPE).reshape((n,) + tap)
    teacher = arr[a_count:].astype(DTYPE).reshape(n, h["num_classes"])
    md = MedialDataset(h["layer"], acts, teacher, h["sample_ids"], h["backbone_hash"],
                       None if h["splits"] is None else np.array(h["splits"], dtype=object))
    if backbone_hash is not None and backbone_hash != md.backbone_hash:
        warnings.warn(f"{path}: collected from backbone {md.backbone_hash[:12]}, "
                      f"current backbone is {backbone_hash[:12]}", StaleDataWarning, stacklevel=2)
    return md


def default_path(folder, layer: str) -> str:
    return os.path.join(folder, f"{layer}.md")
