"""Staged build pipeline over an artifacts directory, plus retrain triggers.

Stages, in order: candidates, collect, search, train-caches, calibrate,
optimize, evaluate.  Each stage reads its predecessors' artifacts and writes
its own; reruns with the same inputs and seeds produce identical bytes.

Artifacts layout::

    candidates.json            backbone hash + candidate layers
    medial/<layer>.md          split medial datasets
    medial/index.json          sample ids in input order
    maintenance.json           sample count and backbone hash at last collect
    search/report.json         per layer, per architecture: accuracy, C1, selected
    caches/<layer>.json        trained cache models (uncalibrated)
    calibrated/<layer>.json    caches with temperature and threshold
    calibration.json           threshold reports and ECE before/after
    optimize/val_record.json   recorded validation predictions
    optimize/score_table.json  score of every subset
    model.json                 enabled caches of the cache-enabled model
    evaluation.json / .txt     evaluation report

Input data lives in a directory holding ``inputs.npy`` (unlabeled samples),
optionally ``ids.json`` (sample ids) and ``labels.npy`` (read by evaluate only).
"""
from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from . import builder, calibration, engine, medial, subset
from .builder import SearchMenus
from .core import TrainConfig
from .graph import CandidateLayer, identify_candidates, load_model

log = logging.getLogger(__name__)

STAGES = ("candidates", "collect", "search", "train-caches", "calibrate", "optimize", "evaluate")

NONE, DATA_DRIFT, BACKBONE_CHANGED = "none", "data-drift", "backbone-changed"


class PreconditionError(RuntimeError):
    """A stage ran before the stage that produces its inputs."""

    def __init__(self, stage, missing, path):
        super().__init__(f"{path} not found: run `{missing}` before `{stage}`")
        self.stage, self.missing, self.path = stage, missing, path


class DataError(ValueError):
    pass


@dataclass
class PipelineConfig:
    backbone: str = "backbone/model.json"
    data: str = "data"
    artifacts: str = "artifacts"
    tolerance: float = 0.02
    skip_last_k: int = 1
    menus: SearchMenus = field(default_factory=SearchMenus)
    train: TrainConfig = field(default_factory=TrainConfig)
    search_epochs: int = 30
    accuracy_slack: float = 0.01
    convergence_margin: float = 0.05
    split_ratios: tuple = medial.DEFAULT_RATIOS
    split_seed: int = 0
    port: int = 8765
    retrain_fraction: float = 0.2
    latency_reps: int = 100
    eval_batch_size: int = 64
    warm_start: bool = False

    def __post_init__(self):
        if not 0 <= self.tolerance < 1:
            raise ValueError("tolerance must be in [0, 1)")
        if isinstance(self.menus, dict):
            self.menus = SearchMenus.from_dict(self.menus)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.split_ratios = tuple(self.split_ratios)

    @classmethod
    def load(cls, path, **overrides) -> "PipelineConfig":
        with open(path) as f:
            d = json.load(f)
        base = os.path.dirname(os.path.abspath(path))
        for key in ("backbone", "data", "artifacts"):
            if key in d and not os.path.isabs(d[key]):
                d[key] = os.path.join(base, d[key])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**d)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["menus"] = self.menus.to_dict()
        d["train"] = self.train.to_dict()
        d["split_ratios"] = list(self.split_ratios)
        return d

    def save(self, path):
        _write_json(path, self.to_dict())


# ---------------------------------------------------------------------------
# maintenance


@dataclass
class MaintenanceState:
    built_count: int
    current_count: int
    backbone_hash: str

    def __post_init__(self):
        if self.current_count < self.built_count:
            raise ValueError("collected-sample counts must not decrease")

    def to_dict(self):
        return {"built_count": self.built_count, "current_count": self.current_count,
                "backbone_hash": self.backbone_hash}


def check_retrain_trigger(state: MaintenanceState, backbone_hash: str,
                          fraction: float = 0.2) -> str:
    """'backbone-changed', 'data-drift' or 'none'."""
    if backbone_hash != state.backbone_hash:
        return BACKBONE_CHANGED
    cur = state.current_count
    if cur > 0 and (cur - state.built_count) / cur >= fraction:
        return DATA_DRIFT
    return NONE


# ---------------------------------------------------------------------------
# helpers


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _read_json(path, stage, producer):
    if not os.path.exists(path):
        raise PreconditionError(stage, producer, path)
    with open(path) as f:
        return json.load(f)


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self._graph = None

    def path(self, *parts):
        return os.path.join(self.cfg.artifacts, *parts)

    @property
    def graph(self):
        if self._graph is None:
            if not os.path.exists(self.cfg.backbone):
                raise DataError(f"backbone manifest {self.cfg.backbone} not found")
            self._graph = load_model(self.cfg.backbone)
        return self._graph

    def load_inputs(self):
        p = os.path.join(self.cfg.data, "inputs.npy")
        if not os.path.exists(p):
            raise DataError(f"{p} not found")
        x = np.load(p)
        ids_path = os.path.join(self.cfg.data, "ids.json")
        if os.path.exists(ids_path):
            with open(ids_path) as f:
                ids = [str(i) for i in json.load(f)]
        else:
            width = len(str(len(x) - 1))
            ids = [f"s{i:0{width}d}" for i in range(len(x))]
        return x, ids

    def load_labels(self):
        p = os.path.join(self.cfg.data, "labels.npy")
        if not os.path.exists(p):
            raise DataError(f"{p} not found (labels are needed for evaluation only)")
        return np.load(p)

    def candidates(self, stage="collect"):
        d = _read_json(self.path("candidates.json"), stage, "candidates")
        self._check_hash(d["backbone_hash"], "candidates.json")
        return [CandidateLayer.from_dict(c) for c in d["candidates"]]

    def _check_hash(self, h, what):
        if h != self.graph.content_hash:
            warnings.warn(f"{what} was built from backbone {h[:12]}; current backbone is "
                          f"{self.graph.content_hash[:12]}", medial.StaleDataWarning, stacklevel=3)

    def datasets(self, stage):
        out = {}
        for c in self.candidates(stage):
            p = medial.default_path(self.path("medial"), c.name)
            if not os.path.exists(p):
                raise PreconditionError(stage, "collect", p)
            out[c.name] = medial.load(p, self.graph.content_hash)
        return out

    def _load_caches(self, folder, stage, producer):
        index = _read_json(self.path(folder, "index.json"), stage, producer)
        return [builder.load_cache(self.path(folder, f"{name}.json")) for name in index["layers"]]

    # -- stages ------------------------------------------------------------

    def run_candidates(self):
        cands = identify_candidates(self.graph, self.cfg.skip_last_k)
        _write_json(self.path("candidates.json"), {
            "backbone_hash": self.graph.content_hash, "skip_last_k": self.cfg.skip_last_k,
            "total_flops": self.graph.total_flops,
            "candidates": [c.to_dict() for c in cands]})
        return cands

    def run_collect(self):
        cands = self.candidates("collect")
        x, ids = self.load_inputs()
        try:
            mds = medial.collect(self.graph, x, cands, ids)
        except ValueError as e:
            raise DataError(str(e)) from e
        labels = medial.split_assignment(ids, self.cfg.split_ratios, self.cfg.split_seed)
        os.makedirs(self.path("medial"), exist_ok=True)
        for name, md in mds.items():
            md.splits = labels
            medial.save(md, medial.default_path(self.path("medial"), name))
        _write_json(self.path("medial", "index.json"), {"sample_ids": ids})
        prev = self.maintenance_state()
        built = len(ids)
        _write_json(self.path("maintenance.json"),
                    MaintenanceState(built, max(built, prev.current_count if prev else 0),
                                     self.graph.content_hash).to_dict())
        return mds

    def run_search(self):
        cands = self.candidates("search")
        mds = self.datasets("search")
        report = {"backbone_hash": self.graph.content_hash, "layers": []}
        selected = {}
        for c in cands:
            res = builder.search(c, mds[c.name], self.cfg.menus, self.cfg.train,
                                 self.cfg.accuracy_slack, self.cfg.convergence_margin,
                                 self.cfg.search_epochs)
            report["layers"].append({"layer": c.name, "ordinal": c.ordinal,
                                     "fallback_flops": c.fallback_flops,
                                     "discarded": res.discarded, "architectures": res.rows})
            if not res.discarded:
                selected[c.name] = res.selected.architecture.to_dict()
            log.info("search %s: %s", c.name,
                     "discarded" if res.discarded else res.selected.architecture.describe(c.tap_shape))
        report["selected"] = selected
        _write_json(self.path("search", "report.json"), report)
        return report

    def run_train_caches(self):
        report = _read_json(self.path("search", "report.json"), "train-caches", "search")
        cands = {c.name: c for c in self.candidates("train-caches")}
        mds = self.datasets("train-caches")
        previous = {}
        if self.cfg.warm_start and os.path.exists(self.path("caches", "index.json")):
            previous = {c.layer: c for c in self._load_caches("caches", "train-caches", "train-caches")}
        caches = []
        for name, spec in report["selected"].items():
            arch = builder.CacheArchitecture.from_dict(spec)
            init = previous.get(name)
            if init is not None and init.architecture != arch:
                init = None
            cache = builder.train_cache(arch, mds[name], self.cfg.train, cands[name], init)
            builder.save_cache(cache, self.path("caches", f"{name}.json"))
            caches.append(cache)
        caches.sort(key=lambda c: c.ordinal)
        _write_json(self.path("caches", "index.json"), {"layers": [c.layer for c in caches]})
        return caches

    def run_calibrate(self):
        caches = self._load_caches("caches", "calibrate", "train-caches")
        mds = self.datasets("calibrate")
        out, reports = [], []
        for cache in caches:
            md = mds[cache.layer]
            before = calibration.ece(cache, md)
            cache.temperature = calibration.calibrate_temperature(cache, md)
            after = calibration.ece(cache, md)
            rep = calibration.assign_threshold(cache, md, self.cfg.tolerance, cache.ordinal)
            cache.threshold = rep.threshold
            builder.save_cache(cache, self.path("calibrated", f"{cache.layer}.json"))
            out.append(cache)
            reports.append({**rep.to_dict(), "temperature": cache.temperature,
                            "ece_before": before, "ece_after": after})
        _write_json(self.path("calibrated", "index.json"), {"layers": [c.layer for c in out]})
        _write_json(self.path("calibration.json"), {"tolerance": self.cfg.tolerance,
                                                    "reports": reports})
        with open(self.path("calibration.txt"), "w") as f:
            for cache, r in zip(out, reports):
                rep = calibration.ThresholdReport(
                    r["layer"], r["ordinal"], r["tolerance"], r["budget"],
                    [x["theta"] for x in r["rows"]], [x["hit_rate"] for x in r["rows"]],
                    [x["cache_accuracy"] for x in r["rows"]], [x["bound"] for x in r["rows"]],
                    r["threshold"], r["n_samples"])
                f.write(rep.to_text() + f"\n  temperature {cache.temperature:.4f}, ECE "
                        f"{r['ece_before']:.4f} -> {r['ece_after']:.4f}\n\n")
        return out

    def run_optimize(self):
        caches = self._load_caches("calibrated", "optimize", "calibrate")
        mds = self.datasets("optimize")
        record = subset.record_val_predictions(caches, mds)
        choice = subset.optimize(record)
        _write_json(self.path("optimize", "val_record.json"), record.to_dict())
        _write_json(self.path("optimize", "score_table.json"), choice.to_dict())
        enabled = [c.layer for c in caches if c.ordinal in choice.subset]
        _write_json(self.path("model.json"), {
            "backbone_hash": self.graph.content_hash, "tolerance": self.cfg.tolerance,
            "enabled": enabled, "score": choice.score})
        return choice

    def cache_enabled_model(self, stage="serve") -> engine.CacheEnabledModel:
        d = _read_json(self.path("model.json"), stage, "optimize")
        self._check_hash(d["backbone_hash"], "model.json")
        caches = [builder.load_cache(self.path("calibrated", f"{n}.json")) for n in d["enabled"]]
        return engine.CacheEnabledModel(self.graph, caches, d["tolerance"])

    def run_evaluate(self):
        model = self.cache_enabled_model("evaluate")
        x, ids = self.load_inputs()
        labels = self.load_labels()
        if len(labels) != len(x):
            raise DataError(f"{len(labels)} labels for {len(x)} inputs")
        splits = medial.split_assignment(ids, self.cfg.split_ratios, self.cfg.split_seed)
        idx = np.flatnonzero(splits == "test")
        rep = engine.evaluate(model, x[idx], labels[idx], [ids[i] for i in idx],
                              self.cfg.eval_batch_size, self.cfg.latency_reps)
        _write_json(self.path("evaluation.json"), rep.to_dict())
        with open(self.path("evaluation.txt"), "w") as f:
            f.write(rep.to_text() + "\n")
        return rep

    # -- maintenance ---------------------------------------------------------

    def maintenance_state(self) -> MaintenanceState | None:
        p = self.path("maintenance.json")
        if not os.path.exists(p):
            return None
        with open(p) as f:
            return MaintenanceState(**json.load(f))

    def report(self) -> dict:
        state = self.maintenance_state()
        if state is None:
            raise PreconditionError("report", "collect", self.path("maintenance.json"))
        x, _ = self.load_inputs()
        state = MaintenanceState(state.built_count, max(len(x), state.current_count),
                                 state.backbone_hash)
        trig = check_retrain_trigger(state, self.graph.content_hash, self.cfg.retrain_fraction)
        out = {"trigger": trig, **state.to_dict(), "current_backbone_hash": self.graph.content_hash}
        if os.path.exists(self.path("model.json")):
            with open(self.path("model.json")) as f:
                out["enabled"] = json.load(f)["enabled"]
        return out

    def run(self, stage: str):
        fn = {"candidates": self.run_candidates, "collect": self.run_collect,
              "search": self.run_search, "train-caches": self.run_train_caches,
              "calibrate": self.run_calibrate, "optimize": self.run_optimize,
              "evaluate": self.run_evaluate, "report": self.report}[stage]
        return fn()

    def run_all(self, upto: str = "evaluate"):
        out = {}
        for s in STAGES[:STAGES.index(upto) + 1]:
            out[s] = self.run(s)
        return out
