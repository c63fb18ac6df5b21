"""Confidence-gated layer caches for pre-trained feed-forward classifiers."""
from .builder import CacheArchitecture, CacheModel, SearchMenus, search, train_cache
from .calibration import assign_threshold, calibrate_temperature, ece
from .core import LayerSpec, TrainConfig
from .engine import CacheEnabledModel, ExitRecord, evaluate, infer_batch
from .graph import BackboneGraph, identify_candidates, load_model, save_model
from .medial import MedialDataset, collect
from .subset import optimize, record_val_predictions, replay_subset, score_subset

__version__ = "0.1.0"
