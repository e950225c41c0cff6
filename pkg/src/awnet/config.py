"""Experiment configuration: one YAML tree, overridable from the command line."""
import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .model import ModelConfig
from .train import TrainConfig

SMOKE_OVERRIDES = {
    "train": {"epochs_total": 2, "batch_size": 64, "train_stride": 24, "max_patches": 512},
    "n_train_images": 2,
    "n_test_images": 2,
    "stride": 24,
}


@dataclass
class ExperimentConfig:
    data_root: str = "data"
    dataset: str = "DRIVE"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    stride: int = 5
    infer_batch_size: int = 1024
    thresholds: list = field(default_factory=lambda: [0.5])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    roc_bins: int = None
    n_train_images: int = None
    n_test_images: int = None

    def to_dict(self):
        return {
            "data_root": str(self.data_root),
            "dataset": self.dataset,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "augment": self.augment.to_dict(),
            "stride": self.stride,
            "infer_batch_size": self.infer_batch_size,
            "thresholds": list(self.thresholds),
            "seeds": list(self.seeds),
            "roc_bins": self.roc_bins,
            "n_train_images": self.n_train_images,
            "n_test_images": self.n_test_images,
        }

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d or {})
        dataset = d.get("dataset", "DRIVE")
        train = dict(d.pop("train", {}) or {})
        train.setdefault("dataset", dataset)
        return cls(
            model=ModelConfig.from_dict(d.pop("model", {}) or {}),
            train=TrainConfig.from_dict(train),
            augment=AugmentConfig.from_dict(d.pop("augment", {}) or {}),
            **d,
        )

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides=None):
    """Read a YAML config (optional) and apply a nested override dict."""
    tree = {}
    if path is not None:
        tree = yaml.safe_load(Path(path).read_text()) or {}
    tree = deep_merge(tree, overrides or {})
    if "dataset" in tree and "train" in tree and isinstance(tree["train"], dict):
        # dataset-dependent defaults follow the top-level dataset unless pinned
        tree["train"].setdefault("dataset", tree["dataset"])
    return ExperimentConfig.from_dict(tree)
