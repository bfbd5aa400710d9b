"""Run configuration: one JSON file with strict key checking plus flag overrides.

Unknown keys anywhere in the tree are rejected with their full paths so typos never
silently fall back to defaults. All randomness in a run flows from the four named
seeds; flags win over file values.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from typing import Any

from .model import Dims
from .training import TrainConfig
from .util import ConfigError, load_json
from .vocab import VOCAB_SIZE

DEFAULTS: dict[str, Any] = {
    "run_name": "run",
    "workers": None,
    "corpus": {
        "n_entities": 50,
        "n_attrs": 4,
        "questions_per_fact": 3,
        "n_train": 500,
        "n_test": 100,
        "n_distractors": 0,
        "held_out_facts": 0,
    },
    "model": {
        "d_model": 64,
        "n_heads": 2,
        "context_len": 256,
    },
    "train": {
        "alpha": 0.2,
        "beta": 0.1,
        "lr": 3e-3,
        "dpo_lr": 1e-3,
        "mito_lr": 1e-3,
        "batch_size": 16,
        "n_f": 4,
        "n_r": 3,
        "n_docs": 5,
        "init_epochs": 30,
        "attacker_epochs": 8,
        "dpo_epochs": 1,
        "mito_epochs": 1,
        "queries_per_round": 0,
        "fab_temperature": 0.8,
        "fab_top_p": 0.95,
        "fab_max_new": 20,
        "init_list_lengths": [10, 5, 8, 3],
    },
    "benchmark": {
        "k_ret": 5,
        "k_fab": 5,
        "total": 10,
        "max_new": 6,
        "fabricator": "model",
    },
    "seeds": {
        "corpus": 101,
        "train": 202,
        "attack": 303,
        "eval": 404,
    },
    "loop": {
        "dpo_reference": "round_start",
    },
}


def _collect_unknown(defaults: dict, user: dict, prefix: str = "") -> list[str]:
    unknown = [f"{prefix}{k}" for k in user if k not in defaults]
    for key, default in defaults.items():
        if isinstance(default, dict) and isinstance(user.get(key), dict):
            unknown.extend(_collect_unknown(default, user[key], f"{prefix}{key}."))
    return unknown


def _merge_strict(defaults: dict, user: dict, prefix: str = "") -> dict:
    if not prefix:
        unknown = _collect_unknown(defaults, user)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = {}
    for key, default in defaults.items():
        if key not in user:
            merged[key] = copy.deepcopy(default)
        elif isinstance(default, dict):
            if not isinstance(user[key], dict):
                raise ConfigError(f"config key {prefix}{key} must be an object")
            merged[key] = _merge_strict(default, user[key], f"{prefix}{key}.")
        else:
            merged[key] = user[key]
    return merged


class RunConfig:
    """Validated view over the merged config tree."""

    def __init__(self, tree: dict[str, Any]):
        self.tree = tree
        self.validate()

    @classmethod
    def from_file(cls, path: str | None) -> "RunConfig":
        user = {}
        if path is not None:
            if not os.path.exists(path):
                raise ConfigError(f"config file {path} does not exist")
            user = load_json(path)
            if not isinstance(user, dict):
                raise ConfigError("config root must be a JSON object")
        return cls(_merge_strict(DEFAULTS, user))

    def override_seeds(self, seed: int) -> None:
        for name in self.tree["seeds"]:
            self.tree["seeds"][name] = int(seed)

    def validate(self) -> None:
        self.train_config().validate()
        self.dims().validate()
        c = self.tree["corpus"]
        if c["n_train"] < 1 or c["n_test"] < 1:
            raise ConfigError("n_train and n_test must be positive")
        b = self.tree["benchmark"]
        if b["k_ret"] < 0 or b["k_fab"] < 0 or b["total"] < 1:
            raise ConfigError("benchmark counts must be non-negative, total >= 1")
        if self.tree["benchmark"]["fabricator"] not in ("model", "rule"):
            raise ConfigError("benchmark.fabricator must be 'model' or 'rule'")
        if self.tree["loop"]["dpo_reference"] not in ("round_start", "initial"):
            raise ConfigError("loop.dpo_reference must be 'round_start' or 'initial'")
        for name, val in self.tree["seeds"].items():
            if not isinstance(val, int):
                raise ConfigError(f"seed {name} must be an integer")

    def dims(self) -> Dims:
        m = self.tree["model"]
        return Dims(VOCAB_SIZE, m["d_model"], m["n_heads"], m["context_len"])

    def train_config(self) -> TrainConfig:
        t = dict(self.tree["train"])
        t["init_list_lengths"] = tuple(t["init_list_lengths"])
        return TrainConfig(seed=self.tree["seeds"]["train"], **t)

    @property
    def seeds(self) -> dict[str, int]:
        return self.tree["seeds"]

    @property
    def corpus(self) -> dict:
        return self.tree["corpus"]

    @property
    def benchmark(self) -> dict:
        return self.tree["benchmark"]

    @property
    def workers(self) -> int | None:
        return self.tree["workers"]

    def canonical_json(self) -> str:
        return json.dumps(self.tree, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()
