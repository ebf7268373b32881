"""JSON experiment configuration.

A config file is one JSON object: TrainConfig fields at the top level plus a
``dataset`` block and an optional ``experiment`` block. Unknown keys are
rejected. :func:`effective_config` materializes every default (derived seeds,
absolute data paths) so a run can be repeated from its echo alone.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset, gen_spirals, load_csv, load_idx
from .trainer import ConfigError, Seeds, TrainConfig, parse_delta

TRAIN_KEYS = {f.name for f in fields(TrainConfig)}

SPIRALS_DEFAULTS = {"kind": "spirals", "classes": 3, "n_per_class": 500, "test_per_class": 500,
                    "noise_sd": 0.1, "turns": 1.0, "seed": 1, "test_seed": 2}
IDX_KEYS = {"kind", "train_images", "train_labels", "test_images", "test_labels", "num_classes"}
CSV_KEYS = {"kind", "train", "test", "num_classes", "input_shape"}

EXPERIMENT_DEFAULTS = {
    "seeds": 5,
    "sweep": None,  # {"param": ..., "values": [...]}
    "stability": {"noise_mean": 0.0, "noise_variance": 1.0},
    "landscape": {"resolution": 25, "margin": 0.1},
    "sharpness": {"scale": 0.05, "samples": 50},
}


@dataclass
class ExperimentConfig:
    train: TrainConfig
    dataset: dict
    experiment: dict = field(default_factory=dict)
    source: str = ""


def _reject_unknown(block: dict, allowed, where: str) -> None:
    extra = sorted(set(block) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _dataset_block(raw: dict, base_dir: Path) -> dict:
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError("dataset block must be an object with a 'kind' field")
    kind = raw["kind"]
    if kind == "spirals":
        _reject_unknown(raw, SPIRALS_DEFAULTS, "dataset")
        return {**SPIRALS_DEFAULTS, **raw}
    if kind in ("idx", "csv"):
        keys = IDX_KEYS if kind == "idx" else CSV_KEYS
        _reject_unknown(raw, keys, "dataset")
        path_keys = [k for k in keys if k not in ("kind", "num_classes", "input_shape")]
        missing = [k for k in path_keys if k not in raw]
        if missing:
            raise ConfigError(f"dataset block missing {', '.join(sorted(missing))}")
        out = {"num_classes": None, **raw}
        if kind == "csv":
            out.setdefault("input_shape", None)
        for k in path_keys:
            p = Path(raw[k])
            out[k] = str(p if p.is_absolute() else (base_dir / p).resolve())
        return out
    raise ConfigError(f"unknown dataset kind {kind!r} (expected spirals, idx or csv)")


def _experiment_block(raw: dict) -> dict:
    _reject_unknown(raw, EXPERIMENT_DEFAULTS, "experiment")
    out = json.loads(json.dumps(EXPERIMENT_DEFAULTS))
    for k, v in raw.items():
        if isinstance(out.get(k), dict) and isinstance(v, dict):
            _reject_unknown(v, out[k], f"experiment.{k}")
            out[k].update(v)
        else:
            out[k] = v
    if not isinstance(out["seeds"], int) or out["seeds"] < 1:
        raise ConfigError("experiment.seeds must be a positive integer")
    if out["sweep"] is not None:
        _reject_unknown(out["sweep"], {"param", "values"}, "experiment.sweep")
    return out


def train_config_from_dict(raw: dict) -> TrainConfig:
    _reject_unknown(raw, TRAIN_KEYS, "config")
    d = dict(raw)
    if "delta" in d and isinstance(d["delta"], str):
        d["delta"], unit = parse_delta(d["delta"])
        d.setdefault("delta_unit", unit)
    if isinstance(d.get("seeds"), dict):
        _reject_unknown(d["seeds"], {"init", "dirichlet", "augment", "shuffle"}, "seeds")
        try:
            d["seeds"] = Seeds(**d["seeds"])
        except TypeError as e:
            raise ConfigError(f"seeds block: {e}") from None
    try:
        cfg = TrainConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    cfg.validate()
    return cfg


def parse_config(raw: dict, base_dir: Path = Path("."), source: str = "") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    body = {k: v for k, v in raw.items() if k not in ("dataset", "experiment")}
    if "dataset" not in raw:
        raise ConfigError("config has no 'dataset' block")
    return ExperimentConfig(train_config_from_dict(body), _dataset_block(raw["dataset"], base_dir),
                            _experiment_block(raw.get("experiment", {})), source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(raw, path.parent, str(path))


def effective_config(exp: ExperimentConfig) -> dict:
    """Fully resolved config; feeding it back through :func:`parse_config`
    yields the same runs."""
    cfg = exp.train.resolved()
    d = asdict(cfg)
    d["seeds"] = asdict(cfg.seeds)
    return {**d, "dataset": dict(exp.dataset), "experiment": json.loads(json.dumps(exp.experiment))}


def write_effective_config(exp: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(effective_config(exp), indent=2, sort_keys=True) + "\n")


def with_overrides(exp: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy with TrainConfig fields replaced. Changing ``seed`` drops any
    explicit seed block so the streams are re-derived."""
    d = asdict(exp.train)
    d["seeds"] = exp.train.seeds
    if "seed" in changes:
        d["seeds"] = None
    d.update(changes)
    cfg = TrainConfig(**d)
    cfg.validate()
    return ExperimentConfig(cfg, exp.dataset, exp.experiment, exp.source)


def load_datasets(block: dict) -> tuple[Dataset, Dataset]:
    kind = block["kind"]
    try:
        if kind == "spirals":
            train = gen_spirals(block["n_per_class"], block["classes"], block["noise_sd"], block["seed"],
                                block["turns"])
            test = gen_spirals(block["test_per_class"], block["classes"], block["noise_sd"], block["test_seed"],
                               block["turns"], standardize_with=(train.meta["mean"], train.meta["std"]),
                               split="test")
            return train, test
        if kind == "idx":
            train = load_idx(block["train_images"], block["train_labels"], block["num_classes"])
            test = load_idx(block["test_images"], block["test_labels"], block["num_classes"] or train.num_classes,
                            split="test")
            return train, test
        shape = tuple(block["input_shape"]) if block.get("input_shape") else None
        train = load_csv(block["train"], block["num_classes"], shape)
        test = load_csv(block["test"], block["num_classes"] or train.num_classes, shape, split="test")
        return train, test
    except FileNotFoundError as e:
        raise ConfigError(f"dataset file not found: {e.filename}") from None
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"dataset: {e}") from None


def cell_seeds(exp: ExperimentConfig, k: int | None = None) -> list[int]:
    """Root seeds for K paired repetitions: seed, seed + 1, ..."""
    k = exp.experiment.get("seeds", 5) if k is None else k
    return [int(exp.train.seed) + i for i in range(k)]


def derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])
