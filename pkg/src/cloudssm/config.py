"""Experiment configuration: one JSON document drives every CLI command.

The model/train blocks use the conventional short hyperparameter names
(N, M, L, B, LR, ES, beta1, beta2, K, alpha).  Configs round-trip losslessly
through :func:`dump_config` / :func:`parse_config`, and CLI overrides use
dot paths (``train.LR=0.001``).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .corruption import CorruptionSpec
from .losses import LossConfig
from .model import ModelConfig
from .synthetic import CohortSpec
from .training import TrainConfig

OUTPUT_ROOT_ENV = "CLOUDSSM_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid configuration; message names the offending key path."""


@dataclass
class DatasetConfig:
    kind: str = "synthetic"              # synthetic | files
    cohort: CohortSpec = field(default_factory=CohortSpec)
    mesh_dir: str | None = None          # for kind == files
    cohort_dir: str | None = None        # default <output_dir>/cohort
    corrupted_dir: str | None = None     # default <output_dir>/corrupted

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "files"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "files" and not self.mesh_dir:
            raise ValueError("dataset kind 'files' requires mesh_dir")


@dataclass
class PreprocessConfig:
    align: bool = True
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0

    def __post_init__(self) -> None:
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError("ratios must be three values summing to 1")


@dataclass
class EvaluationConfig:
    metrics: tuple[str, ...] = ("cd", "emd", "p2f")
    specificity_samples: int = 1000
    specificity_seed: int = 0
    variance_threshold: float = 0.95
    mode_walk_modes: int = 4
    mode_walk_t_values: tuple[float, ...] = (-1.0, 0.0, 1.0)

    def __post_init__(self) -> None:
        bad = set(self.metrics) - {"cd", "emd", "p2f"}
        if bad:
            raise ValueError(f"unknown metrics {sorted(bad)}")
        if not 0 < self.variance_threshold <= 1:
            raise ValueError("variance_threshold must be in (0, 1]")


@dataclass
class BenchmarkConfig:
    encoders: list[str] | None = None          # default: the configured model
    heads: list[str] | None = None
    bottlenecks: list[str] | None = None
    alphas: list[float] | None = None
    noise_sigmas_mm: list[float] = field(default_factory=lambda: [0.0])
    partial_fractions: list[float] = field(default_factory=lambda: [0.0])
    input_sizes: list[int] | None = None
    train_subset_sizes: list = field(default_factory=lambda: ["all"])
    seeds: list[int] | None = None
    workers: int = 1

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    output_dir: str = "runs/experiment"

    # resolved paths -------------------------------------------------------
    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        if root and not out.is_absolute():
            return Path(root) / out
        return out

    def cohort_dir(self) -> Path:
        if self.dataset.cohort_dir:
            return Path(self.dataset.cohort_dir)
        return self.resolved_output_dir() / "cohort"

    def corrupted_dir(self) -> Path:
        if self.dataset.corrupted_dir:
            return Path(self.dataset.corrupted_dir)
        return self.resolved_output_dir() / "corrupted"

    def input_cohort_dir(self) -> Path:
        """Where training/evaluation inputs come from: the corrupted cohort
        when a corruption is configured, else the clean one."""
        if not self.corruption.is_identity:
            return self.corrupted_dir()
        return self.cohort_dir()


# ---------------------------------------------------------------------------
# JSON <-> dataclass mapping

_DATASET_KEYS = {
    "kind": "kind",
    "cohort": "cohort",
    "mesh_dir": "mesh_dir",
    "cohort_dir": "cohort_dir",
    "corrupted_dir": "corrupted_dir",
}
_COHORT_KEYS = {
    "family": "family",
    "n_shapes": "n_shapes",
    "latent_dims": "latent_dims",
    "latent_low": "latent_low",
    "latent_high": "latent_high",
    "mesh_subdivisions": "mesh_subdivisions",
    "misalign_deg": "misalign_deg",
    "seed": "seed",
}
_PREPROCESS_KEYS = {"align": "align", "ratios": "ratios", "split_seed": "split_seed"}
_CORRUPTION_KEYS = {
    "noise_sigma_mm": "noise_sigma_mm",
    "partial_fraction": "partial_fraction",
    "input_size_n": "input_size_n",
    "train_subset_size": "train_subset_size",
    "seed": "seed",
}
_MODEL_KEYS = {
    "encoder": "encoder_kind",
    "head": "head_kind",
    "bottleneck": "bottleneck_kind",
    "N": "n_input",
    "M": "m_output",
    "L": "feature_dim",
    "graph_k": "graph_k",
    "sfa_blocks": "sfa_blocks",
    "attention_heads": "attention_heads",
    "seed": "seed",
}
_TRAIN_KEYS = {
    "LR": "learning_rate",
    "beta1": "adam_beta1",
    "beta2": "adam_beta2",
    "B": "batch_size",
    "ES": "patience_epochs",
    "max_epochs": "max_epochs",
    "K": None,      # loss sub-config
    "alpha": None,  # loss sub-config
    "seed": "seed",
}
_EVALUATION_KEYS = {
    "metrics": "metrics",
    "specificity_samples": "specificity_samples",
    "specificity_seed": "specificity_seed",
    "variance_threshold": "variance_threshold",
    "mode_walk_modes": "mode_walk_modes",
    "mode_walk_t_values": "mode_walk_t_values",
}
_BENCHMARK_KEYS = {
    "encoders": "encoders",
    "heads": "heads",
    "bottlenecks": "bottlenecks",
    "alphas": "alphas",
    "noise_sigmas_mm": "noise_sigmas_mm",
    "partial_fractions": "partial_fractions",
    "input_sizes": "input_sizes",
    "train_subset_sizes": "train_subset_sizes",
    "seeds": "seeds",
    "workers": "workers",
}


def _translate(block: dict, keys: dict, path: str) -> dict:
    if not isinstance(block, dict):
        raise ConfigError(f"{path}: expected an object")
    out = {}
    for key, value in block.items():
        if key not in keys:
            raise ConfigError(f"{path}.{key}: unknown key")
        if keys[key] is not None:
            out[keys[key]] = value
    return out


def _build(cls, kwargs: dict, path: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from err


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    known = {
        "dataset", "preprocess", "corruption", "model", "train",
        "evaluation", "benchmark", "output_dir",
    }
    for key in data:
        if key not in known:
            raise ConfigError(f"{key}: unknown key")

    dataset_raw = dict(data.get("dataset", {}))
    cohort_raw = dataset_raw.pop("cohort", {})
    dataset_kwargs = _translate(dataset_raw, _DATASET_KEYS, "dataset")
    dataset_kwargs["cohort"] = _build(
        CohortSpec, _translate(cohort_raw, _COHORT_KEYS, "dataset.cohort"),
        "dataset.cohort",
    )
    dataset = _build(DatasetConfig, dataset_kwargs, "dataset")

    preprocess_kwargs = _translate(
        data.get("preprocess", {}), _PREPROCESS_KEYS, "preprocess"
    )
    if "ratios" in preprocess_kwargs:
        preprocess_kwargs["ratios"] = tuple(preprocess_kwargs["ratios"])
    preprocess = _build(PreprocessConfig, preprocess_kwargs, "preprocess")

    corruption = _build(
        CorruptionSpec,
        _translate(data.get("corruption", {}), _CORRUPTION_KEYS, "corruption"),
        "corruption",
    )
    model = _build(
        ModelConfig, _translate(data.get("model", {}), _MODEL_KEYS, "model"), "model"
    )

    train_raw = dict(data.get("train", {}))
    loss_kwargs = {}
    if "alpha" in train_raw:
        loss_kwargs["alpha"] = train_raw["alpha"]
    if "K" in train_raw:
        loss_kwargs["k_neighbors"] = train_raw["K"]
    train_kwargs = _translate(train_raw, _TRAIN_KEYS, "train")
    train_kwargs["loss"] = _build(LossConfig, loss_kwargs, "train")
    train = _build(TrainConfig, train_kwargs, "train")

    eval_kwargs = _translate(
        data.get("evaluation", {}), _EVALUATION_KEYS, "evaluation"
    )
    for key in ("metrics", "mode_walk_t_values"):
        if key in eval_kwargs:
            eval_kwargs[key] = tuple(eval_kwargs[key])
    evaluation = _build(EvaluationConfig, eval_kwargs, "evaluation")

    benchmark = _build(
        BenchmarkConfig,
        _translate(data.get("benchmark", {}), _BENCHMARK_KEYS, "benchmark"),
        "benchmark",
    )

    output_dir = data.get("output_dir", "runs/experiment")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir: expected a string")
    return ExperimentConfig(
        dataset=dataset,
        preprocess=preprocess,
        corruption=corruption,
        model=model,
        train=train,
        evaluation=evaluation,
        benchmark=benchmark,
        output_dir=output_dir,
    )


def _reverse(obj, keys: dict) -> dict:
    out = {}
    for json_key, attr in keys.items():
        if attr is not None:
            out[json_key] = getattr(obj, attr)
    return out


def dump_config(config: ExperimentConfig) -> dict:
    dataset = _reverse(config.dataset, _DATASET_KEYS)
    dataset["cohort"] = _reverse(config.dataset.cohort, _COHORT_KEYS)
    train = _reverse(config.train, _TRAIN_KEYS)
    train["alpha"] = config.train.loss.alpha
    train["K"] = config.train.loss.k_neighbors
    evaluation = _reverse(config.evaluation, _EVALUATION_KEYS)
    evaluation["metrics"] = list(config.evaluation.metrics)
    evaluation["mode_walk_t_values"] = list(config.evaluation.mode_walk_t_values)
    preprocess = _reverse(config.preprocess, _PREPROCESS_KEYS)
    preprocess["ratios"] = list(config.preprocess.ratios)
    return {
        "dataset": dataset,
        "preprocess": preprocess,
        "corruption": _reverse(config.corruption, _CORRUPTION_KEYS),
        "model": _reverse(config.model, _MODEL_KEYS),
        "train": train,
        "evaluation": evaluation,
        "benchmark": _reverse(config.benchmark, _BENCHMARK_KEYS),
        "output_dir": config.output_dir,
    }


def load_config_file(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    return parse_config(data)


def write_config_echo(config: ExperimentConfig, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config_echo.json").write_text(
        json.dumps(dump_config(config), indent=2) + "\n"
    )


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dot.path=value`` overrides; values parse as JSON, else strings."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {path!r}: {part} is not an object")
        node[parts[-1]] = value
    return data
