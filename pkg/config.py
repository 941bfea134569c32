# config.py
# Experiment configuration: YAML files -> validated frozen dataclasses

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Literal, Mapping, Optional, Tuple

import yaml

from backbone import BACKBONES
from data_tasks import AUGMENT_POLICIES, CIFAR100_CLASSES, find_cifar100
from errors import ConfigError, InvalidInputError
from losses import LossWeights
from ood_scores import METHOD_REGISTRY
from trainer import TrainerConfig

__version__ = "1.0.0"

CONFIG_DIR = Path(__file__).resolve().parent / "configs"
DEFAULTS_PATH = CONFIG_DIR / "defaults.yaml"

DatasetType = Literal["cifar100", "toy"]

DEFAULT_BETA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


def normalize_dataset(raw: Any) -> DatasetType:
    """
    Accepts common spellings and returns one of: cifar100, toy
    """
    if raw is None:
        raise ConfigError("dataset.id", "is required")

    s = str(raw).strip().lower().replace("-", "").replace("_", "").replace(" ", "")
    aliases = {
        "cifar100": "cifar100",
        "cifar": "cifar100",
        "toy": "toy",
        "gaussians": "toy",
        "toygaussians": "toy",
    }
    if s in aliases:
        return aliases[s]
    raise ConfigError("dataset.id", f"unsupported dataset '{raw}' (options: cifar100, toy)")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset_id: DatasetType
    n_tasks: int
    seed: int
    backbone_id: str
    trainer: TrainerConfig
    output_dir: Path = Path("results")
    data_dir: Optional[Path] = None

    # toy stream
    classes_per_task: int = 2
    samples_per_class: int = 100

    # evaluation
    score_methods: Tuple[str, ...] = ("msp", "odin", "energy", "entropy", "msp_bc", "cedl_vacuity", "cedl_dissonance")
    method_params: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    beta_grid: Tuple[float, ...] = DEFAULT_BETA_GRID
    uncertainty_source: Literal["uncorrected", "corrected"] = "uncorrected"
    aupr_positive: Literal["ind", "ood"] = "ind"

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    @property
    def step_size(self) -> int:
        total = CIFAR100_CLASSES if self.dataset_id == "cifar100" else self.n_tasks * self.classes_per_task
        return total // self.n_tasks


# -----------------------------
# 1) Loading
# -----------------------------
def deep_merge(base: Mapping, override: Mapping) -> dict:
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _read_yaml(path: Path) -> dict:
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigError("config", f"file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError("config", f"invalid YAML in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must contain a mapping at the top level")
    return data


def load_config_dict(path: Path) -> dict:
    """defaults.yaml with the user file merged on top."""
    return deep_merge(_read_yaml(DEFAULTS_PATH), _read_yaml(Path(path)))


def load_config(path: Path, check_data: bool = True) -> ExperimentConfig:
    cfg = config_from_dict(load_config_dict(path))
    validate_config(cfg, check_data=check_data)
    return cfg


# -----------------------------
# 2) Dict -> dataclasses
# -----------------------------
def _get(d: Mapping, dotted: str, cast: Callable = lambda v: v, default: Any = None) -> Any:
    node: Any = d
    for key in dotted.split("."):
        if not isinstance(node, Mapping) or key not in node:
            return default
        node = node[key]
    if node is None:
        return default
    try:
        return cast(node)
    except (TypeError, ValueError) as e:
        raise ConfigError(dotted, f"cannot interpret {node!r}: {e}") from e


def _as_bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    raise ValueError("expected true/false")


def _weights(d: Mapping, dotted: str, fallback: LossWeights) -> LossWeights:
    try:
        return LossWeights(
            lambda1=_get(d, f"{dotted}.lambda1", float, fallback.lambda1),
            lambda2=_get(d, f"{dotted}.lambda2", float, fallback.lambda2),
            lambda3=_get(d, f"{dotted}.lambda3", float, fallback.lambda3),
        )
    except InvalidInputError as e:
        raise ConfigError(dotted, str(e)) from e


def trainer_from_dict(d: Mapping, seed: int) -> TrainerConfig:
    base = TrainerConfig()
    t = "trainer"
    kwargs = dict(
        method=_get(d, f"{t}.method", str, base.method),
        loss_weights_first_task=_weights(d, f"{t}.loss_weights.first_task", base.loss_weights_first_task),
        loss_weights_later=_weights(d, f"{t}.loss_weights.later", base.loss_weights_later),
        kd_temperature=_get(d, f"{t}.kd_temperature", float, base.kd_temperature),
        epochs=_get(d, f"{t}.epochs", int, base.epochs),
        batch_size=_get(d, f"{t}.batch_size", int, base.batch_size),
        lr=_get(d, f"{t}.lr", float, base.lr),
        lr_schedule=_get(d, f"{t}.lr_schedule", str, base.lr_schedule),
        momentum=_get(d, f"{t}.momentum", float, base.momentum),
        weight_decay=_get(d, f"{t}.weight_decay", float, base.weight_decay),
        seed=seed,
        buffer_per_class=_get(d, f"{t}.buffer_per_class", int, base.buffer_per_class),
        apply_wa=_get(d, f"{t}.apply_wa", _as_bool, base.apply_wa),
        apply_bc=_get(d, f"{t}.apply_bc", _as_bool, base.apply_bc),
        ekl_mask_new_only=_get(d, f"{t}.ekl_mask_new_only", _as_bool, base.ekl_mask_new_only),
        ekl_strength=_get(d, f"{t}.ekl_strength", str, base.ekl_strength),
        augment_policy=_get(d, f"{t}.augment.policy", str, base.augment_policy),
        augment_num_ops=_get(d, f"{t}.augment.num_ops", int, base.augment_num_ops),
        augment_magnitude=_get(d, f"{t}.augment.magnitude", int, base.augment_magnitude),
        augment_exemplars=_get(d, f"{t}.augment.exemplars", _as_bool, base.augment_exemplars),
        logit_clamp=_get(d, f"{t}.logit_clamp", float, base.logit_clamp),
    )

    if kwargs["epochs"] < 1:
        raise ConfigError(f"{t}.epochs", "must be >= 1")
    if kwargs["batch_size"] < 1:
        raise ConfigError(f"{t}.batch_size", "must be >= 1")
    return TrainerConfig(**kwargs)


def config_from_dict(d: Mapping[str, Any]) -> ExperimentConfig:
    """
    Convert a (merged) config mapping into an ExperimentConfig with defaults.
    """
    seed = _get(d, "seed", int, 1993)
    dataset_id = normalize_dataset(_get(d, "dataset.id"))
    data_dir = _get(d, "dataset.data_dir", str)

    method_params = {
        str(k): dict(v or {}) for k, v in (_get(d, "evaluation.method_params", dict, {}) or {}).items()
    }

    return ExperimentConfig(
        name=_get(d, "name", str, f"{dataset_id}-{seed}"),
        dataset_id=dataset_id,
        n_tasks=_get(d, "dataset.n_tasks", int, 5),
        seed=seed,
        backbone_id=_get(d, "backbone", str, "resnet32"),
        trainer=trainer_from_dict(d, seed),
        output_dir=Path(_get(d, "output_dir", str, "results")),
        data_dir=Path(data_dir) if data_dir else None,
        classes_per_task=_get(d, "dataset.classes_per_task", int, 2),
        samples_per_class=_get(d, "dataset.samples_per_class", int, 100),
        score_methods=tuple(_get(d, "evaluation.score_methods", lambda v: [str(m) for m in v], [])),
        method_params=method_params,
        beta_grid=tuple(_get(d, "evaluation.beta_grid", lambda v: [float(b) for b in v], list(DEFAULT_BETA_GRID))),
        uncertainty_source=_get(d, "evaluation.uncertainty_source", str, "uncorrected"),
        aupr_positive=_get(d, "evaluation.aupr_positive", str, "ind"),
    )


# -----------------------------
# 3) Validation
# -----------------------------
def resolve_data_dir(cfg: ExperimentConfig) -> Path:
    """DATA_DIR in the environment wins over the config value."""
    env = os.environ.get("DATA_DIR")
    if env:
        return Path(env)
    return cfg.data_dir if cfg.data_dir is not None else Path("./data")


def validate_config(cfg: ExperimentConfig, check_data: bool = True) -> None:
    if cfg.n_tasks < 1:
        raise ConfigError("dataset.n_tasks", "must be >= 1")
    if cfg.dataset_id == "cifar100" and CIFAR100_CLASSES % cfg.n_tasks != 0:
        raise ConfigError("dataset.n_tasks", f"{CIFAR100_CLASSES} classes cannot be split into {cfg.n_tasks} equal tasks")
    if cfg.dataset_id == "toy":
        if cfg.classes_per_task < 2:
            raise ConfigError("dataset.classes_per_task", "must be >= 2")
        if cfg.samples_per_class < 5:
            raise ConfigError("dataset.samples_per_class", "must be >= 5 (80/20 split)")
        if cfg.backbone_id == "resnet32":
            raise ConfigError("backbone", "toy data is 2-D; use 'mlp-toy'")
    if cfg.dataset_id == "cifar100" and cfg.backbone_id == "mlp-toy":
        raise ConfigError("backbone", "cifar100 needs an image backbone such as 'resnet32'")
    if cfg.backbone_id not in BACKBONES:
        raise ConfigError("backbone", f"unknown backbone '{cfg.backbone_id}' (options: {sorted(BACKBONES)})")

    t = cfg.trainer
    if t.method not in {"cedl", "baseline"}:
        raise ConfigError("trainer.method", f"must be 'cedl' or 'baseline', got '{t.method}'")
    if t.lr <= 0:
        raise ConfigError("trainer.lr", "must be > 0")
    if t.lr_schedule not in {"cosine", "constant"}:
        raise ConfigError("trainer.lr_schedule", "must be 'cosine' or 'constant'")
    if t.kd_temperature <= 0:
        raise ConfigError("trainer.kd_temperature", "must be > 0")
    if t.buffer_per_class < 0:
        raise ConfigError("trainer.buffer_per_class", "must be >= 0")
    if t.ekl_strength not in {"masked", "global"}:
        raise ConfigError("trainer.ekl_strength", "must be 'masked' or 'global'")
    if t.augment_policy not in AUGMENT_POLICIES:
        raise ConfigError("trainer.augment.policy", f"must be one of {AUGMENT_POLICIES}")
    if cfg.dataset_id == "toy" and t.augment_policy != "none":
        raise ConfigError("trainer.augment.policy", "toy data only supports 'none'")
    if t.logit_clamp <= 0:
        raise ConfigError("trainer.logit_clamp", "must be > 0")

    if not cfg.score_methods:
        raise ConfigError("evaluation.score_methods", "must list at least one method")
    unknown = [m for m in cfg.score_methods if m not in METHOD_REGISTRY]
    if unknown:
        raise ConfigError("evaluation.score_methods", f"unknown methods {unknown} (options: {sorted(METHOD_REGISTRY)})")
    if "cedl_combined" in cfg.score_methods and "beta" not in cfg.method_params.get("cedl_combined", {}):
        raise ConfigError("evaluation.method_params.cedl_combined.beta", "is required when cedl_combined is scored")
    if not cfg.beta_grid or any(not 0.0 <= b <= 1.0 for b in cfg.beta_grid):
        raise ConfigError("evaluation.beta_grid", "must be a non-empty list of values in [0, 1]")
    if cfg.uncertainty_source not in {"uncorrected", "corrected"}:
        raise ConfigError("evaluation.uncertainty_source", "must be 'uncorrected' or 'corrected'")
    if cfg.aupr_positive not in {"ind", "ood"}:
        raise ConfigError("evaluation.aupr_positive", "must be 'ind' or 'ood'")

    if check_data and cfg.dataset_id == "cifar100":
        try:
            find_cifar100(resolve_data_dir(cfg))
        except FileNotFoundError as e:
            raise ConfigError("dataset.data_dir", str(e)) from e


# -----------------------------
# 4) Serialization
# -----------------------------
def config_to_dict(cfg: ExperimentConfig) -> dict:
    """JSON-friendly dict of the full config (paths as strings, tuples as lists)."""
    return json.loads(json.dumps(asdict(cfg), default=str))


def _sha256(payload: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def config_hash(cfg: ExperimentConfig) -> str:
    return _sha256(config_to_dict(cfg))


# settings that only change how stored checkpoints are scored
EVALUATION_FIELDS = ("score_methods", "method_params", "beta_grid", "uncertainty_source", "aupr_positive")
# paths that do not change any number
LOCATION_FIELDS = ("output_dir", "data_dir")


def evaluation_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that feeds metrics.json given a fixed checkpoint."""
    d = config_to_dict(cfg)
    payload = {k: d[k] for k in EVALUATION_FIELDS}
    payload["logit_clamp"] = cfg.trainer.logit_clamp
    payload["apply_bc"] = cfg.trainer.apply_bc
    return _sha256(payload)


def training_hash(cfg: ExperimentConfig) -> str:
    """
    Hash of everything that shapes the checkpoints: data stream, backbone and
    trainer settings. Two configs with the same training hash may share
    task_<t>/ checkpoints.
    """
    d = config_to_dict(cfg)
    return _sha256({k: v for k, v in d.items() if k not in EVALUATION_FIELDS + LOCATION_FIELDS})
