"""Experiment configuration: one INI `[experiment]` section validated by pydantic."""
import configparser
import logging
from pathlib import Path
from typing import Dict, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, NonNegativeFloat, PositiveFloat, PositiveInt, model_validator

from src.core.errors import ConfigurationError
from src.core.rng import DEFAULT_SEED
from src.training.trainer import TrainConfig

logger = logging.getLogger(__name__)

SECTION = "experiment"

Method = Literal["adaptcl", "sgd", "ewc", "packnet_star", "sml"]
SequenceName = Literal["mnist_strong", "mnist_mild", "synthetic_strong", "synthetic_mild"]
ModelName = Literal["lenet5", "toy_mlp", "toy_cnn"]

# keys consumed by one method only
METHOD_KEYS = {
    "alpha": "adaptcl",
    "alpha_rule": "adaptcl",
    "pruning": "adaptcl",
    "ewc_lambda": "ewc",
    "ewc_samples": "ewc",
    "prune_fraction": "packnet_star",
    "retrain_epochs": "packnet_star",
}
SYNTHETIC_KEYS = ("tasks", "samples_per_class", "image_size", "noise")
MNIST_KEYS = ("shared_stats", "limit")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Method = "adaptcl"
    sequence: SequenceName = "synthetic_strong"
    model: ModelName = "toy_cnn"
    order: Literal["forward", "reverse"] = "forward"
    output_dir: str = "runs/default"
    seed: int = DEFAULT_SEED

    learning_rate: PositiveFloat = 0.001
    momentum: NonNegativeFloat = 0.9
    nesterov: bool = True
    epochs_per_dataset: PositiveInt = 5
    batch_size: PositiveInt = 32
    eval_batch_size: PositiveInt = 512
    fwt_exclude_last: bool = False
    batchnorm: bool = False

    alpha: Optional[NonNegativeFloat] = None
    alpha_rule: Optional[Literal["steps", "images"]] = None
    pruning: Optional[bool] = None
    ewc_lambda: Optional[NonNegativeFloat] = None
    ewc_samples: Optional[PositiveInt] = None
    prune_fraction: Optional[PositiveFloat] = None
    retrain_epochs: Optional[PositiveInt] = None

    tasks: Optional[PositiveInt] = None
    samples_per_class: Optional[PositiveInt] = None
    image_size: Optional[PositiveInt] = None
    noise: Optional[NonNegativeFloat] = None
    shared_stats: Optional[bool] = None
    limit: Optional[PositiveInt] = None

    @model_validator(mode="after")
    def _keys_match_method(self) -> "ExperimentConfig":
        for key, owner in METHOD_KEYS.items():
            if getattr(self, key) is not None and self.method != owner:
                raise ValueError(f"key '{key}' only applies to method '{owner}', not '{self.method}'")
        synthetic = self.sequence.startswith("synthetic")
        for key in (MNIST_KEYS if synthetic else SYNTHETIC_KEYS):
            if getattr(self, key) is not None:
                raise ValueError(f"key '{key}' does not apply to sequence '{self.sequence}'")
        if self.model == "lenet5" and synthetic and (self.image_size or 8) != 32:
            raise ValueError("model 'lenet5' needs image_size = 32")
        if self.batchnorm and self.model != "toy_cnn":
            raise ValueError("key 'batchnorm' only applies to model 'toy_cnn'")
        if self.method == "packnet_star" and (self.retrain_epochs or 10) >= self.epochs_per_dataset:
            raise ValueError("retrain_epochs must be below epochs_per_dataset")
        if self.momentum >= 1.0:
            raise ValueError("momentum must be < 1")
        if self.prune_fraction is not None and self.prune_fraction >= 1.0:
            raise ValueError("prune_fraction must lie in (0, 1)")
        return self

    @property
    def shift(self) -> str:
        return self.sequence.split("_", 1)[1]

    def train_config(self) -> TrainConfig:
        extra = {}
        if self.method == "adaptcl":
            extra = {k: v for k, v in (("alpha", self.alpha), ("alpha_rule", self.alpha_rule),
                                       ("pruning", self.pruning)) if v is not None}
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            nesterov=self.nesterov,
            epochs_per_dataset=self.epochs_per_dataset,
            batch_size=self.batch_size,
            eval_batch_size=self.eval_batch_size,
            seed=self.seed,
            **extra,
        )

    def method_options(self) -> Dict[str, float]:
        keys = [k for k, owner in METHOD_KEYS.items() if owner == self.method and owner in ("ewc", "packnet_star")]
        return {k: getattr(self, k) for k in keys if getattr(self, k) is not None}


def parse_ini(text: str) -> Dict[str, str]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"unreadable config: {e}") from e
    if not parser.has_section(SECTION):
        raise ConfigurationError(f"config needs an [{SECTION}] section")
    extra = [s for s in parser.sections() if s != SECTION]
    if extra:
        raise ConfigurationError(f"unknown section(s): {', '.join(extra)}")
    return {k: v for k, v in parser.items(SECTION) if v != ""}


def load_config(path: Union[str, Path], overrides: Optional[Dict[str, object]] = None) -> ExperimentConfig:
    """Read an INI preset; CLI overrides (method, seed) win over the file."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    values: Dict[str, object] = dict(parse_ini(path.read_text()))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    config = ExperimentConfig(**values)
    logger.info(f"Loaded config {path}: method={config.method} sequence={config.sequence} seed={config.seed}")
    return config


def config_to_ini(config: ExperimentConfig) -> str:
    lines = [f"[{SECTION}]"]
    for key, value in config.model_dump().items():
        if value is None:
            continue
        lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"
