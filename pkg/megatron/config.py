"""Experiment configuration: strict JSON loading into nested dataclasses."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

from .datasets import DatasetSpec
from .errors import ConfigError, MegatronError
from .metrics import SSIMConfig
from .poison import PoisonConfig
from .trigger import TriggerConfig
from .vit import ModelConfig, TrainConfig

LOGGER = logging.getLogger("megatron.config")

SCHEMA_VERSION = 1
ATTACKER_POOLS = ("shared", "disjoint")

T = TypeVar("T")


@dataclass(frozen=True)
class ModelSpec:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass(frozen=True)
class AttackSpec:
    target_label: int = 0
    source_label: Optional[int] = 1
    attacker_pool: str = "shared"


@dataclass(frozen=True)
class EvaluationSpec:
    sub_trigger_index: int = 0
    location: Optional[Tuple[int, int]] = None
    shifts: Tuple[Any, ...] = (0, 1, 2)
    ssim: SSIMConfig = field(default_factory=SSIMConfig)


@dataclass(frozen=True)
class DefenseSpec:
    enabled: bool = True
    drop_rate: float = 0.25
    shuffle: bool = True
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    surrogate: ModelSpec = field(default_factory=ModelSpec)
    victim: ModelSpec = field(default_factory=ModelSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    poison: PoisonConfig = field(default_factory=PoisonConfig)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with every stage seed replaced by ``seed``."""

        replace = dataclasses.replace
        return replace(
            self,
            seed=seed,
            dataset=replace(self.dataset, seed=seed),
            surrogate=replace(self.surrogate, train=replace(self.surrogate.train, seed=seed)),
            victim=replace(self.victim, train=replace(self.victim.train, seed=seed)),
            trigger=replace(self.trigger, seed=seed),
            poison=replace(self.poison, seed=seed),
            defense=replace(self.defense, seed=seed),
        )

    def with_poison(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, poison=dataclasses.replace(self.poison, **changes))


# Nested sections: field name -> dataclass
_NESTED: Dict[type, Dict[str, type]] = {
    ExperimentConfig: {
        "dataset": DatasetSpec,
        "surrogate": ModelSpec,
        "victim": ModelSpec,
        "attack": AttackSpec,
        "trigger": TriggerConfig,
        "poison": PoisonConfig,
        "evaluation": EvaluationSpec,
        "defense": DefenseSpec,
    },
    ModelSpec: {"model": ModelConfig, "train": TrainConfig},
    EvaluationSpec: {"ssim": SSIMConfig},
}
_TUPLES = {(DatasetSpec, "classes"), (EvaluationSpec, "location"), (EvaluationSpec, "shifts")}


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    return value


def _expand(value: Any, key_path: str) -> Any:
    if isinstance(value, str):
        expanded = os.path.expandvars(value)
        if "${" in expanded:
            raise ConfigError(f"Variável de ambiente não definida em {key_path}: {value}", key_path=key_path)
        return expanded
    if isinstance(value, list):
        return [_expand(item, f"{key_path}[{index}]") for index, item in enumerate(value)]
    return value


# Declared scalar annotation -> accepted JSON types (bool is not an int here)
_SCALARS: Dict[str, Tuple[type, ...]] = {"bool": (bool,), "int": (int,), "float": (int, float), "str": (str,)}


def _check_scalar(annotation: Any, value: Any, key_path: str) -> None:
    declared = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", "")
    optional = declared.startswith("Optional[")
    if optional:
        declared = declared[len("Optional[") : -1]
        if value is None:
            return
    accepted = _SCALARS.get(declared)
    if accepted is None:
        return
    if (isinstance(value, bool) and declared != "bool") or not isinstance(value, accepted):
        raise ConfigError(
            f"Valor inválido em {key_path}: esperado {declared}, recebido {json.dumps(value)}", key_path=key_path
        )


def _build(cls: Type[T], payload: Any, key_path: str) -> T:
    if not isinstance(payload, dict):
        raise ConfigError(f"Seção {key_path or '<raiz>'} deve ser um objeto JSON", key_path=key_path)
    names = {item.name for item in dataclasses.fields(cls)}
    for key in payload:
        if key not in names:
            dotted = f"{key_path}.{key}" if key_path else key
            raise ConfigError(f"Chave desconhecida na configuração: {dotted}", key_path=dotted)
    nested = _NESTED.get(cls, {})
    annotations = {item.name: item.type for item in dataclasses.fields(cls)}
    kwargs: Dict[str, Any] = {}
    for key, value in payload.items():
        dotted = f"{key_path}.{key}" if key_path else key
        if key in nested:
            kwargs[key] = _build(nested[key], value, dotted)
            continue
        value = _expand(value, dotted)
        _check_scalar(annotations[key], value, dotted)
        if (cls, key) in _TUPLES and isinstance(value, list):
            value = tuple(tuple(item) if isinstance(item, list) else item for item in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (MegatronError, TypeError, ValueError) as exc:
        raise ConfigError(f"Valor inválido em {key_path or '<raiz>'}: {exc}", key_path=key_path) from exc


def _check_consistency(config: ExperimentConfig) -> None:
    n_classes = len(config.dataset.classes)
    for role in ("surrogate", "victim"):
        model = getattr(config, role).model
        if model.n_classes != n_classes:
            raise ConfigError(
                f"{role}.model.n_classes={model.n_classes} difere das {n_classes} classes do dataset",
                key_path=f"{role}.model.n_classes",
            )
        if model.image_size != config.dataset.image_size:
            raise ConfigError(
                f"{role}.model.image_size difere de dataset.image_size", key_path=f"{role}.model.image_size"
            )
        if model.channels != config.dataset.channels:
            raise ConfigError(
                f"{role}.model.channels difere de dataset.channels", key_path=f"{role}.model.channels"
            )
    attack = config.attack
    if not 0 <= attack.target_label < n_classes:
        raise ConfigError("attack.target_label fora do intervalo de classes", key_path="attack.target_label")
    if attack.source_label is not None:
        if not 0 <= attack.source_label < n_classes or attack.source_label == attack.target_label:
            raise ConfigError("attack.source_label inválido", key_path="attack.source_label")
    elif config.poison.mode == "one-to-one":
        raise ConfigError("Modo one-to-one exige attack.source_label", key_path="attack.source_label")
    if attack.attacker_pool not in ATTACKER_POOLS:
        raise ConfigError(f"attack.attacker_pool deve ser um de {ATTACKER_POOLS}", key_path="attack.attacker_pool")
    if not config.trigger.rect.inside(config.dataset.image_size):
        raise ConfigError("Retângulo do trigger fora da imagem", key_path="trigger")
    if not 0 <= config.evaluation.sub_trigger_index < config.poison.K:
        raise ConfigError("evaluation.sub_trigger_index deve estar em [0, K)", key_path="evaluation.sub_trigger_index")
    if not 0.0 <= config.defense.drop_rate < 1.0:
        raise ConfigError("defense.drop_rate deve estar em [0, 1)", key_path="defense.drop_rate")


def parse_experiment_config(payload: Dict[str, Any]) -> ExperimentConfig:
    version = payload.get("schema_version", SCHEMA_VERSION) if isinstance(payload, dict) else None
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version} não suportada (esperado {SCHEMA_VERSION})", key_path="schema_version")
    config = _build(ExperimentConfig, payload, "")
    _check_consistency(config)
    return config


def load_experiment_config(path: Path, *, seed: Optional[int] = None) -> ExperimentConfig:
    """Read ``path``; ``seed`` overrides every seed in the file."""

    resolved = path.expanduser()
    if not resolved.exists():
        raise ConfigError(
            f"Arquivo de configuração {resolved} não encontrado. Crie a partir de config.example.json.",
            key_path=str(resolved),
        )
    try:
        payload = json.loads(resolved.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON inválido em {resolved}: {exc}") from exc
    config = parse_experiment_config(payload)
    if seed is not None:
        config = config.with_seed(seed)
    LOGGER.debug("Configuração carregada de %s", resolved)
    return config


__all__ = [
    "AttackSpec",
    "DefenseSpec",
    "EvaluationSpec",
    "ExperimentConfig",
    "ModelSpec",
    "SCHEMA_VERSION",
    "load_experiment_config",
    "parse_experiment_config",
]
