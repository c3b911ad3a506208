"""Run configuration: YAML file -> validated, fully defaulted ``RunConfig``.

Every section is optional; an empty file yields the default scenario
(16 x 16 RIS, 8-layer 5 x 5 network, batch 256, two 4000-epoch phases).
Unknown keys are rejected. Validation errors name the offending key, the
expected type and the line in the file.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .channel import ChannelSpec
from .evaluation import DEFAULT_RHOS, DEFAULT_WEIGHT_SET
from .fcn import ArchSpec
from .precoding import LinkBudget, check_weights
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = "", line: int | None = None):
        self.key, self.line = key, line
        super().__init__(message)


class ModelSection(BaseModel):
    """Network shape; users and grid come from the channel section."""

    model_config = ConfigDict(extra="forbid")

    n_layers: int = Field(8, ge=1)
    kernel: tuple[int, int] = (5, 5)
    hidden_maps: int = Field(32, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    negative_slope: float = 0.01
    check_coverage: bool = True

    def arch(self, users: int, ris_shape) -> ArchSpec:
        return ArchSpec(users=users, ris_shape=tuple(ris_shape), n_layers=self.n_layers, kernel=self.kernel,
                        hidden_maps=self.hidden_maps, dropout=self.dropout, negative_slope=self.negative_slope)


class EvalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # None -> reuse train.weights
    weights: Optional[tuple[float, ...]] = None
    split: str = "test"
    weight_set: tuple[tuple[float, ...], ...] = DEFAULT_WEIGHT_SET
    rhos: tuple[float, ...] = DEFAULT_RHOS
    gammas: tuple[float, ...] = (0.0, 0.1, 0.2)
    gamma: float = Field(0.0, ge=0)
    include_h: bool = False
    codebook: Optional[tuple[float, ...]] = None
    max_outer: int = Field(100, ge=1)
    eps: float = Field(1e-4, gt=0)
    altgrad_steps: int = Field(200, ge=1)
    altgrad_step_size: float = Field(0.1, gt=0)

    @field_validator("rhos")
    @classmethod
    def _rhos(cls, v):
        if not v or any(r <= 0 for r in v):
            raise ValueError("rhos must be a non-empty list of positive numbers")
        return v

    @field_validator("gammas")
    @classmethod
    def _gammas(cls, v):
        if any(g < 0 for g in v):
            raise ValueError("gammas must be >= 0")
        return v

    @field_validator("weight_set")
    @classmethod
    def _weight_set(cls, v):
        for w in v:
            check_weights(w)
        return v


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    output_dir: str = "runs"
    channels: ChannelSpec = Field(default_factory=ChannelSpec)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalSection = Field(default_factory=EvalSection)

    @model_validator(mode="before")
    @classmethod
    def _no_nested_seed(cls, data):
        if isinstance(data, dict) and isinstance(data.get("train"), dict) and "seed" in data["train"]:
            raise ValueError("train.seed is not configurable; set the top-level seed")
        return data

    @model_validator(mode="after")
    def _consistent(self):
        check_weights(self.train.weights, self.channels.users)
        if self.eval.weights is not None:
            check_weights(self.eval.weights, self.channels.users)
        for w in self.eval.weight_set:
            check_weights(w, self.channels.users)
        return self

    def arch(self) -> ArchSpec:
        return self.model.arch(self.channels.users, self.channels.ris_shape)

    def train_config(self) -> TrainConfig:
        return self.train.model_copy(update={"seed": int(self.seed)})

    @property
    def eval_weights(self) -> tuple[float, ...]:
        return self.eval.weights if self.eval.weights is not None else self.train.weights

    @property
    def link(self) -> LinkBudget:
        return LinkBudget(self.train.rho, self.train.e_tr)

    def normalized(self) -> dict:
        return self.model_dump(mode="json", exclude={"train": {"seed"}})

    def digest(self) -> str:
        """SHA-256 over the canonical JSON form of the effective config."""
        blob = json.dumps(self.normalized(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def echo(self) -> str:
        return yaml.safe_dump(self.normalized(), sort_keys=True)


def _locate(node, loc) -> tuple[int | None, str]:
    """Line (1-based) of the deepest YAML node reachable along ``loc``."""
    line = None if node is None else node.start_mark.line + 1
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(part):
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            if nxt is None:
                break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            break
    return line, ".".join(str(p) for p in loc)


def _expected(err: dict) -> str:
    kind = err.get("type", "")
    if kind == "extra_forbidden":
        return "no such key"
    names = {"int_parsing": "integer", "int_type": "integer", "float_parsing": "number", "float_type": "number",
             "bool_parsing": "boolean", "bool_type": "boolean", "string_type": "string", "tuple_type": "list",
             "list_type": "list", "dict_type": "mapping", "model_type": "mapping"}
    if kind in names:
        return f"expected {names[kind]}"
    bounds = {"greater_than": ">", "greater_than_equal": ">=", "less_than": "<", "less_than_equal": "<="}
    if kind in bounds:
        (limit,) = err.get("ctx", {}).values()
        return f"expected number {bounds[kind]} {limit}"
    return err.get("msg", kind)


def config_from_mapping(data: dict | None, node=None, source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-")))
        line, key = _locate(node, loc)
        where = f"{source}:{line}" if line else source
        key = key or "<root>"
        msg = _expected(err)
        if msg != err["msg"]:
            msg = f"{msg} ({err['msg']})"
        raise ConfigError(f"{where}: invalid value for '{key}': {msg}", key, line) from None


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else None
        raise ConfigError(f"{path}:{line}: malformed YAML: {getattr(exc, 'problem', exc)}", line=line) from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping", line=1)
    return config_from_mapping(data, node, str(path))
