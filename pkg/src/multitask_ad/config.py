"""Run configuration: JSON file, validated with pydantic, overridable from the environment.

Environment variables ``MTAD_<SECTION>__<KEY>=value`` override config keys,
e.g. ``MTAD_TRAIN__EPOCHS=3``. Values are parsed as JSON when possible.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .backbone import EncoderConfig
from .data import ToyConfig
from .moe import ALL_TASKS, TaskId, task_from_label
from .pseudo import AugmentConfig, EllipseConfig
from .tasks import TaskConfig

SCHEMA_VERSION = 1
ENV_PREFIX = "MTAD_"
AXES_REFERENCE_SIZE = 256


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EncoderSection(_Section):
    depth: int = Field(4, ge=1, le=12)
    width: int = Field(128, ge=1)
    heads: int = Field(4, ge=1)
    patch_size: int = Field(16, ge=1)
    image_size: int = Field(256, ge=1)
    num_experts: int = Field(5, ge=1)
    moe_layers: Optional[list[int]] = None
    expert_dropout_rate: float = Field(0.10, ge=0.0, lt=1.0)
    mlp_ratio: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _shapes(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        return self

    def build(self) -> EncoderConfig:
        return EncoderConfig(**self.model_dump())


class TasksSection(_Section):
    enabled: list[str] = Field(default_factory=lambda: [t.label for t in ALL_TASKS])
    mask_ratio: float = Field(0.4, gt=0.0, lt=1.0)
    tiles_per_side: int = Field(4, ge=1)
    jigsaw_mode: Literal["full", "eq3"] = "full"
    mix_ratio: float = Field(0.25, gt=0.0, lt=1.0)
    decoder_width: int = 128
    decoder_depth: int = 8
    decoder_heads: int = 16
    head_hidden: Optional[int] = None

    @field_validator("enabled")
    @classmethod
    def _known(cls, v):
        if not v:
            raise ValueError("at least one task must be enabled")
        for name in v:
            task_from_label(name)
        return [task_from_label(n).label for n in sorted(set(v), key=lambda n: task_from_label(n))]

    @property
    def enabled_tasks(self) -> list[TaskId]:
        return [task_from_label(n) for n in self.enabled]

    def build(self) -> TaskConfig:
        return TaskConfig(**self.model_dump(exclude={"enabled"}))


class PseudoSection(_Section):
    seed: int = 0
    k_min: int = Field(3, ge=1)
    k_max: int = Field(8, ge=1)
    alpha: float = Field(0.5, ge=0.0)
    max_ops: int = Field(3, ge=1, le=5)
    ellipse_max: int = Field(5, ge=1)
    axes_min_px: float = 4.0  # at a 256-pixel image side; scaled with image_size
    axes_max_px: float = 48.0
    area_min: float = 0.01
    area_max: float = 0.25
    corpus_dir: Optional[str] = None
    external_gen_dir: Optional[str] = None

    def augment(self) -> AugmentConfig:
        return AugmentConfig(k_range=(self.k_min, self.k_max), alpha=self.alpha, max_ops=self.max_ops)

    def ellipse(self, image_size: int = AXES_REFERENCE_SIZE) -> EllipseConfig:
        scale = image_size / AXES_REFERENCE_SIZE
        return EllipseConfig(max_count=self.ellipse_max, axes_px=(self.axes_min_px * scale, self.axes_max_px * scale),
                             area_fraction=(self.area_min, self.area_max))


class TrainSection(_Section):
    epochs: int = Field(100, ge=1)
    phase1_epochs: int = Field(50, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    lr_min: float = 1e-6
    lr_factor: float = Field(0.5, gt=0, lt=1)
    patience: int = Field(5, ge=0)
    threshold: float = 1e-3
    optimizer: Literal["sgd", "adam"] = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: Optional[float] = Field(None, gt=0)  # global L2 norm; None disables
    standardize_inputs: bool = True  # scale pixels by the training-set mean and std
    famo_beta: float = 0.025
    famo_floor: float = 1e-8
    famo_reinit: bool = True
    checkpoint_every_epoch: bool = True

    @model_validator(mode="after")
    def _phases(self):
        if self.phase1_epochs >= self.epochs:
            raise ValueError("phase1_epochs must be smaller than epochs")
        return self


class ToySection(_Section):
    image_size: int = 64
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    noise_sigma: float = 0.02
    seed: int = 7

    def build(self) -> ToyConfig:
        return ToyConfig(image_size=self.image_size, n_train=self.n_train, n_val=self.n_val,
                         n_test=self.n_test, noise_sigma=self.noise_sigma)


class DataSection(_Section):
    train: Optional[str] = None
    val: Optional[str] = None
    test: Optional[str] = None
    toy: ToySection = Field(default_factory=ToySection)


class ScoringSection(_Section):
    jigsaw_permutations: int = Field(4, ge=1)
    top_k: int = Field(10, ge=1)
    mim_mode: Literal["complementary", "single"] = "complementary"
    fusion: Literal["uniform", "fit"] = "uniform"
    fusion_grid_step: float = Field(0.25, gt=0, le=1)
    seed: int = 1234


class RunConfig(_Section):
    schema_version: int = SCHEMA_VERSION
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    tasks: TasksSection = Field(default_factory=TasksSection)
    pseudo: PseudoSection = Field(default_factory=PseudoSection)
    train: TrainSection = Field(default_factory=TrainSection)
    data: DataSection = Field(default_factory=DataSection)
    scoring: ScoringSection = Field(default_factory=ScoringSection)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    output_dir: str = "outputs"

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}, expected {SCHEMA_VERSION}")
        return v

    def fingerprint(self) -> str:
        """Short hash of the canonical config, ignoring seeds and output location."""
        payload = self.model_dump(exclude={"seeds", "output_dir"})
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n"


class ConfigFileError(ValueError):
    """Schema violation; ``field`` is the dotted path of the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(raw: dict, environ: dict | None = None) -> dict:
    environ = os.environ if environ is None else environ
    for key, value in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigFileError(".".join(path), "cannot override inside a non-object value")
        node[path[-1]] = _parse_env_value(value)
    return raw


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def fix(p):
        return None if p is None else str((base / p).resolve()) if not Path(p).is_absolute() else p

    cfg.data.train = fix(cfg.data.train)
    cfg.data.val = fix(cfg.data.val)
    cfg.data.test = fix(cfg.data.test)
    cfg.pseudo.corpus_dir = fix(cfg.pseudo.corpus_dir)
    cfg.pseudo.external_gen_dir = fix(cfg.pseudo.external_gen_dir)
    cfg.output_dir = fix(cfg.output_dir)
    return cfg


def parse_config(raw: dict, base: Path | None = None, environ: dict | None = None) -> RunConfig:
    raw = apply_env_overrides(json.loads(json.dumps(raw)), environ)
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigFileError(field, err["msg"]) from None
    return _resolve_paths(cfg, base) if base is not None else cfg


def load_config(path: str | Path, environ: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigFileError("<file>", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigFileError("<root>", "config must be a JSON object")
    return parse_config(raw, path.parent.resolve(), environ)
