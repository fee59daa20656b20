"""Experiment configuration and strict YAML loading."""

from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .rdd import DistillConfig
from .segmodel import STUDENT_SPEC, TEACHER_SPEC, ModelSpec
from .synth import SceneConfig


@dataclass
class OptimizerConfig:
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    teacher_spec: ModelSpec = field(default_factory=lambda: copy.deepcopy(TEACHER_SPEC))
    student_spec: ModelSpec = field(default_factory=lambda: copy.deepcopy(STUDENT_SPEC))
    distill: DistillConfig = field(default_factory=DistillConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    total_iters: int = 2000
    # None: same budget as the student
    teacher_iters: int | None = None
    teacher_aux_weight: float = 0.4
    teacher_seed: int = 0
    batch_size: int = 8
    eval_batch_size: int = 16
    eval_every: int = 200
    train_size: int = 512
    val_size: int = 128
    at_beta: float = 1000.0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs"

    def __post_init__(self):
        self.distill.total_iters = self.total_iters

    @property
    def resolved_teacher_iters(self) -> int:
        return self.total_iters if self.teacher_iters is None else self.teacher_iters

    def validate(self) -> None:
        self.teacher_spec.validate()
        self.student_spec.validate()
        for name, spec in (("teacher_spec", self.teacher_spec), ("student_spec", self.student_spec)):
            if spec.num_classes != self.scene.num_classes:
                raise ValueError(
                    f"{name}.num_classes={spec.num_classes} but scene.num_classes={self.scene.num_classes}"
                )
            self.scene.validate(spec.downsample_factor)
        self.distill.validate()
        if self.distill.total_iters != self.total_iters:
            raise ValueError("distill.total_iters must equal total_iters")
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")
        if self.resolved_teacher_iters < 0:
            raise ValueError("teacher_iters must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch sizes and eval_every must be positive")
        if self.train_size < 1 or self.val_size < 1:
            raise ValueError("train_size and val_size must be positive")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("teacher_spec", "student_spec"):
            d[key]["stages"] = [list(s) for s in d[key]["stages"]]
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        new.distill.total_iters = new.total_iters
        return new


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ValueError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ValueError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        sub = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = copy.deepcopy(data or {})
    top_iters = data.get("total_iters")
    sub_iters = (data.get("distill") or {}).get("total_iters")
    if top_iters is not None and sub_iters is not None and top_iters != sub_iters:
        raise ValueError(f"total_iters ({top_iters}) and distill.total_iters ({sub_iters}) disagree")
    if top_iters is None and sub_iters is not None:
        data["total_iters"] = sub_iters
    cfg = _build(ExperimentConfig, data, "")
    cfg.distill.total_iters = cfg.total_iters
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
