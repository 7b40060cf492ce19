"""Run configuration: a JSON file, overridden by the environment, overridden by flags."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import DatasetManifest
from .distillation import ConfigError, DistillConfig, LossWeights
from .models import ModelDims

SEED_ENV = "MODAL_DISTILL_SEED"


@dataclass
class TrainingConfig:
    lr: float = 1e-2
    gamma: float = 0.1
    step_epochs: list[int] = field(default_factory=lambda: [10])
    teacher_step_epochs: list[int] = field(default_factory=list)
    batch_size: int = 32
    teacher_epochs: int = 5
    student_epochs: int = 20


@dataclass
class DistillSection:
    teachers: list[str] = field(default_factory=list)
    with_intermediate: bool = False
    weights: dict = field(default_factory=lambda: asdict(LossWeights()))


@dataclass
class RunConfig:
    d_word: int = 32
    d_hidden: int = 64
    training: TrainingConfig = field(default_factory=TrainingConfig)
    distill: DistillSection = field(default_factory=DistillSection)
    seed: int = 0

    def dims_for(self, manifest: DatasetManifest) -> ModelDims:
        return ModelDims(
            d_img=manifest.d_img,
            n_regions=manifest.r,
            d_word=self.d_word,
            d_hidden=self.d_hidden,
            question_vocab=manifest.question_vocab,
            answer_vocab=manifest.answer_vocab,
        )

    def distill_config(self) -> DistillConfig:
        t = self.training
        try:
            weights = LossWeights(**self.distill.weights)
        except TypeError as exc:
            raise ConfigError(f"bad loss weights: {exc}") from exc
        return DistillConfig(
            teacher_set=frozenset(self.distill.teachers),
            with_intermediate=self.distill.with_intermediate,
            weights=weights,
            epochs=t.student_epochs,
            teacher_epochs=t.teacher_epochs,
            batch_size=t.batch_size,
            seed=self.seed,
            lr=t.lr,
            gamma=t.gamma,
            step_epochs=list(t.step_epochs),
            teacher_step_epochs=list(t.teacher_step_epochs),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    return raw


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    raw = dict(_build(RunConfig, raw, str(p)))
    training = TrainingConfig(**_build(TrainingConfig, raw.pop("training", {}), "training"))
    distill = DistillSection(**_build(DistillSection, raw.pop("distill", {}), "distill"))
    return RunConfig(training=training, distill=distill, **raw)


def resolve_seed(cfg: RunConfig, flag: int | None) -> int:
    """Precedence: flag > environment > config file."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg.seed
