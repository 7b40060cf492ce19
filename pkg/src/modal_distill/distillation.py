"""Distillation objective and the two training loops.

Loss ids follow the teacher/feature pairing:

    l21  visual teacher  z_vi -> student z_vi     (intermediary)
    l22  question teacher z_qi -> student z_qi    (intermediary)
    l23  big teacher     z_vi -> student z_vi     (intermediary)
    l24  big teacher     z_qi -> student z_qi     (intermediary)
    l25  visual teacher  z_p  -> student z_p
    l26  question teacher z_p -> student z_p
    l27  big teacher     z_p  -> student z_p
    l2a  answer teacher  z_p  -> student z_p      (prediction only)

The total is ``lambda0 * bce + sum(lambda_i * l2i)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ContractError, StepDecaySchedule, Tensor, adam_step, schedule_step
from .data import VqdExample, batch_iter, collate
from .layers import bce_with_logits, l2_feature_loss
from .models import ModelDims, TeacherOutputs, VqdModel, build_model

logger = logging.getLogger(__name__)

TEACHER_KINDS = ("big", "visual", "question", "answer")
LOSS_IDS = ("l21", "l22", "l23", "l24", "l25", "l26", "l27", "l2a")

# loss id -> (teacher, teacher field, student field, needs with_intermediate)
LOSS_TABLE = {
    "l21": ("visual", "z_vi", "z_vi", True),
    "l22": ("question", "z_qi", "z_qi", True),
    "l23": ("big", "z_vi", "z_vi", True),
    "l24": ("big", "z_qi", "z_qi", True),
    "l25": ("visual", "z_p", "z_p", False),
    "l26": ("question", "z_p", "z_p", False),
    "l27": ("big", "z_p", "z_p", False),
    "l2a": ("answer", "z_p", "z_p", False),
}

_SHORT = {"big": "Big", "visual": "V", "question": "Q", "answer": "A"}


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(ValueError):
    """Inconsistent training configuration (e.g. a teacher without a checkpoint)."""


@dataclass
class LossWeights:
    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    lambda6: float = 1.0
    lambda7: float = 1.0
    lambda_answer: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ContractError(f"{k} must be a finite nonnegative number, got {v}")

    def for_loss(self, loss_id: str) -> float:
        if loss_id == "bce":
            return self.lambda0
        if loss_id == "l2a":
            return self.lambda_answer
        return getattr(self, f"lambda{int(loss_id[2])}")


@dataclass
class DistillConfig:
    teacher_set: frozenset[str] = frozenset()
    with_intermediate: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 20
    teacher_epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-2
    gamma: float = 0.1
    step_epochs: list[int] = field(default_factory=lambda: [10])
    teacher_step_epochs: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.teacher_set = frozenset(self.teacher_set)
        unknown = self.teacher_set - set(TEACHER_KINDS)
        if unknown:
            raise ConfigError(f"unknown teachers {sorted(unknown)}; choose from {TEACHER_KINDS}")
        if self.epochs < 0 or self.teacher_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def active_losses(self) -> list[str]:
        return [
            lid
            for lid, (teacher, _, _, inter) in LOSS_TABLE.items()
            if teacher in self.teacher_set and (self.with_intermediate or not inter)
        ]

    @property
    def label(self) -> str:
        if not self.teacher_set:
            return "Baseline"
        name = "&".join(_SHORT[k] for k in TEACHER_KINDS if k in self.teacher_set)
        return f"{name} (w/I)" if self.with_intermediate else name


@dataclass
class LossBreakdown:
    """Scalar loss terms of one step. Inactive distillation terms are absent
    from ``terms`` and read as 0."""

    terms: dict[str, Tensor]
    weights: LossWeights

    def value(self, loss_id: str) -> float:
        t = self.terms.get(loss_id)
        return 0.0 if t is None else t.item()

    def __getattr__(self, name):
        if name in LOSS_IDS or name == "bce":
            return self.value(name)
        raise AttributeError(name)

    @property
    def total(self) -> float:
        # same accumulation order as total_loss
        acc = self.weights.lambda0 * self.value("bce")
        for lid in LOSS_IDS:
            acc = acc + self.weights.for_loss(lid) * self.value(lid)
        return acc

    def as_dict(self) -> dict[str, float]:
        d = {"bce": self.value("bce")}
        d.update({lid: self.value(lid) for lid in LOSS_IDS})
        d["total"] = self.total
        return d


def compute_distill_losses(
    student: TeacherOutputs,
    teachers: Mapping[str, TeacherOutputs],
    cfg: DistillConfig,
    labels=None,
) -> LossBreakdown:
    """Evaluate the BCE term (when labels are given) and every active L2 term."""
    terms: dict[str, Tensor] = {}
    if labels is not None:
        terms["bce"] = bce_with_logits(student.z_p, labels)
    for lid in cfg.active_losses():
        teacher, t_field, s_field, _ = LOSS_TABLE[lid]
        out = teachers.get(teacher)
        if out is None or getattr(out, t_field) is None:
            raise ContractError(f"{lid}: teacher '{teacher}' provides no {t_field}")
        s_val = getattr(student, s_field)
        if s_val is None:
            raise ContractError(f"{lid}: student provides no {s_field}")
        terms[lid] = l2_feature_loss(getattr(out, t_field), s_val)
    return LossBreakdown(terms, cfg.weights)


def total_loss(breakdown: LossBreakdown, labels=None, student_logits: Tensor | None = None) -> Tensor:
    """Differentiable weighted sum. Terms whose weight is exactly 0 stay out of
    the graph, so they contribute no gradient at all."""
    if "bce" not in breakdown.terms:
        if labels is None or student_logits is None:
            raise ContractError("total_loss needs labels and student logits when the breakdown has no bce term")
        breakdown.terms["bce"] = bce_with_logits(student_logits, labels)
    w = breakdown.weights
    total = ad.scale(breakdown.terms["bce"], w.lambda0)
    for lid in LOSS_IDS:
        lam = w.for_loss(lid)
        if lid in breakdown.terms and lam != 0.0:
            total = total + ad.scale(breakdown.terms[lid], lam)
    return ad.reshape(total, ())


# -- training loops ---------------------------------------------------------------

StepFn = Callable[[VqdModel, object], tuple[Tensor, dict[str, float]]]


def fit(
    model: VqdModel,
    dataset: Sequence[VqdExample],
    epochs: int,
    schedule: StepDecaySchedule,
    batch_size: int,
    seed: int,
    step_fn: StepFn,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Adam over shuffled mini-batches; returns one averaged record per epoch."""
    params = model.parameters()
    state = AdamState.for_params(params, learning_rate=schedule.learning_rate)
    history = []
    for epoch in range(epochs):
        state.learning_rate = schedule_step(schedule, epoch)
        sums: dict[str, float] = {}
        n_batches = 0
        for batch in batch_iter(dataset, batch_size, seed, epoch):
            model.zero_grad()
            loss, record = step_fn(model, batch)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {n_batches}")
            ad.backward(loss)
            adam_step(params, [p.grad for p in params], state)
            for k, v in record.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        rec = {"epoch": epoch, "lr": state.learning_rate}
        rec.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        logger.info("epoch %d %s", epoch, rec)
    return history


def _bce_step(model, batch):
    loss = bce_with_logits(model(batch).z_p, batch.labels)
    return loss, {"bce": loss.item()}


def train_plain(model: VqdModel, dataset, epochs: int, cfg: DistillConfig, step_epochs=None, on_epoch=None):
    """BCE-only training of any model kind."""
    sched = StepDecaySchedule(cfg.lr, cfg.gamma, list(cfg.step_epochs if step_epochs is None else step_epochs))
    return fit(model, dataset, epochs, sched, cfg.batch_size, cfg.seed, _bce_step, on_epoch)


def pretrain_teacher(
    kind: str, dataset: Sequence[VqdExample], dims: ModelDims, cfg: DistillConfig, on_epoch=None
) -> tuple[VqdModel, list[dict]]:
    """Initialise a model of ``kind`` from ``cfg.seed`` and train it on BCE for
    ``cfg.teacher_epochs`` epochs."""
    model = build_model(kind, dims, cfg.seed)
    history = train_plain(model, dataset, cfg.teacher_epochs, cfg, cfg.teacher_step_epochs, on_epoch)
    return model, history


def check_teacher_compat(student: VqdModel, teachers: Mapping[str, VqdModel], cfg: DistillConfig, probe) -> None:
    """Run every active loss once on a probe batch so that missing features or
    shape mismatches surface before training starts."""
    with ad.no_grad():
        s_out = student(probe)
        t_out = {k: m(probe) for k, m in teachers.items()}
        compute_distill_losses(s_out, t_out, cfg)


def train_student(
    dataset: Sequence[VqdExample],
    teachers: Mapping[str, VqdModel],
    cfg: DistillConfig,
    dims: ModelDims,
    on_epoch=None,
) -> tuple[VqdModel, list[dict]]:
    """Distil frozen teachers into a fresh student (Baseline when the teacher set is empty)."""
    missing = sorted(cfg.teacher_set - set(teachers))
    if missing:
        raise ConfigError(f"no checkpoint for teacher(s) {missing}")
    active = {k: teachers[k] for k in cfg.teacher_set}
    for t in active.values():
        t.freeze()
    student = build_model("student", dims, cfg.seed)
    if dataset and active:
        check_teacher_compat(student, active, cfg, collate(dataset[:1]))

    def step(model, batch):
        with ad.no_grad():
            t_out = {k: m(batch) for k, m in active.items()}
        s_out = model(batch)
        br = compute_distill_losses(s_out, t_out, cfg, batch.labels)
        loss = total_loss(br)
        return loss, br.as_dict()

    sched = StepDecaySchedule(cfg.lr, cfg.gamma, list(cfg.step_epochs))
    history = fit(student, dataset, cfg.epochs, sched, cfg.batch_size, cfg.seed, step, on_epoch)
    return student, history


def params_equal(a: VqdModel, b: VqdModel) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)
