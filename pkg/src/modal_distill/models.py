"""Forward graphs for the three single-modality teachers, the tri-modal Big
teacher and the image+question student.

Every model takes a batch-like object exposing ``image`` [B x R x d_img],
``tokens`` [B x T] (0 = pad), ``lengths`` [B] and ``answers`` [B x 10], and
returns :class:`TeacherOutputs`. Only the fields a model uses are read.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .layers import EmbeddingTable, GruLayer, LinearLayer, MlpBlock, Module, TopDownAttention

N_CLASSES = 10
ANSWERS_PER_EXAMPLE = 10
MODEL_KINDS = ("visual", "question", "answer", "big", "student")


@dataclass(frozen=True)
class ModelDims:
    d_img: int = 16
    n_regions: int = 4
    d_word: int = 32
    d_hidden: int = 64
    n_classes: int = N_CLASSES
    question_vocab: int = 64
    answer_vocab: int = 128
    answers_per_example: int = ANSWERS_PER_EXAMPLE

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not isinstance(val, (int, np.integer)) or val < 1:
                raise ContractError(f"ModelDims.{name} must be a positive int, got {val!r}")
        if self.n_classes != N_CLASSES:
            raise ContractError(f"n_classes is fixed at {N_CLASSES}, got {self.n_classes}")
        if self.answers_per_example != ANSWERS_PER_EXAMPLE:
            raise ContractError(f"answers_per_example is fixed at {ANSWERS_PER_EXAMPLE}")

    def to_dict(self) -> dict:
        return {k: int(v) for k, v in asdict(self).items()}


@dataclass
class TeacherOutputs:
    z_p: Tensor
    z_vi: Optional[Tensor] = None
    z_qi: Optional[Tensor] = None
    z_ai: Optional[Tensor] = None


def _image(batch, dims: ModelDims) -> Tensor:
    img = np.asarray(batch.image, dtype=np.float64)
    if img.ndim != 3 or img.shape[1:] != (dims.n_regions, dims.d_img):
        raise DimensionError(
            f"image features {img.shape} vs expected [batch x {dims.n_regions} x {dims.d_img}]"
        )
    return Tensor(img)


def _tokens(batch, dims: ModelDims) -> tuple[np.ndarray, np.ndarray]:
    tok = np.asarray(batch.tokens, dtype=np.int64)
    if tok.ndim != 2:
        raise DimensionError(f"question tokens {tok.shape} vs expected [batch x T]")
    if tok.shape[1] == 0:
        raise ContractError("question tokens: empty sequence")
    lengths = getattr(batch, "lengths", None)
    lengths = np.full(tok.shape[0], tok.shape[1]) if lengths is None else np.asarray(lengths)
    if (lengths < 1).any():
        raise ContractError("question tokens: every example needs at least one token")
    return tok, lengths


def _answers(batch, dims: ModelDims) -> np.ndarray:
    ans = getattr(batch, "answers", None)
    if ans is None:
        raise ContractError("answers modality missing from batch")
    ans = np.asarray(ans, dtype=np.int64)
    if ans.ndim != 2 or ans.shape[1] != dims.answers_per_example:
        raise DimensionError(f"answers {ans.shape} vs expected [batch x {dims.answers_per_example}]")
    return ans


class QuestionEncoder(Module):
    """Word embedding followed by a single-layer GRU, read out at true length."""

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        self.embed = EmbeddingTable(dims.question_vocab, dims.d_word, rng)
        self.gru = GruLayer(dims.d_word, dims.d_hidden, rng)

    def __call__(self, tokens: np.ndarray, lengths: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.gru.run(self.embed(tokens), lengths=lengths)


class VqdModel(Module):
    kind = "base"

    def __init__(self, dims: ModelDims):
        self.dims = dims

    def __call__(self, batch) -> TeacherOutputs:
        return self.forward(batch)

    def check_widths(self, out: TeacherOutputs) -> None:
        for name in ("z_vi", "z_qi", "z_ai"):
            z = getattr(out, name)
            if z is not None and z.shape[-1] != self.dims.d_hidden:
                raise DimensionError(f"{self.kind}.{name} width {z.shape[-1]} != d_hidden {self.dims.d_hidden}")


class VisualTeacher(VqdModel):
    kind = "visual"

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        super().__init__(dims)
        self.proj = LinearLayer(dims.d_img, dims.d_hidden, rng)
        self.mlp = MlpBlock(dims.d_hidden, dims.d_hidden, dims.n_classes, rng)

    def forward(self, batch) -> TeacherOutputs:
        pooled = ad.mean(_image(batch, self.dims), axis=1)
        z_vi = self.proj(pooled)
        return TeacherOutputs(z_p=self.mlp(z_vi), z_vi=z_vi)


class QuestionTeacher(VqdModel):
    kind = "question"

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        super().__init__(dims)
        self.encoder = QuestionEncoder(dims, rng)
        self.proj = LinearLayer(dims.d_hidden, dims.d_hidden, rng)
        self.mlp = MlpBlock(dims.d_hidden, dims.d_hidden, dims.n_classes, rng)

    def forward(self, batch) -> TeacherOutputs:
        _, final = self.encoder(*_tokens(batch, self.dims))
        z_qi = self.proj(final)
        return TeacherOutputs(z_p=self.mlp(z_qi), z_qi=z_qi)


class AnswerTeacher(VqdModel):
    kind = "answer"

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        super().__init__(dims)
        self.embed = EmbeddingTable(dims.answer_vocab, dims.d_word, rng)
        self.proj = LinearLayer(dims.d_word, dims.d_hidden, rng)
        self.mlp = MlpBlock(dims.d_hidden, dims.d_hidden, dims.n_classes, rng)

    def forward(self, batch) -> TeacherOutputs:
        pooled = ad.mean(self.embed(_answers(batch, self.dims)), axis=1)
        z_ai = self.proj(pooled)
        return TeacherOutputs(z_p=self.mlp(z_ai), z_ai=z_ai)


class BigTeacher(VqdModel):
    """Tri-modal teacher.

    Question and answers attend to each other, the answer-attended question
    attends over image regions, and each attended vector keeps a residual to
    its pooled summary. Per-modality MLPs give the three intermediary
    features, whose sum feeds the classifier MLP.
    """

    kind = "big"

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        super().__init__(dims)
        H = dims.d_hidden
        self.img_proj = LinearLayer(dims.d_img, H, rng)
        self.encoder = QuestionEncoder(dims, rng)
        self.q_proj = LinearLayer(H, H, rng)
        self.a_embed = EmbeddingTable(dims.answer_vocab, dims.d_word, rng)
        self.a_proj = LinearLayer(dims.d_word, H, rng)
        self.att_q2a = TopDownAttention(H, H, H, rng)
        self.att_a2q = TopDownAttention(H, H, H, rng)
        self.att_q2v = TopDownAttention(H, H, H, rng)
        self.mlp_v = MlpBlock(H, H, H, rng)
        self.mlp_q = MlpBlock(H, H, H, rng)
        self.mlp_a = MlpBlock(H, H, H, rng)
        self.classifier = MlpBlock(H, H, dims.n_classes, rng)

    def forward(self, batch) -> TeacherOutputs:
        dims = self.dims
        image = _image(batch, dims)
        tokens, lengths = _tokens(batch, dims)
        answers = _answers(batch, dims)
        if not (image.shape[0] == tokens.shape[0] == answers.shape[0]):
            raise DimensionError(
                f"batch sizes differ: image {image.shape[0]}, tokens {tokens.shape[0]}, answers {answers.shape[0]}"
            )

        V = self.img_proj(image)
        states, final = self.encoder(tokens, lengths)
        H_q = self.q_proj(states)
        q_bar = self.q_proj(final)
        A = self.a_proj(self.a_embed(answers))
        a_bar = ad.mean(A, axis=1)

        q_mask = np.arange(tokens.shape[1])[None, :] < lengths[:, None]
        a_att, _ = self.att_q2a(q_bar, A)
        q_att, _ = self.att_a2q(a_bar, H_q, mask=q_mask)
        q_res = q_att + q_bar
        a_res = a_att + a_bar

        v_att, _ = self.att_q2v(q_res, V)
        v_res = v_att + ad.mean(V, axis=1)

        z_vi = self.mlp_v(v_res)
        z_qi = self.mlp_q(q_res)
        z_ai = self.mlp_a(a_res)
        z_p = self.classifier(z_vi + z_qi + z_ai)
        return TeacherOutputs(z_p=z_p, z_vi=z_vi, z_qi=z_qi, z_ai=z_ai)


class Student(VqdModel):
    """Image + question model: projected features are multiplied, then a
    linear classifier produces the logits."""

    kind = "student"

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        super().__init__(dims)
        H = dims.d_hidden
        self.img_proj = LinearLayer(dims.d_img, H, rng)
        self.encoder = QuestionEncoder(dims, rng)
        self.q_proj = LinearLayer(H, H, rng)
        self.classifier = LinearLayer(H, dims.n_classes, rng)

    def fuse_and_classify(self, z_vi: Tensor, z_qi: Tensor) -> Tensor:
        return self.classifier(z_vi * z_qi)

    def forward(self, batch) -> TeacherOutputs:
        z_vi = self.img_proj(ad.mean(_image(batch, self.dims), axis=1))
        _, final = self.encoder(*_tokens(batch, self.dims))
        z_qi = self.q_proj(final)
        return TeacherOutputs(z_p=self.fuse_and_classify(z_vi, z_qi), z_vi=z_vi, z_qi=z_qi)


_REGISTRY = {
    "visual": VisualTeacher,
    "question": QuestionTeacher,
    "answer": AnswerTeacher,
    "big": BigTeacher,
    "student": Student,
}


def build_model(kind: str, dims: ModelDims, seed: int) -> VqdModel:
    """Construct a freshly initialised model; parameters depend only on (kind, dims, seed)."""
    try:
        cls = _REGISTRY[kind]
    except KeyError:
        raise ContractError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}") from None
    return cls(dims, np.random.default_rng(seed))


def visual_teacher_forward(model: VisualTeacher, batch) -> TeacherOutputs:
    return model.forward(batch)


def question_teacher_forward(model: QuestionTeacher, batch) -> TeacherOutputs:
    return model.forward(batch)


def answer_teacher_forward(model: AnswerTeacher, batch) -> TeacherOutputs:
    return model.forward(batch)


def big_teacher_forward(model: BigTeacher, batch) -> TeacherOutputs:
    return model.forward(batch)


def student_forward(model: Student, batch) -> TeacherOutputs:
    return model.forward(batch)


def predict(z_p) -> np.ndarray:
    """Binary predictions: sigmoid(z) >= 0.5, evaluated as z >= 0 so that the
    boundary is exact (a logit of 0 counts as positive)."""
    z = z_p.data if isinstance(z_p, Tensor) else np.asarray(z_p, dtype=np.float64)
    return (z >= 0).astype(np.int64)
