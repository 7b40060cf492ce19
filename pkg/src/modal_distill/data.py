"""Record files, the synthetic generator, and deterministic padded batching.

Records are line-delimited JSON, one example per line::

    {"id": str, "image_features": [[float]*d_img]*R, "question_tokens": [int>=1, ...],
     "answer_ids": [int]*10, "labels": [0|1]*10}

A sidecar ``manifest.json`` holds the dimensions shared by every split.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CLASS_NAMES = ("LQI", "IVE", "INV", "DFF", "AMB", "SBJ", "SYN", "GRN", "SPM", "OTH")
N_ANSWERS = 10
PAD_ID = 0
RECORD_KEYS = ("id", "image_features", "question_tokens", "answer_ids", "labels")


class SchemaError(ValueError):
    """A record or manifest does not conform to the declared layout."""


class RecordParseError(ValueError):
    """A record line is not valid JSON."""


@dataclass
class VqdExample:
    id: str
    image_features: np.ndarray  # [R x d_img]
    question_tokens: list[int]
    answer_ids: list[int]
    labels: list[int]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "image_features": self.image_features.tolist(),
            "question_tokens": [int(t) for t in self.question_tokens],
            "answer_ids": [int(a) for a in self.answer_ids],
            "labels": [int(y) for y in self.labels],
        }


@dataclass
class DatasetManifest:
    r: int
    d_img: int
    question_vocab: int
    answer_vocab: int
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    n_examples: dict[str, int] = field(default_factory=dict)
    profile: dict | None = None
    seed: int | None = None

    def __post_init__(self):
        if list(self.class_names) != list(CLASS_NAMES):
            raise SchemaError(f"class_names: expected {list(CLASS_NAMES)}, got {self.class_names}")
        for key in ("r", "d_img", "question_vocab", "answer_vocab"):
            val = getattr(self, key)
            if not isinstance(val, int) or isinstance(val, bool) or val < 1:
                raise SchemaError(f"{key}: expected positive int, got {val!r}")
        if self.question_vocab < 2:
            raise SchemaError("question_vocab: must leave room for the pad id 0 and one real token")

    def to_json(self) -> str:
        d = asdict(self)
        if d["profile"] is None:
            del d["profile"]
        if d["seed"] is None:
            del d["seed"]
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        required = {"r", "d_img", "question_vocab", "answer_vocab", "class_names"}
        missing = sorted(required - set(d))
        if missing:
            raise SchemaError(f"manifest missing keys: {missing}")
        n_examples = d.get("n_examples", {})
        if isinstance(n_examples, int):
            n_examples = {"all": n_examples}
        return cls(
            r=d["r"],
            d_img=d["d_img"],
            question_vocab=d["question_vocab"],
            answer_vocab=d["answer_vocab"],
            class_names=list(d["class_names"]),
            n_examples=dict(n_examples),
            profile=d.get("profile"),
            seed=d.get("seed"),
        )


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise RecordParseError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: manifest must be a JSON object")
    return DatasetManifest.from_dict(raw)


def _check_record(rec, manifest: DatasetManifest, where: str) -> VqdExample:
    if not isinstance(rec, dict):
        raise SchemaError(f"{where}: record must be a JSON object")
    missing = [k for k in RECORD_KEYS if k not in rec]
    if missing:
        raise SchemaError(f"{where}: missing field(s) {missing}")
    feats = np.asarray(rec["image_features"], dtype=np.float64) if _is_matrix(rec["image_features"]) else None
    if feats is None or feats.shape != (manifest.r, manifest.d_img):
        got = "ragged" if feats is None else feats.shape
        raise SchemaError(f"{where}: image_features: expected [{manifest.r} x {manifest.d_img}], got {got}")
    toks = rec["question_tokens"]
    if not isinstance(toks, list) or len(toks) < 1:
        raise SchemaError(f"{where}: question_tokens: expected a non-empty list")
    if not all(_is_int(t) and 1 <= t < manifest.question_vocab for t in toks):
        raise SchemaError(f"{where}: question_tokens: ids must lie in [1, {manifest.question_vocab})")
    ans = rec["answer_ids"]
    if not isinstance(ans, list) or len(ans) != N_ANSWERS:
        n = len(ans) if isinstance(ans, list) else "non-list"
        raise SchemaError(f"{where}: answer_ids: expected {N_ANSWERS}, got {n}")
    if not all(_is_int(a) and 0 <= a < manifest.answer_vocab for a in ans):
        raise SchemaError(f"{where}: answer_ids: ids must lie in [0, {manifest.answer_vocab})")
    labels = rec["labels"]
    if not isinstance(labels, list) or len(labels) != len(CLASS_NAMES):
        n = len(labels) if isinstance(labels, list) else "non-list"
        raise SchemaError(f"{where}: labels: expected {len(CLASS_NAMES)}, got {n}")
    if not all(_is_int(y) and y in (0, 1) for y in labels):
        raise SchemaError(f"{where}: labels: values must be 0 or 1")
    if not isinstance(rec["id"], str):
        raise SchemaError(f"{where}: id: expected a string")
    return VqdExample(rec["id"], feats, list(toks), list(ans), list(labels))


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_matrix(x) -> bool:
    return (
        isinstance(x, list)
        and all(isinstance(row, list) for row in x)
        and len({len(row) for row in x}) <= 1
        and all(isinstance(v, (int, float)) and not isinstance(v, bool) for row in x for v in row)
    )


def load_dataset(
    record_paths: str | os.PathLike | Sequence[str | os.PathLike],
    manifest: DatasetManifest | str | os.PathLike,
) -> list[VqdExample]:
    """Read one or more record files (concatenated in the given order)."""
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    if isinstance(record_paths, (str, os.PathLike)):
        record_paths = [record_paths]
    out: list[VqdExample] = []
    for path in record_paths:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise RecordParseError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
                out.append(_check_record(rec, manifest, f"{path}:{lineno}"))
    return out


def write_records(path: str | os.PathLike, examples: Sequence[VqdExample]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), separators=(",", ":")) + "\n")


# -- synthetic generator --------------------------------------------------------


@dataclass
class GeneratorProfile:
    """Knobs of the synthetic world.

    Each signal in [0, 1] sets how strongly that modality is tied to the
    example's positive classes; ``label_noise`` flips observed labels.
    """

    class_priors: tuple[float, ...] = (0.35, 0.4, 0.25, 0.15, 0.5, 0.15, 0.45, 0.5, 0.1, 0.1)
    answer_signal: float = 0.9
    question_signal: float = 0.45
    image_signal: float = 0.35
    label_noise: float = 0.05
    feature_noise: float = 1.5
    question_vocab: int = 64
    answer_vocab: int = 128
    t_min: int = 3
    t_max: int = 8
    r: int = 4
    d_img: int = 16

    def __post_init__(self):
        if len(self.class_priors) != len(CLASS_NAMES):
            raise SchemaError(f"class_priors: expected {len(CLASS_NAMES)} values")
        self.class_priors = tuple(float(p) for p in self.class_priors)
        if not all(0.0 <= p <= 1.0 for p in self.class_priors):
            raise SchemaError("class_priors must lie in [0, 1]")
        for name in ("answer_signal", "question_signal", "image_signal", "label_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SchemaError(f"{name} must lie in [0, 1], got {v}")
        if not 1 <= self.t_min <= self.t_max:
            raise SchemaError("need 1 <= t_min <= t_max")
        n = len(CLASS_NAMES)
        # class-associated ids: two per class, plus a generic pool
        if self.answer_vocab < 2 * n + 1 or self.question_vocab < 2 * n + 2:
            raise SchemaError("vocabularies too small for per-class tokens plus a generic pool")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_priors"] = list(self.class_priors)
        return d


PROFILES = {
    "answer-dominant": GeneratorProfile(),
    "separable": GeneratorProfile(answer_signal=1.0, question_signal=0.0, image_signal=0.0, label_noise=0.0),
    "uninformative": GeneratorProfile(answer_signal=0.0, question_signal=0.0, image_signal=0.0, label_noise=0.0),
}


def _class_pools(vocab: int, offset: int, per_class: int = 2):
    """Split ids [offset, vocab) into per-class blocks and a generic remainder."""
    n = len(CLASS_NAMES)
    per = max(per_class, (vocab - offset) // (2 * n))
    pools = [np.arange(offset + c * per, offset + (c + 1) * per) for c in range(n)]
    generic = np.arange(offset + n * per, vocab)
    return pools, generic


def class_answer_pools(profile: GeneratorProfile):
    return _class_pools(profile.answer_vocab, 0)


def generate_synthetic(
    profile: GeneratorProfile, n: int, seed: int, stream: int = 0
) -> tuple[list[VqdExample], DatasetManifest]:
    """Sample ``n`` examples.

    The world (image prototypes) depends only on ``seed``; ``stream`` selects
    an independent example stream, so train and val share one world.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if profile.answer_signal == profile.question_signal == profile.image_signal == 0.0:
        logger.warning("profile carries no signal in any modality; labels are unlearnable")
    world = np.random.default_rng([seed, 0])
    n_cls = len(CLASS_NAMES)
    prototypes = world.normal(size=(n_cls, profile.r, profile.d_img))
    a_pools, a_generic = class_answer_pools(profile)
    q_pools, q_generic = _class_pools(profile.question_vocab, 1)

    rng = np.random.default_rng([seed, 1 + stream])
    priors = np.asarray(profile.class_priors)
    examples = []
    for i in range(n):
        clean = (rng.random(n_cls) < priors).astype(np.int64)
        pos = np.flatnonzero(clean)

        # signal slots cycle over the positives, so with answer_signal=1 every
        # positive class is voiced at least once
        offset = int(rng.integers(max(len(pos), 1)))
        answers = []
        for slot in range(N_ANSWERS):
            if len(pos) and rng.random() < profile.answer_signal:
                c = pos[(slot + offset) % len(pos)]
                answers.append(int(rng.choice(a_pools[c])))
            else:
                answers.append(int(rng.choice(a_generic)))

        T = int(rng.integers(profile.t_min, profile.t_max + 1))
        tokens = []
        for _ in range(T):
            if len(pos) and rng.random() < profile.question_signal:
                tokens.append(int(rng.choice(q_pools[pos[rng.integers(len(pos))]])))
            else:
                tokens.append(int(rng.choice(q_generic)))

        proto = prototypes[pos].sum(axis=0) if len(pos) else np.zeros((profile.r, profile.d_img))
        noise = rng.normal(size=(profile.r, profile.d_img))
        feats = profile.image_signal * proto + (1.0 - profile.image_signal) * profile.feature_noise * noise

        flips = rng.random(n_cls) < profile.label_noise
        labels = np.where(flips, 1 - clean, clean)
        examples.append(VqdExample(f"s{seed}-{stream}-{i:06d}", feats, tokens, answers, labels.tolist()))

    manifest = DatasetManifest(
        r=profile.r,
        d_img=profile.d_img,
        question_vocab=profile.question_vocab,
        answer_vocab=profile.answer_vocab,
        n_examples={"all": n},
        profile=profile.to_dict(),
        seed=seed,
    )
    return examples, manifest


# -- batching -------------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    image: np.ndarray  # [B x R x d_img]
    tokens: np.ndarray  # [B x T_max], padded with PAD_ID
    lengths: np.ndarray  # [B]
    answers: np.ndarray  # [B x 10]
    labels: np.ndarray  # [B x 10] float

    def __len__(self) -> int:
        return len(self.ids)


def collate(examples: Sequence[VqdExample]) -> Batch:
    lengths = np.array([len(ex.question_tokens) for ex in examples], dtype=np.int64)
    tokens = np.full((len(examples), int(lengths.max())), PAD_ID, dtype=np.int64)
    for row, ex in enumerate(examples):
        tokens[row, : len(ex.question_tokens)] = ex.question_tokens
    return Batch(
        ids=[ex.id for ex in examples],
        image=np.stack([ex.image_features for ex in examples]),
        tokens=tokens,
        lengths=lengths,
        answers=np.array([ex.answer_ids for ex in examples], dtype=np.int64),
        labels=np.array([ex.labels for ex in examples], dtype=np.float64),
    )


def batch_iter(
    dataset: Sequence[VqdExample], batch_size: int, seed: int | None = None, epoch: int = 0
) -> Iterator[Batch]:
    """Yield padded batches; order is a permutation drawn from (seed, epoch).

    ``seed=None`` keeps file order (used for evaluation).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if seed is None else np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield collate([dataset[i] for i in order[start : start + batch_size]])


def write_split_dir(out_dir: str | os.PathLike, splits: dict[str, list[VqdExample]], manifest: DatasetManifest) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, examples in splits.items():
        path = out / f"{name}.jsonl"
        write_records(path, examples)
        written.append(path)
    manifest.n_examples = {name: len(ex) for name, ex in splits.items()}
    mpath = out / "manifest.json"
    mpath.write_text(manifest.to_json())
    written.append(mpath)
    return written
