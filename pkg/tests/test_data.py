import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modal_distill.data import (
    CLASS_NAMES,
    PAD_ID,
    PROFILES,
    DatasetManifest,
    GeneratorProfile,
    RecordParseError,
    SchemaError,
    batch_iter,
    class_answer_pools,
    collate,
    generate_synthetic,
    load_dataset,
    read_manifest,
    write_records,
    write_split_dir,
)
from modal_distill.metrics import average_precision
from modal_distill.models import build_model

MANIFEST = DatasetManifest(r=2, d_img=3, question_vocab=10, answer_vocab=20)


def record(**over):
    rec = {
        "id": "x0",
        "image_features": [[0.1, 0.2, 0.3], [0.0, -1.0, 2.5]],
        "question_tokens": [1, 4, 9],
        "answer_ids": list(range(10)),
        "labels": [1, 0, 0, 1, 0, 0, 0, 0, 0, 1],
    }
    rec.update(over)
    return rec


def write_lines(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    return path


def examples_equal(a, b):
    return (
        a.id == b.id
        and np.array_equal(a.image_features, b.image_features)
        and list(a.question_tokens) == list(b.question_tokens)
        and list(a.answer_ids) == list(b.answer_ids)
        and list(a.labels) == list(b.labels)
    )


class TestLoad:
    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert load_dataset(tmp_path / "e.jsonl", MANIFEST) == []

    def test_nine_answers(self, tmp_path):
        p = write_lines(tmp_path / "r.jsonl", [record(answer_ids=list(range(9)))])
        with pytest.raises(SchemaError, match="answer_ids: expected 10"):
            load_dataset(p, MANIFEST)

    def test_wrong_label_count(self, tmp_path):
        p = write_lines(tmp_path / "r.jsonl", [record(labels=[0] * 11)])
        with pytest.raises(SchemaError, match="labels"):
            load_dataset(p, MANIFEST)

    def test_non_binary_label(self, tmp_path):
        p = write_lines(tmp_path / "r.jsonl", [record(labels=[2] + [0] * 9)])
        with pytest.raises(SchemaError, match="labels"):
            load_dataset(p, MANIFEST)

    def test_dim_mismatch_names_field(self, tmp_path):
        p = write_lines(tmp_path / "r.jsonl", [record(image_features=[[0.0, 0.0]] * 2)])
        with pytest.raises(SchemaError, match="image_features"):
            load_dataset(p, MANIFEST)

    def test_pad_id_rejected_in_question(self, tmp_path):
        p = write_lines(tmp_path / "r.jsonl", [record(question_tokens=[3, PAD_ID])])
        with pytest.raises(SchemaError, match="question_tokens"):
            load_dataset(p, MANIFEST)

    def test_vocab_bounds(self, tmp_path):
        p = write_lines(tmp_path / "r.jsonl", [record(answer_ids=[20] + [0] * 9)])
        with pytest.raises(SchemaError, match="answer_ids"):
            load_dataset(p, MANIFEST)

    def test_missing_key(self, tmp_path):
        rec = record()
        del rec["answer_ids"]
        with pytest.raises(SchemaError, match="answer_ids"):
            load_dataset(write_lines(tmp_path / "r.jsonl", [rec]), MANIFEST)

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "r.jsonl"
        p.write_text(json.dumps(record()) + "\n{not json\n")
        with pytest.raises(RecordParseError, match="2"):
            load_dataset(p, MANIFEST)

    def test_order_preserved_and_concatenated(self, tmp_path):
        a = write_lines(tmp_path / "a.jsonl", [record(id="a1"), record(id="a2")])
        b = write_lines(tmp_path / "b.jsonl", [record(id="b1")])
        assert [ex.id for ex in load_dataset([a, b], MANIFEST)] == ["a1", "a2", "b1"]

    def test_round_trip(self, tmp_path):
        prof = PROFILES["answer-dominant"]
        exs, manifest = generate_synthetic(prof, 30, seed=5)
        write_records(tmp_path / "s.jsonl", exs)
        back = load_dataset(tmp_path / "s.jsonl", manifest)
        assert len(back) == 30 and all(examples_equal(x, y) for x, y in zip(exs, back))


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = DatasetManifest(r=4, d_img=16, question_vocab=64, answer_vocab=128, n_examples={"train": 3}, seed=7)
        (tmp_path / "m.json").write_text(m.to_json())
        assert read_manifest(tmp_path / "m.json") == m

    def test_class_names_fixed(self):
        with pytest.raises(SchemaError):
            DatasetManifest(r=4, d_img=16, question_vocab=64, answer_vocab=128, class_names=list(reversed(CLASS_NAMES)))

    def test_missing_keys(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"r": 4}))
        with pytest.raises(SchemaError, match="missing"):
            read_manifest(tmp_path / "m.json")


class TestGenerator:
    def test_deterministic_bytes(self, tmp_path):
        prof = PROFILES["answer-dominant"]
        for sub in ("a", "b"):
            exs, m = generate_synthetic(prof, 50, seed=3)
            write_split_dir(tmp_path / sub, {"train": exs}, m)
        for name in ("train.jsonl", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_data(self):
        prof = PROFILES["answer-dominant"]
        a, _ = generate_synthetic(prof, 5, seed=1)
        b, _ = generate_synthetic(prof, 5, seed=2)
        assert not np.array_equal(a[0].image_features, b[0].image_features)

    def test_records_valid(self, tmp_path):
        exs, m = generate_synthetic(PROFILES["answer-dominant"], 100, seed=0)
        write_records(tmp_path / "r.jsonl", exs)
        assert len(load_dataset(tmp_path / "r.jsonl", m)) == 100

    def test_separable_lookup_oracle(self):
        prof = PROFILES["separable"]
        exs, _ = generate_synthetic(prof, 500, seed=4)
        pools, _ = class_answer_pools(prof)
        owner = {int(a): c for c, pool in enumerate(pools) for a in pool}
        scores = np.zeros((len(exs), 10))
        for i, ex in enumerate(exs):
            for a in ex.answer_ids:
                if a in owner:
                    scores[i, owner[a]] += 1
        labels = np.array([ex.labels for ex in exs])
        for c in range(10):
            if labels[:, c].any():
                assert average_precision(scores[:, c], labels[:, c]) == 1.0

    def test_zero_priors(self):
        prof = GeneratorProfile(class_priors=(0.0,) * 10, label_noise=0.0)
        exs, m = generate_synthetic(prof, 40, seed=0)
        assert not np.array([ex.labels for ex in exs]).any()
        assert all(len(ex.answer_ids) == 10 and len(ex.question_tokens) >= 1 for ex in exs)

    def test_degenerate_profile_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            exs, _ = generate_synthetic(PROFILES["uninformative"], 3, seed=0)
        assert len(exs) == 3
        assert "signal" in caplog.text

    def test_priors_within_3_sigma(self):
        prof = GeneratorProfile(label_noise=0.0)
        exs, _ = generate_synthetic(prof, 10_000, seed=8)
        freq = np.array([ex.labels for ex in exs]).mean(axis=0)
        p = np.array(prof.class_priors)
        sigma = np.sqrt(p * (1 - p) / 10_000)
        assert np.all(np.abs(freq - p) <= 3 * sigma + 1e-12)

    def test_default_ordering_of_signals(self):
        p = PROFILES["answer-dominant"]
        assert p.answer_signal > p.question_signal >= p.image_signal

    def test_rejects_n_zero(self):
        with pytest.raises(ValueError):
            generate_synthetic(PROFILES["answer-dominant"], 0, seed=0)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(PROFILES["answer-dominant"], 23, seed=2)[0]


class TestBatching:
    def test_single_batch(self, data):
        batches = list(batch_iter(data, 100, seed=0))
        assert len(batches) == 1 and len(batches[0]) == 23

    def test_same_seed_epoch_same_order(self, data):
        ids = lambda s, e: [i for b in batch_iter(data, 5, seed=s, epoch=e) for i in b.ids]
        assert ids(1, 0) == ids(1, 0)
        assert ids(1, 0) != ids(1, 1)
        assert ids(1, 0) != ids(2, 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 1000), st.integers(0, 50))
    def test_epoch_is_partition(self, data, bs, seed, epoch):
        ids = [i for b in batch_iter(data, bs, seed=seed, epoch=epoch) for i in b.ids]
        assert sorted(ids) == sorted(ex.id for ex in data)

    def test_labels_binary_and_padding(self, data):
        for b in batch_iter(data, 7, seed=0):
            assert set(np.unique(b.labels)) <= {0.0, 1.0}
            for row, L in enumerate(b.lengths):
                assert (b.tokens[row, L:] == PAD_ID).all()
                assert (b.tokens[row, :L] != PAD_ID).all()

    def test_no_seed_keeps_file_order(self, data):
        assert [i for b in batch_iter(data, 4) for i in b.ids] == [ex.id for ex in data]

    def test_padding_gru_oracle(self, data, small_dims):
        m = build_model("question", small_dims, 0)
        padded = m(collate(data[:8])).z_qi.data
        for i, ex in enumerate(data[:8]):
            alone = m(collate([ex])).z_qi.data[0]
            np.testing.assert_allclose(padded[i], alone, rtol=0, atol=1e-14)
