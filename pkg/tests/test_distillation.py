import itertools
from dataclasses import replace

import numpy as np
import pytest

from modal_distill import autodiff as ad
from modal_distill.autodiff import ContractError, Tensor
from modal_distill.distillation import (
    LOSS_IDS,
    LOSS_TABLE,
    TEACHER_KINDS,
    ConfigError,
    DistillConfig,
    LossBreakdown,
    LossWeights,
    NumericError,
    compute_distill_losses,
    params_equal,
    pretrain_teacher,
    total_loss,
    train_plain,
    train_student,
)
from modal_distill.checkpoint import Checkpoint
from modal_distill.data import PROFILES, generate_synthetic
from modal_distill.models import ModelDims, TeacherOutputs, build_model

from conftest import TINY_DIMS, tiny_batch

# expected active ids, written out by hand per teacher
BY_TEACHER = {
    "visual": ({"l25"}, {"l21"}),
    "question": ({"l26"}, {"l22"}),
    "big": ({"l27"}, {"l23", "l24"}),
    "answer": ({"l2a"}, set()),
}


def expected_ids(teachers, with_i):
    out = set()
    for t in teachers:
        pred, inter = BY_TEACHER[t]
        out |= pred | (inter if with_i else set())
    return out


def random_outputs(rng, B=3, H=5, fields=("z_p", "z_vi", "z_qi", "z_ai")):
    shapes = {"z_p": (B, 10), "z_vi": (B, H), "z_qi": (B, H), "z_ai": (B, H)}
    return TeacherOutputs(**{f: Tensor(rng.normal(size=shapes[f]), requires_grad=True) for f in fields})


def teacher_outputs(rng):
    return {
        "visual": random_outputs(rng, fields=("z_p", "z_vi")),
        "question": random_outputs(rng, fields=("z_p", "z_qi")),
        "answer": random_outputs(rng, fields=("z_p", "z_ai")),
        "big": random_outputs(rng),
    }


class TestConfig:
    def test_named_examples(self):
        cfg = DistillConfig(frozenset({"big", "visual", "question"}), with_intermediate=True)
        assert set(cfg.active_losses()) == {f"l2{i}" for i in range(1, 8)}
        assert set(DistillConfig(frozenset({"big"}), True).active_losses()) == {"l23", "l24", "l27"}
        assert DistillConfig().active_losses() == []

    def test_labels(self):
        assert DistillConfig().label == "Baseline"
        assert DistillConfig(frozenset({"question", "big", "visual"}), True).label == "Big&V&Q (w/I)"
        assert DistillConfig(frozenset({"answer"})).label == "A"

    def test_unknown_teacher(self):
        with pytest.raises(ConfigError):
            DistillConfig(frozenset({"audio"}))

    def test_weights_validation(self):
        with pytest.raises(ContractError):
            LossWeights(lambda3=-1.0)
        with pytest.raises(ContractError):
            LossWeights(lambda0=float("nan"))

    def test_weight_lookup(self):
        w = LossWeights(*[float(i) for i in range(8)], lambda_answer=9.0)
        assert [w.for_loss(i) for i in ("bce",) + LOSS_IDS] == [0, 1, 2, 3, 4, 5, 6, 7, 9]


@pytest.mark.parametrize("with_i", [False, True])
@pytest.mark.parametrize("r", range(5))
def test_mapping(with_i, r):
    rng = np.random.default_rng(r)
    for teachers in itertools.combinations(TEACHER_KINDS, r):
        cfg = DistillConfig(frozenset(teachers), with_i)
        br = compute_distill_losses(random_outputs(rng, fields=("z_p", "z_vi", "z_qi")), teacher_outputs(rng), cfg)
        nonzero = {lid for lid in LOSS_IDS if br.value(lid) != 0.0}
        assert nonzero == expected_ids(teachers, with_i)


def test_missing_teacher_feature_names_loss():
    rng = np.random.default_rng(0)
    cfg = DistillConfig(frozenset({"visual"}), True)
    with pytest.raises(ContractError, match="l21"):
        compute_distill_losses(
            random_outputs(rng, fields=("z_p", "z_vi", "z_qi")),
            {"visual": random_outputs(rng, fields=("z_p",))},
            cfg,
        )


def test_total_matches_weighted_sum():
    rng = np.random.default_rng(1)
    s = random_outputs(rng, fields=("z_p", "z_vi", "z_qi"))
    t = teacher_outputs(rng)
    labels = (rng.random((3, 10)) < 0.5).astype(float)
    w = LossWeights(*rng.uniform(0, 2, 8), lambda_answer=0.3)
    cfg = DistillConfig(frozenset(TEACHER_KINDS), True, w)
    br = compute_distill_losses(s, t, cfg, labels)
    z = s.z_p.data
    bce = np.mean(np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z))))
    ref = w.lambda0 * bce
    for lid in LOSS_IDS:
        teacher, tf, sf, _ = LOSS_TABLE[lid]
        d = getattr(s, sf).data - getattr(t[teacher], tf).data
        ref += w.for_loss(lid) * (d**2).sum() / 3
    assert abs(br.total - ref) <= 1e-12
    assert abs(total_loss(br).item() - br.total) <= 1e-12


def test_teacher_gets_no_gradient():
    rng = np.random.default_rng(2)
    s, t = random_outputs(rng, fields=("z_p", "z_vi", "z_qi")), teacher_outputs(rng)
    cfg = DistillConfig(frozenset(TEACHER_KINDS), True)
    labels = np.zeros((3, 10))
    ad.backward(total_loss(compute_distill_losses(s, t, cfg, labels)))
    for out in t.values():
        for f in ("z_p", "z_vi", "z_qi", "z_ai"):
            g = getattr(out, f)
            assert g is None or g.grad is None or not g.grad.any()
    assert s.z_vi.grad.any() and s.z_qi.grad.any()


def test_zero_weight_terms_contribute_no_gradient():
    rng = np.random.default_rng(3)
    s, t = random_outputs(rng, fields=("z_p", "z_vi", "z_qi")), teacher_outputs(rng)
    w = LossWeights(**{f"lambda{i}": 0.0 for i in range(1, 8)}, lambda_answer=0.0)
    br = compute_distill_losses(s, t, DistillConfig(frozenset(TEACHER_KINDS), True, w), np.ones((3, 10)))
    ad.backward(total_loss(br))
    assert not s.z_vi.grad.any() and not s.z_qi.grad.any()


def test_bce_only_when_no_bce_term():
    rng = np.random.default_rng(4)
    s = random_outputs(rng, fields=("z_p", "z_vi", "z_qi"))
    br = compute_distill_losses(s, {}, DistillConfig())
    with pytest.raises(ContractError):
        total_loss(br)
    assert total_loss(br, np.zeros((3, 10)), s.z_p).item() > 0


class TestTraining:
    def cfg(self, **kw):
        base = dict(epochs=2, teacher_epochs=2, batch_size=16, seed=3)
        base.update(kw)
        return DistillConfig(**base)

    def test_teachers_frozen_and_unchanged(self, small_split, small_dims):
        train, _, _ = small_split
        cfg = self.cfg(teacher_set=frozenset({"big", "visual"}), with_intermediate=True)
        teachers = {k: pretrain_teacher(k, train[:64], small_dims, cfg)[0] for k in ("big", "visual")}
        before = {k: m.state_dict() for k, m in teachers.items()}
        student, hist = train_student(train[:64], teachers, cfg, small_dims)
        for k, m in teachers.items():
            after = m.state_dict()
            assert all(np.array_equal(before[k][n], after[n]) for n in after)
            assert not any(p.requires_grad for p in m.parameters())
        assert len(hist) == 2 and {"bce", "l21", "l23", "l27", "total", "lr", "epoch"} <= set(hist[0])
        assert hist[0]["l26"] == 0.0

    def test_loss_decreases(self, small_split, small_dims):
        train, _, _ = small_split
        model = build_model("answer", small_dims, 0)
        hist = train_plain(model, train, 4, self.cfg())
        assert hist[-1]["bce"] < hist[0]["bce"]

    def test_deterministic(self, small_split, small_dims):
        train, _, _ = small_split
        cfg = self.cfg()
        a, ha = train_student(train[:64], {}, cfg, small_dims)
        b, hb = train_student(train[:64], {}, cfg, small_dims)
        assert params_equal(a, b) and ha == hb

    def test_zero_epochs_is_init(self, small_split, small_dims):
        train, _, _ = small_split
        model, hist = pretrain_teacher("question", train, small_dims, self.cfg(teacher_epochs=0))
        assert hist == [] and params_equal(model, build_model("question", small_dims, 3))

    def test_missing_teacher(self, small_split, small_dims):
        with pytest.raises(ConfigError):
            train_student(small_split[0][:8], {}, self.cfg(teacher_set=frozenset({"big"})), small_dims)

    def test_nan_raises_numeric_error(self, small_split, small_dims):
        train, _, _ = small_split
        model = build_model("visual", small_dims, 0)
        with np.errstate(all="ignore"):
            with pytest.raises(NumericError):
                train_plain(model, train[:32], 3, self.cfg(lr=1e300))

    def test_lr_schedule_logged(self, small_split, small_dims):
        train, _, _ = small_split
        hist = train_plain(build_model("visual", small_dims, 0), train[:16], 3, self.cfg(step_epochs=[1]))
        assert hist[0]["lr"] == 1e-2
        assert hist[1]["lr"] == pytest.approx(1e-3) and hist[2]["lr"] == pytest.approx(1e-3)

    def test_probe_catches_width_mismatch(self, small_split, small_dims):
        train, _, _ = small_split
        other = replace(small_dims, d_hidden=small_dims.d_hidden + 1)
        teacher = build_model("visual", other, 0)
        cfg = self.cfg(teacher_set=frozenset({"visual"}), with_intermediate=True)
        with pytest.raises(ValueError):
            train_student(train[:8], {"visual": teacher}, cfg, small_dims)


def test_breakdown_attribute_access():
    rng = np.random.default_rng(5)
    s, t = random_outputs(rng, fields=("z_p", "z_vi", "z_qi")), teacher_outputs(rng)
    br = compute_distill_losses(s, t, DistillConfig(frozenset({"big"})), np.ones((3, 10)))
    assert br.l27 > 0 and br.l21 == 0.0 and br.bce > 0
    with pytest.raises(AttributeError):
        br.l99


class TestObjectiveExamples:
    def test_matching_outputs_leave_only_bce(self):
        rng = np.random.default_rng(6)
        t = teacher_outputs(rng)
        big = t["big"]
        s = TeacherOutputs(z_p=Tensor(big.z_p.data.copy()), z_vi=Tensor(big.z_vi.data.copy()), z_qi=Tensor(big.z_qi.data.copy()))
        labels = np.ones((3, 10))
        br = compute_distill_losses(s, {"big": big}, DistillConfig(frozenset({"big"}), True, LossWeights(lambda0=0.5)), labels)
        assert br.l23 == br.l24 == br.l27 == 0.0
        assert br.total == 0.5 * br.bce

    def test_hand_total(self):
        terms = {"bce": Tensor(0.7)} | {f"l2{i}": Tensor(0.5) for i in range(1, 8)}
        assert LossBreakdown(terms, LossWeights()).total == pytest.approx(4.2, abs=1e-12)

    def test_lambda0_zero_classifier_grad_from_prediction_terms(self, rng):
        batch = tiny_batch(rng)
        student = build_model("student", TINY_DIMS, 0)
        with ad.no_grad():
            outs = {k: build_model(k, TINY_DIMS, i + 1)(batch) for i, k in enumerate(("big", "visual", "question"))}

        def classifier_grad(weights, with_i):
            student.zero_grad()
            cfg = DistillConfig(frozenset(outs), with_i, weights)
            ad.backward(total_loss(compute_distill_losses(student(batch), outs, cfg, batch.labels)))
            return student.classifier.weight.grad.copy()

        w = LossWeights(lambda0=0.0)
        np.testing.assert_allclose(classifier_grad(w, True), classifier_grad(w, False), rtol=1e-12, atol=1e-15)
        only_inter = LossWeights(lambda0=0.0, lambda5=0.0, lambda6=0.0, lambda7=0.0)
        assert not classifier_grad(only_inter, True).any()

    def test_doubling_lambdas_doubles_everything(self, rng):
        batch = tiny_batch(rng)
        student = build_model("student", TINY_DIMS, 0)
        with ad.no_grad():
            outs = {k: build_model(k, TINY_DIMS, i + 1)(batch) for i, k in enumerate(TEACHER_KINDS)}
        base = LossWeights(*rng.uniform(0.1, 2, 8), lambda_answer=0.7)
        doubled = LossWeights(**{k: 2 * v for k, v in vars(base).items()})

        def run(weights):
            student.zero_grad()
            cfg = DistillConfig(frozenset(TEACHER_KINDS), True, weights)
            loss = total_loss(compute_distill_losses(student(batch), outs, cfg, batch.labels))
            ad.backward(loss)
            return loss.item(), {k: p.grad.copy() for k, p in student.named_parameters().items()}

        l1, g1 = run(base)
        l2, g2 = run(doubled)
        assert abs(l2 - 2 * l1) <= 1e-12 * max(1.0, abs(l1))
        for k in g1:
            np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


def test_teacher_bce_trend_over_seeds():
    rises = 0
    for seed in range(5):
        train, m = generate_synthetic(PROFILES["answer-dominant"], 500, seed)
        dims = ModelDims(d_img=m.d_img, n_regions=m.r, d_word=8, d_hidden=16, question_vocab=m.question_vocab, answer_vocab=m.answer_vocab)
        _, hist = pretrain_teacher("answer", train, dims, DistillConfig(seed=seed))
        rises += hist[-1]["bce"] >= hist[0]["bce"]
    assert rises <= 1


def test_pretrain_same_seed_bitwise(small_split, small_dims):
    cfg = DistillConfig(teacher_epochs=2, seed=9)
    a, _ = pretrain_teacher("big", small_split[0][:64], small_dims, cfg)
    b, _ = pretrain_teacher("big", small_split[0][:64], small_dims, cfg)
    assert Checkpoint.from_model(a, 9, 2).to_bytes() == Checkpoint.from_model(b, 9, 2).to_bytes()


def test_empty_teacher_set_matches_plain_training(small_split, small_dims):
    cfg = DistillConfig(epochs=2, batch_size=16, seed=4)
    distilled, _ = train_student(small_split[0][:80], {}, cfg, small_dims)
    plain = build_model("student", small_dims, 4)
    train_plain(plain, small_split[0][:80], 2, cfg)
    assert params_equal(distilled, plain)
