from fractions import Fraction

import numpy as np
import pytest

from modal_distill import autodiff as ad
from modal_distill.data import PROFILES, collate, generate_synthetic
from modal_distill.models import ModelDims

FD_STEP = 1e-5


def numeric_grad(f, tensor):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``tensor``."""
    g = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + FD_STEP
        up = f()
        flat[i] = old - FD_STEP
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * FD_STEP)
    return g


def rel_err(a, b, floor=1e-6):
    """Norm-wise relative error. ``floor`` keeps gradients that are exactly zero
    in theory (and ~1e-12 FD round-off in practice) from reading as 100% error."""
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_grads(loss_fn, params, tol=1e-4):
    """Compare autodiff to finite differences for each named param; returns worst error."""
    for p in params.values():
        p.zero_grad()
    ad.backward(loss_fn())
    analytic = {k: p.grad.copy() for k, p in params.items()}

    def scalar():
        with ad.no_grad():
            return loss_fn().item()

    worst = 0.0
    for name, p in params.items():
        err = rel_err(analytic[name], numeric_grad(scalar, p))
        assert err < tol, f"{name}: relative error {err:.3g}"
        worst = max(worst, err)
    return worst


def ap_oracle(scores, labels, exact=False):
    """Walk every prefix of the ranking (score desc, index asc) and average
    precision at each positive. ``exact`` uses rationals throughout."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(int(y) for y in labels)
    if n_pos == 0:
        return None
    total = Fraction(0) if exact else 0.0
    hits = 0
    for k, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            total += Fraction(hits, k) if exact else hits / k
    return total / n_pos


TINY_DIMS = ModelDims(d_img=3, n_regions=3, d_word=4, d_hidden=8, question_vocab=6, answer_vocab=7)


def tiny_batch(rng, dims=TINY_DIMS, batch=2, T=4, ragged=True):
    class B:
        pass

    b = B()
    b.image = rng.uniform(-1, 1, size=(batch, dims.n_regions, dims.d_img))
    b.tokens = rng.integers(1, dims.question_vocab, size=(batch, T))
    b.lengths = np.full(batch, T)
    if ragged and batch > 1:
        b.lengths[-1] = max(1, T - 2)
        b.tokens[-1, b.lengths[-1] :] = 0
    b.answers = rng.integers(0, dims.answer_vocab, size=(batch, 10))
    b.labels = (rng.random((batch, 10)) < 0.5).astype(float)
    return b


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_split():
    prof = PROFILES["answer-dominant"]
    train, manifest = generate_synthetic(prof, 200, seed=11, stream=0)
    val, _ = generate_synthetic(prof, 80, seed=11, stream=1)
    return train, val, manifest


@pytest.fixture(scope="session")
def small_dims(small_split):
    _, _, m = small_split
    return ModelDims(d_img=m.d_img, n_regions=m.r, d_word=8, d_hidden=16, question_vocab=m.question_vocab, answer_vocab=m.answer_vocab)


@pytest.fixture
def small_batch(small_split):
    return collate(small_split[0][:5])


# filled by test_acceptance; printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
