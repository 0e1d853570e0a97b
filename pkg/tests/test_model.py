import math

import numpy as np
import pytest

from oim.model import (
    EPS,
    LossConfig,
    MidModel,
    dumps_checkpoint,
    image_classification_loss,
    loads_checkpoint,
    mid_forward,
    mid_loss_and_grad,
    oir_weight,
    refine_forward,
    refinement_loss,
    refinement_loss_grad,
    softmax,
)
from oim.types import PseudoLabels


def labels_of(classes, weights=None, core=None):
    n = len(classes)
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    core = np.zeros(n, dtype=bool) if core is None else np.asarray(core, dtype=bool)
    return PseudoLabels(np.asarray(classes), weights, core, np.full(n, -1))


def unweighted_loss(probs, pl):
    """Unweighted refinement loss written as the literal double sum over proposals and classes."""
    n, k = probs.shape
    total = 0.0
    for j in range(n):
        for c in range(k):
            y = 1.0 if pl.labels[j] == c else 0.0
            if y:
                total += pl.weights[j] * y * math.log(max(probs[j, c], EPS))
    return -total / n


def unweighted_grad(logits, pl):
    """Gradient of the unweighted loss: w_j / N * (softmax - onehot)."""
    p = softmax(logits, axis=1)
    n = p.shape[0]
    g = np.zeros_like(p)
    for j in range(n):
        for c in range(p.shape[1]):
            g[j, c] = pl.weights[j] / n * (p[j, c] - (1.0 if pl.labels[j] == c else 0.0))
    return g


def random_fixture(rng, n=7, c=3):
    logits = rng.normal(0.0, 1.5, size=(n, c + 1))
    classes = rng.integers(0, c + 1, n)
    weights = rng.uniform(0.05, 1.0, n)
    core = rng.random(n) < 0.3
    return logits, labels_of(classes, weights, core)


def random_model(rng, d=5, c=3, k=3, scale=0.5):
    m = MidModel.initialize(d, c, k, seed=int(rng.integers(1 << 30)), scale=scale)
    m.cls_b[:] = rng.normal(size=c) * scale
    m.det_b[:] = rng.normal(size=c) * scale
    return m


class TestMidForward:
    def test_single_proposal_collapses(self):
        rng = np.random.default_rng(0)
        m = random_model(rng)
        x = rng.normal(size=(1, 5))
        p, s = mid_forward(m, x)
        np.testing.assert_allclose(s, softmax(x @ m.cls_w + m.cls_b, axis=1)[0], rtol=1e-12)

    def test_zero_logits(self):
        m = MidModel.initialize(4, 2, 1, scale=0.0)
        p, s = mid_forward(m, np.zeros((2, 4)))
        np.testing.assert_allclose(p, 0.25)
        np.testing.assert_allclose(s, [0.5, 0.5])

    def test_image_scores_are_column_sums(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = random_model(rng)
            x = rng.normal(size=(9, 5))
            p, s = mid_forward(m, x)
            sums = [math.fsum(p[:, c]) for c in range(p.shape[1])]
            np.testing.assert_allclose(s, np.clip(sums, EPS, 1 - EPS), rtol=0, atol=1e-12)
            assert np.all((s > 0) & (s < 1))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        m = random_model(rng)
        x = rng.normal(size=(8, 5))
        perm = rng.permutation(8)
        p, s = mid_forward(m, x)
        pp, sp = mid_forward(m, x[perm])
        np.testing.assert_allclose(pp, p[perm], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(sp, s, rtol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        m = random_model(rng, d=4, c=3)
        x = rng.normal(size=(6, 4))
        y = np.array([1, 0, 1])
        _, _, grads = mid_loss_and_grad(m, x, y)
        h = 1e-6
        for (name, arr), g in zip(m.parameters()[:4], grads):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = mid_loss_and_grad(m, x, y)[0]
                arr[idx] = orig - h
                down = mid_loss_and_grad(m, x, y)[0]
                arr[idx] = orig
                num[idx] = (up - down) / (2 * h)
            np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-8, err_msg=name)


class TestRefineForward:
    def test_uniform(self):
        m = MidModel.initialize(3, 4, 2, scale=0.0)
        np.testing.assert_allclose(refine_forward(m, 1, np.ones((2, 3))), 0.2)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        m = random_model(rng, scale=3.0)
        probs = refine_forward(m, 2, rng.normal(size=(10, 5)) * 4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_logit_monotone(self):
        z = np.array([[0.3, -0.2, 1.0]])
        base = softmax(z, axis=1)[0, 1]
        for step in (1e-6, 1e-3, 1.0):
            bumped = z.copy()
            bumped[0, 1] += step
            assert softmax(bumped, axis=1)[0, 1] > base

    def test_head_range(self):
        m = MidModel.initialize(3, 2, 2)
        with pytest.raises(ValueError):
            refine_forward(m, 3, np.ones((1, 3)))


class TestImageLoss:
    def test_perfect(self):
        assert image_classification_loss(np.array([1 - EPS, EPS]), np.array([1, 0])) < 1e-6

    def test_half(self):
        assert image_classification_loss(np.array([0.5, 0.5]), np.array([1, 0])) == pytest.approx(2 * math.log(2), rel=1e-15)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            s = rng.uniform(EPS, 1 - EPS, 4)
            assert image_classification_loss(s, rng.integers(0, 2, 4)) >= 0


class TestOirWeight:
    def test_default_beta_values(self):
        cfg = LossConfig(beta=0.2)
        assert oir_weight(False, cfg) == 0.2 and 1 + oir_weight(False, cfg) == 1.2
        assert oir_weight(True, cfg) == pytest.approx(-0.8) and 1 + oir_weight(True, cfg) == pytest.approx(0.2)

    def test_beta_zero(self):
        cfg = LossConfig(beta=0.0)
        assert 1 + oir_weight(False, cfg) == 1.0 and 1 + oir_weight(True, cfg) == 0.0

    def test_disabled(self):
        cfg = LossConfig(enable_reweighting=False)
        assert oir_weight(True, cfg) == 0.0 == oir_weight(False, cfg)

    def test_beta_range(self):
        with pytest.raises(ValueError):
            LossConfig(beta=1.0)


class TestRefinementLoss:
    def test_saturated_core(self):
        probs = np.array([[EPS, 1 - EPS]])
        loss = refinement_loss(probs, labels_of([1], core=[True]), LossConfig())
        assert 0 <= loss < 1e-7

    def test_half_probability_core(self):
        probs = np.array([[0.5, 0.5]])
        loss = refinement_loss(probs, labels_of([1], [1.0], [True]), LossConfig(beta=0.2))
        assert loss == pytest.approx(0.2 * math.log(2), rel=1e-12)

    def test_unweighted_matches_literal_sum(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            logits, pl = random_fixture(rng)
            probs = softmax(logits, axis=1)
            got = refinement_loss(probs, pl, LossConfig(enable_reweighting=False))
            assert got == pytest.approx(unweighted_loss(probs, pl), rel=1e-12)

    def test_beta_zero_drops_core_terms(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            logits, pl = random_fixture(rng)
            probs = softmax(logits, axis=1)
            non_core = PseudoLabels(pl.labels, np.where(pl.is_core, 0.0, pl.weights), pl.is_core, pl.owner)
            assert refinement_loss(probs, pl, LossConfig(beta=0.0)) == pytest.approx(
                unweighted_loss(probs, non_core), rel=1e-12, abs=1e-15
            )

    def test_nonnegative_and_zero_iff_saturated(self):
        rng = np.random.default_rng(8)
        logits, pl = random_fixture(rng)
        assert refinement_loss(softmax(logits, axis=1), pl, LossConfig()) > 0
        onehot = np.zeros_like(logits)
        onehot[np.arange(len(pl)), pl.labels] = 1.0
        assert refinement_loss(onehot, pl, LossConfig()) == 0.0


class TestRefinementGrad:
    def test_finite_differences(self):
        rng = np.random.default_rng(9)
        cfg = LossConfig(beta=0.2)
        h = 1e-6
        for _ in range(50):
            logits, pl = random_fixture(rng)
            g = refinement_loss_grad(logits, pl, cfg)
            num = np.zeros_like(logits)
            for idx in np.ndindex(logits.shape):
                up, down = logits.copy(), logits.copy()
                up[idx] += h
                down[idx] -= h
                num[idx] = (
                    refinement_loss(softmax(up, axis=1), pl, cfg) - refinement_loss(softmax(down, axis=1), pl, cfg)
                ) / (2 * h)
            np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)

    def test_scaling_identity(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            logits, pl = random_fixture(rng)
            g_weighted = refinement_loss_grad(logits, pl, LossConfig(beta=0.2))
            g_plain = unweighted_grad(logits, pl)
            for j in range(len(pl)):
                factor = 0.2 if pl.is_core[j] else 1.2
                np.testing.assert_allclose(g_weighted[j], factor * g_plain[j], rtol=1e-12, atol=1e-300)

    def test_saturated_background_row_is_zero(self):
        logits = np.array([[800.0, 0.0, 0.0], [0.1, 0.2, 0.3]])
        g = refinement_loss_grad(logits, labels_of([0, 2]), LossConfig())
        assert np.all(g[0] == 0.0)


class TestCheckpoint:
    def test_round_trip_bit_identical(self):
        rng = np.random.default_rng(11)
        m = random_model(rng, d=6, c=3, k=4)
        text = dumps_checkpoint(m)
        back = loads_checkpoint(text)
        for (n1, a), (n2, b) in zip(m.parameters(), back.parameters()):
            assert n1 == n2 and a.tobytes() == b.tobytes()
        assert dumps_checkpoint(back) == text

    def test_header(self):
        text = dumps_checkpoint(MidModel.initialize(6, 3, 2))
        assert text.splitlines()[0] == "oim-checkpoint v1 d=6 C=3 K=2"

    def test_rejects_other_version(self):
        text = dumps_checkpoint(MidModel.initialize(2, 2, 1)).replace("v1", "v9", 1)
        with pytest.raises(ValueError, match="version"):
            loads_checkpoint(text)

    def test_k_range(self):
        with pytest.raises(ValueError):
            MidModel.initialize(2, 2, 6)
