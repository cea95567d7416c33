import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aumn.errors import ValidationError
from aumn.losses import (
    AblationFlags,
    LossComponents,
    LossWeights,
    classification_loss,
    diversity_loss,
    homogeneity_loss,
    occurrence_probability,
    sparsity_loss,
    total_loss,
)


def simplex(rng, n, size):
    return rng.dirichlet(np.ones(size), n)


unit_vectors = arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 1))


class TestClassificationLoss:
    def test_perfect_prediction(self):
        y = np.array([0.0, 1.0, 0.0])
        assert classification_loss([y], [y]) == 0.0

    def test_uniform_is_log_c(self):
        assert classification_loss([np.full(4, 0.25)], [np.eye(4)[2]]) == pytest.approx(math.log(4), abs=1e-12)

    def test_scalar_loop_oracle(self, rng):
        y_hat, y = simplex(rng, 3, 5), simplex(rng, 3, 5)
        expected = 0.0
        for i in range(3):
            for j in range(5):
                expected -= y[i, j] * math.log(y_hat[i, j])
        assert classification_loss(y_hat, y) == pytest.approx(expected / 3, abs=1e-12)

    def test_clamp_keeps_finite(self):
        value = classification_loss([np.array([1.0, 0.0])], [np.array([0.0, 1.0])])
        assert value == pytest.approx(-math.log(1e-12))

    def test_empty_and_mismatch(self):
        with pytest.raises(ValidationError):
            classification_loss([], [])
        with pytest.raises(ValidationError):
            classification_loss([np.full(3, 1 / 3)], [np.full(2, 0.5)])


class TestDiversityLoss:
    def test_orthonormal_rows(self):
        assert diversity_loss(np.eye(5)[:3]) == 0.0

    def test_rotated_orthonormal(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        assert diversity_loss(q[:4]) < 1e-10

    def test_duplicated_row(self):
        e = np.eye(3)[0]
        assert diversity_loss(np.vstack([e, e])) == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_formula_oracle(self, rng):
        M = rng.normal(size=(4, 6))
        s = 0.0
        for i in range(4):
            for j in range(4):
                g = sum(M[i, f] * M[j, f] for f in range(6)) - (1.0 if i == j else 0.0)
                s += g * g
        assert diversity_loss(M) == pytest.approx(math.sqrt(s), abs=1e-12)

    @given(arrays(np.float64, 4, elements=st.floats(-3, 3)).filter(lambda v: np.abs(v).max() > 1e-3),
           st.floats(-2, 2).filter(lambda c: abs(c) > 1e-3))
    def test_parallel_rows_positive(self, v, c):
        assert diversity_loss(np.vstack([v, c * v])) > 0


class TestOccurrenceProbability:
    def test_constant_uniform(self):
        np.testing.assert_allclose(occurrence_probability(np.full((6, 5), 0.3)), 0.2, atol=1e-15)

    def test_dominant_template(self, rng):
        S = rng.uniform(0, 0.4, size=(8, 4))
        S[:, 2] = 0.9
        assert occurrence_probability(S).argmax() == 2

    def test_column_sum_oracle(self, rng):
        S = rng.uniform(size=(7, 3))
        sums = [sum(S[t, k] for t in range(7)) for k in range(3)]
        e = [math.exp(v - max(sums)) for v in sums]
        np.testing.assert_allclose(occurrence_probability(S), [v / sum(e) for v in e], atol=1e-12)


class TestHomogeneityLoss:
    def test_uniform_minimum(self):
        assert homogeneity_loss([np.full(7, 1 / 7)]) == pytest.approx(1 / math.sqrt(7), abs=1e-12)
        assert abs(homogeneity_loss([np.full(7, 1 / 7)]) - 0.377964) < 1e-6

    def test_mean_uniform_from_one_hots(self):
        assert homogeneity_loss(list(np.eye(7))) == pytest.approx(1 / math.sqrt(7), abs=1e-12)

    def test_one_hot_maximum(self):
        assert homogeneity_loss([np.eye(5)[1], np.eye(5)[1]]) == pytest.approx(1.0, abs=1e-15)

    def test_formula_oracle(self, rng):
        p = simplex(rng, 4, 6)
        mean = [sum(p[i, k] for i in range(4)) / 4 for k in range(6)]
        assert homogeneity_loss(p) == pytest.approx(math.sqrt(sum(v * v for v in mean)), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValidationError):
            homogeneity_loss([])

    @given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**32 - 1))
    def test_bounds(self, B, K, seed):
        p = simplex(np.random.default_rng(seed), B, K)
        value = homogeneity_loss(p)
        assert 1 / math.sqrt(K) - 1e-12 <= value <= 1 + 1e-12


class TestSparsityLoss:
    def test_zero(self):
        assert sparsity_loss([np.zeros(5), np.zeros(3)]) == 0.0

    def test_ones(self):
        assert sparsity_loss([np.ones(4)]) == 4.0

    def test_scalar_loop_oracle(self, rng):
        batch = [rng.uniform(size=n) for n in (3, 5, 4)]
        expected = sum(sum(abs(v) for v in a) for a in batch) / 3
        assert sparsity_loss(batch) == pytest.approx(expected, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValidationError):
            sparsity_loss([])

    @given(unit_vectors, st.integers(0, 7), st.floats(0, 1))
    def test_monotone(self, a, index, bump):
        index = index % len(a)
        raised = a.copy()
        raised[index] = max(a[index], bump)
        assert sparsity_loss([raised]) >= sparsity_loss([a])


class TestTotalLoss:
    def test_all_off_is_cls(self):
        c = LossComponents(0.7, 3.0, 0.5, 12.0)
        assert total_loss(c, LossWeights(), AblationFlags.cls_only()) == 0.7

    def test_published_weights_unit_components(self):
        c = LossComponents(1.0, 1.0, 1.0, 1.0)
        assert total_loss(c, LossWeights(0.01, 0.02, 0.05), AblationFlags()) == pytest.approx(1.08, abs=1e-15)

    def test_scalar_sum(self, rng):
        for _ in range(20):
            cls, d, h, s = rng.uniform(0, 5, size=4)
            a, b, g = rng.uniform(0, 1, size=3)
            c = LossComponents(cls, d, h, s)
            assert abs(total_loss(c, LossWeights(a, b, g), AblationFlags()) - (cls + a * d + b * h + g * s)) <= 1e-15

    @pytest.mark.parametrize("flag", ["sparsity", "diversity", "homogeneity"])
    def test_disabled_term_contributes_zero(self, flag):
        c = LossComponents(0.5, 2.0, 0.6, 9.0)
        flags = AblationFlags(**{flag: False})
        expected = 0.5 + sum(w * v for w, v, name in (
            (0.01, 2.0, "diversity"), (0.02, 0.6, "homogeneity"), (0.05, 9.0, "sparsity")) if name != flag)
        assert total_loss(c, LossWeights(), flags) == pytest.approx(expected, abs=1e-15)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError):
            LossWeights(alpha=-0.1)
        with pytest.raises(ValidationError):
            LossWeights(gamma=float("nan"))

    def test_labels(self):
        assert AblationFlags().label() == "Ls+Ld+Lh+S"
        assert AblationFlags.cls_only().label() == "cls-only"


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_batch_order_invariance(seed):
    rng = np.random.default_rng(seed)
    y_hat, y = simplex(rng, 4, 3), simplex(rng, 4, 3)
    p = simplex(rng, 4, 5)
    a = [rng.uniform(size=6) for _ in range(4)]
    perm = rng.permutation(4)
    assert classification_loss(y_hat[perm], y[perm]) == pytest.approx(classification_loss(y_hat, y), abs=1e-12)
    assert homogeneity_loss(p[perm]) == pytest.approx(homogeneity_loss(p), abs=1e-12)
    assert sparsity_loss([a[i] for i in perm]) == pytest.approx(sparsity_loss(a), abs=1e-12)
