import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from ream.numeric import (
    ShapeError,
    UndefinedCorrelationError,
    cosine_sim,
    matmul,
    matvec,
    pearson,
    rowwise_cosine,
    silu,
    softmax,
    topk_indices,
    topk_mask,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        assert_array_equal(matmul(np.eye(2), [[1, 2], [3, 4]]), [[1, 2], [3, 4]])

    def test_selector_row(self):
        assert_array_equal(matmul([[1, 0]], [[2], [5]]), [[2]])

    def test_triple_loop_oracle(self, rng):
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((3, 2))
        # same summation order, so equality is exact
        assert_array_equal(matmul(a, b), triple_loop(a, b))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31))
    def test_bit_exact_against_loop(self, m, k, n, seed):
        r = np.random.default_rng(seed)
        a, b = r.standard_normal((m, k)), r.standard_normal((k, n))
        assert_array_equal(matmul(a, b), triple_loop(a, b))

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_matvec(self, rng):
        w = rng.standard_normal((3, 5))
        x = rng.standard_normal(5)
        assert_array_equal(matvec(w, x), triple_loop(w, x[:, None])[:, 0])


class TestSoftmax:
    def test_symmetric(self):
        assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_large_logits(self):
        p = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p))
        assert_allclose(p, [1.0, 0.0], atol=1e-300)

    def test_exp_normalize_oracle(self):
        # oracle in exact rational arithmetic over float exp values
        v = [1.0, 2.0, 3.0]
        e = [Fraction(math.exp(x - 3.0)) for x in v]
        expected = [float(x / sum(e)) for x in e]
        assert_allclose(softmax(v), expected, rtol=0, atol=1e-12)

    def test_empty(self):
        with pytest.raises(ShapeError):
            softmax([])

    @given(arrays(np.float64, st.integers(1, 12), elements=finite))
    def test_sums_to_one(self, v):
        p = softmax(v)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-9

    @given(arrays(np.float64, st.integers(2, 10), elements=finite), st.randoms(use_true_random=False))
    def test_permutation_equivariant(self, v, rnd):
        perm = list(range(v.size))
        rnd.shuffle(perm)
        assert_allclose(softmax(v)[perm], softmax(v[perm]), rtol=1e-12, atol=1e-15)


class TestTopk:
    def test_k1(self):
        assert_array_equal(topk_mask([0.5, 0.3, 0.2], 1), [0.5, 0, 0])

    def test_tie_lower_index(self):
        assert_array_equal(topk_mask([0.4, 0.4, 0.2], 1), [0.4, 0, 0])

    def test_sort_oracle(self):
        p = np.array([0.1, 0.7, 0.2])
        keep = sorted(range(3), key=lambda i: (-p[i], i))[:2]
        expected = np.where(np.isin(np.arange(3), keep), p, 0.0)
        assert_array_equal(topk_mask(p, 2), expected)
        assert_array_equal(expected, [0, 0.7, 0.2])

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            topk_mask([0.2, 0.3, 0.5], k)

    def test_renormalize_flag(self):
        assert_allclose(topk_mask([0.5, 0.3, 0.2], 2, renormalize=True), [0.625, 0.375, 0.0])

    def test_rowwise(self):
        p = np.array([[0.1, 0.6, 0.3], [0.5, 0.25, 0.25]])
        assert_array_equal(topk_indices(p, 2), [[1, 2], [0, 1]])

    @given(
        arrays(np.float64, st.integers(1, 10), elements=st.sampled_from([0.0, 0.1, 0.25, 0.5, 1.0])),
        st.data(),
    )
    def test_k_nonzeros_and_subset(self, p, data):
        p = p + 1e-3  # keep entries positive so nonzero count equals k
        k = data.draw(st.integers(1, p.size))
        out = topk_mask(p, k)
        assert np.count_nonzero(out) == k
        nz = out != 0
        assert_array_equal(out[nz], p[nz])
        assert_array_equal(topk_mask(p, k), out)
        # ties resolve to lower indices: selected set is the first k of a stable sort
        expected = sorted(range(p.size), key=lambda i: (-p[i], i))[:k]
        assert sorted(np.flatnonzero(nz).tolist()) == sorted(expected)


class TestCosine:
    def test_self(self):
        v = np.array([0.3, -2.0, 1.0])
        assert cosine_sim(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_sim([1, 0], [0, 1]) == 0.0

    def test_scaling(self):
        assert cosine_sim([1, 2], [2, 4]) == pytest.approx(1.0)

    def test_zero_norm(self):
        assert cosine_sim([0, 0], [1, 2]) == 0.0
        assert cosine_sim([1e-13, 0], [1, 2]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_sim([1, 2], [1, 2, 3])

    @given(
        arrays(np.float64, 5, elements=finite),
        arrays(np.float64, 5, elements=finite),
        st.floats(0.01, 100),
    )
    def test_symmetric_and_scale_invariant(self, a, b, c):
        s = cosine_sim(a, b)
        assert -1.0 <= s <= 1.0
        assert s == cosine_sim(b, a)
        if np.linalg.norm(a) * c >= 1e-12 and np.linalg.norm(a) >= 1e-12:
            assert cosine_sim(c * a, b) == pytest.approx(s, abs=1e-9)

    def test_rowwise_matches_scalar(self, rng):
        a, b = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
        a[2] = 0
        expected = [cosine_sim(x, y) for x, y in zip(a, b)]
        assert_allclose(rowwise_cosine(a, b), expected, atol=1e-15)


class TestPearson:
    def test_perfect(self, rng):
        xs = rng.standard_normal(8)
        assert pearson(xs, 2 * xs + 1) == pytest.approx(1.0)
        assert pearson(xs, -xs) == pytest.approx(-1.0)

    def test_covariance_oracle(self, rng):
        xs, ys = rng.standard_normal(10), rng.standard_normal(10)
        fx = [Fraction(float(x)) for x in xs]
        fy = [Fraction(float(y)) for y in ys]
        mx, my = sum(fx) / 10, sum(fy) / 10
        cov = sum((a - mx) * (b - my) for a, b in zip(fx, fy))
        vx = sum((a - mx) ** 2 for a in fx)
        vy = sum((b - my) ** 2 for b in fy)
        expected = float(cov) / math.sqrt(float(vx) * float(vy))
        assert pearson(xs, ys) == pytest.approx(expected, abs=1e-10)

    def test_zero_variance(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson([1, 1, 1], [1, 2, 3])

    def test_too_short(self):
        with pytest.raises(ShapeError):
            pearson([1.0], [2.0])


def test_silu_scalar():
    assert silu(np.array(1.0)) == pytest.approx(1.0 / (1.0 + math.exp(-1.0)))
    assert silu(np.array(1.0)) == pytest.approx(0.731059, abs=1e-6)
    assert np.all(np.isfinite(silu(np.array([-800.0, 800.0]))))
