import numpy as np
import pytest

from fusionrank import SeededRng, elem_mul, matmul, rand_uniform, sigmoid
from fusionrank.errors import ConfigError, ShapeMismatchError


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_hand_arithmetic(self):
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert np.array_equal(out, np.array([[11.0]]))

    def test_zero_annihilates(self):
        z = np.zeros((3, 4))
        m = np.arange(8.0).reshape(4, 2)
        assert np.array_equal(matmul(z, m), np.zeros((3, 2)))

    def test_dimension_mismatch_reports_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\) x \(2, 2\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_rejects_nan(self):
        bad = np.array([[np.nan, 1.0]])
        with pytest.raises(ShapeMismatchError):
            matmul(bad, np.ones((2, 1)))

    def test_associativity(self):
        gen = np.random.default_rng(0)
        for _ in range(25):
            a = gen.normal(size=(3, 4))
            b = gen.normal(size=(4, 5))
            c = gen.normal(size=(5, 2))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            rel = np.abs(left - right) / np.maximum(1e-30, np.abs(left) + np.abs(right))
            assert rel.max() < 1e-9


class TestElemMul:
    def test_multiplicative_identity(self):
        a = np.array([[1.0, 2.0, 3.0]])
        assert np.array_equal(elem_mul(a, np.ones_like(a)), a)

    def test_hand_arithmetic(self):
        out = elem_mul(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
        assert np.array_equal(out, np.array([3.0, 8.0]))

    def test_zero_case(self):
        a = np.array([[5.0, -2.0]])
        assert np.array_equal(elem_mul(a, np.zeros_like(a)), np.zeros_like(a))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            elem_mul(np.ones((2, 2)), np.ones((2, 3)))

    def test_commutative_bitwise(self):
        gen = np.random.default_rng(1)
        a = gen.normal(size=(6, 7))
        b = gen.normal(size=(6, 7))
        assert np.array_equal(elem_mul(a, b), elem_mul(b, a))


class TestSigmoid:
    def test_zero_is_half(self):
        assert sigmoid(0.0) == 0.5

    def test_symmetry_identity(self):
        xs = np.linspace(-20, 20, 101)
        assert np.allclose(sigmoid(-xs), 1.0 - sigmoid(xs), atol=1e-15)

    def test_hand_value(self):
        assert abs(sigmoid(11.0) - 0.9999832986) < 1e-9

    def test_stable_to_700(self):
        out = sigmoid(np.array([-700.0, 700.0]))
        assert np.all(np.isfinite(out))
        assert out[0] >= 0.0 and out[1] <= 1.0

    def test_monotone(self):
        xs = np.linspace(-30, 30, 500)
        ys = sigmoid(xs)
        assert np.all(np.diff(ys) >= 0)

    def test_rejects_nan(self):
        with pytest.raises(ShapeMismatchError):
            sigmoid(np.array([np.nan]))


class TestRandUniform:
    def test_deterministic_per_seed(self):
        a = rand_uniform(SeededRng(42), 5, 7, 0.5)
        b = rand_uniform(SeededRng(42), 5, 7, 0.5)
        assert np.array_equal(a, b)

    def test_range_bound(self):
        m = rand_uniform(SeededRng(3), 50, 50, 0.1)
        assert np.all(m >= -0.1) and np.all(m <= 0.1)

    def test_mean_statistical_oracle(self):
        n = 1_000_000
        m = rand_uniform(SeededRng(9), 1000, 1000, 1.0)
        stderr = 1.0 / np.sqrt(3.0 * n)  # uniform on [-1,1] has sd 1/sqrt(3)
        assert abs(m.mean()) < 3.0 * stderr

    def test_rejects_bad_scale(self):
        with pytest.raises(ConfigError):
            rand_uniform(SeededRng(0), 2, 2, 0.0)
        with pytest.raises(ConfigError):
            rand_uniform(SeededRng(0), 2, 2, -1.0)
