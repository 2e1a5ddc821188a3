import pytest
import numpy as np

from services.numerics import NumericsService, Rng, numerics
from schemas.errors import NonFiniteError, ShapeMismatchError


class TestRng:
    def test_same_seed_same_stream(self):
        a = Rng(7, "init").uniform(0.0, 1.0, 16)
        b = Rng(7, "init").uniform(0.0, 1.0, 16)
        assert np.array_equal(a, b)

    def test_consumers_are_independent(self):
        a = Rng(7, "init").uniform(0.0, 1.0, 16)
        b = Rng(7, "data").uniform(0.0, 1.0, 16)
        assert not np.array_equal(a, b)

    def test_unknown_consumer(self):
        with pytest.raises(ValueError):
            Rng(0, "nope")


class TestNumericsService:
    def setup_method(self):
        self.numerics = NumericsService()

    def test_matmul_identity(self):
        v = np.array([[1.0], [2.0], [3.0]])
        assert np.array_equal(self.numerics.matmul(np.eye(3), v), v)

    def test_matmul_hand_computed(self):
        out = self.numerics.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        assert np.array_equal(out, np.array([[3.0], [7.0]]))

    def test_matmul_matches_triple_loop(self):
        rng = Rng(3, "data")
        a = rng.integers(-5, 5, (8, 8)).astype(np.float64)
        b = rng.integers(-5, 5, (8, 8)).astype(np.float64)
        naive = np.zeros((8, 8))
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    naive[i, j] += a[i, k] * b[k, j]
        assert np.array_equal(self.numerics.matmul(a, b), naive)

    def test_matmul_preserves_dtype(self):
        a = np.ones((2, 3), dtype=np.float32)
        assert self.numerics.matmul(a, a.T).dtype == np.float32

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            self.numerics.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_glorot_bound(self):
        w = self.numerics.init_glorot_uniform(Rng(0, "init"), 3, 3, np.float64)
        assert w.shape == (3, 3)
        assert np.all(np.abs(w) <= 1.0)

    def test_glorot_deterministic(self):
        a = self.numerics.init_glorot_uniform(Rng(7, "init"), 4, 5)
        b = self.numerics.init_glorot_uniform(Rng(7, "init"), 4, 5)
        assert np.array_equal(a, b)

    def test_glorot_mean_near_zero(self):
        w = self.numerics.init_glorot_uniform(Rng(1, "init"), 100, 100, np.float64)
        limit = np.sqrt(6.0 / 200)
        sigma = limit / np.sqrt(3.0) / np.sqrt(w.size)
        assert abs(w.mean()) < 3 * sigma

    def test_glorot_rejects_zero_fan(self):
        with pytest.raises(ValueError):
            self.numerics.init_glorot_uniform(Rng(0, "init"), 0, 3)

    def test_finite_difference_square(self):
        g = self.numerics.finite_difference_grad(lambda v: float(v[0] ** 2), np.array([3.0]), eps=1e-4)
        assert abs(g[0] - 6.0) < 1e-6

    def test_finite_difference_sum(self):
        x = np.array([[0.3, -2.0], [5.0, 1.5]])
        g = self.numerics.finite_difference_grad(lambda v: float(v.sum()), x)
        assert np.allclose(g, 1.0)

    def test_finite_difference_non_finite(self):
        with pytest.raises(NonFiniteError):
            self.numerics.finite_difference_grad(lambda v: float("nan"), np.zeros(2))

    def test_check_finite(self):
        self.numerics.check_finite("ok", np.zeros(3))
        with pytest.raises(NonFiniteError):
            self.numerics.check_finite("bad", np.array([1.0, np.inf]))

    def test_split_shape(self):
        assert self.numerics.split_shape(np.zeros((4, 7, 3))) == ((4,), 7, 3)
        assert self.numerics.split_shape(np.zeros((7, 3))) == ((), 7, 3)
        with pytest.raises(ShapeMismatchError):
            self.numerics.split_shape(np.zeros(3))

    def test_global_instance(self):
        assert isinstance(numerics, NumericsService)
