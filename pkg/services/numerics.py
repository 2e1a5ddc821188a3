import logging
from typing import Callable, Optional, Tuple

import numpy as np

from config.settings import settings
from schemas.errors import NonFiniteError, ShapeMismatchError

# 소비자별 스트림 키 - 새 소비자를 추가해도 기존 스트림은 바뀌지 않음
RNG_CONSUMERS = {"data": 1, "init": 2, "shuffle": 3, "perm": 4, "bench": 5, "eval": 6}


class Rng:
    """카운터 기반(Philox) 난수 생성기입니다. 같은 seed와 소비자면 항상 같은 스트림을 냅니다."""

    def __init__(self, seed: int, consumer: str = "data"):
        if consumer not in RNG_CONSUMERS:
            raise ValueError(f"Unknown rng consumer: {consumer}")
        self.seed = int(seed)
        self.consumer = consumer
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(RNG_CONSUMERS[consumer],))
        self.generator = np.random.Generator(np.random.Philox(seq))

    def uniform(self, low, high, size) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def normal(self, loc, scale, size) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


class NumericsService:
    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.dtype = np.dtype(settings.DTYPE)

    def rng(self, seed: int, consumer: str = "data") -> Rng:
        return Rng(seed, consumer)

    def as_real(self, x, dtype: Optional[np.dtype] = None) -> np.ndarray:
        return np.asarray(x, dtype=dtype or self.dtype)

    def check_finite(self, name: str, x: np.ndarray):
        """배열에 NaN/Inf가 있으면 예외를 발생시킵니다."""
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"{name} contains non-finite values")

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """행렬곱을 64비트 누산으로 계산하고 입력 dtype으로 돌려줍니다."""
        a = np.asarray(a)
        b = np.asarray(b)
        if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeMismatchError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
        out_dtype = np.result_type(a.dtype, b.dtype)
        acc = np.complex128 if np.iscomplexobj(a) or np.iscomplexobj(b) else np.float64
        return np.matmul(a.astype(acc), b.astype(acc)).astype(out_dtype)

    def init_glorot_uniform(self, rng: Rng, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
        """[fan_out, fan_in] 가중치를 Glorot uniform으로 초기화합니다."""
        if fan_in < 1 or fan_out < 1:
            raise ValueError("fan_in and fan_out must be >= 1")
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, (fan_out, fan_in)).astype(dtype or self.dtype)

    def finite_difference_grad(self, f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
        """중앙 차분으로 f의 기울기를 좌표별로 계산합니다 (기울기 검증용 오라클)."""
        if eps <= 0:
            raise ValueError("eps must be positive")
        x = np.array(x, dtype=np.float64, copy=True)
        grad = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(x))
            flat[i] = orig - eps
            f_minus = float(f(x))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"objective is non-finite around coordinate {i}")
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        return grad

    def relative_error(self, a: np.ndarray, b: np.ndarray) -> float:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
        return float(np.max(np.abs(a - b)) / denom)

    def split_shape(self, x: np.ndarray) -> Tuple[Tuple[int, ...], int, int]:
        """(배치 차원, T, 특징) 형태로 분해합니다."""
        if x.ndim < 2:
            raise ShapeMismatchError(f"expected [..., T, F] array, got {x.shape}")
        return x.shape[:-2], x.shape[-2], x.shape[-1]


# 전역 수치 서비스 인스턴스
numerics = NumericsService()
