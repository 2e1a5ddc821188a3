import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from config.settings import settings
from schemas.errors import ShapeMismatchError
from services.numerics import Rng, numerics
from services.scan_service import RecurrenceTape, scan_service

BMRU_PARAM_NAMES = ("W_x", "b_x", "W_beta", "b_beta", "alpha")


@dataclass
class BmruParams:
    W_x: np.ndarray  # [N, M]
    b_x: np.ndarray  # [N]
    W_beta: np.ndarray  # [N, M]
    b_beta: np.ndarray  # [N]
    alpha: np.ndarray  # [N], 안정 상태 진폭
    alpha_surr: float = settings.ALPHA_SURR  # 학습하지 않음

    @property
    def state_dim(self) -> int:
        return self.W_x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_x.shape[1]

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BMRU_PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: Dict[str, np.ndarray], alpha_surr: float = settings.ALPHA_SURR) -> "BmruParams":
        return cls(**{name: d[name] for name in BMRU_PARAM_NAMES}, alpha_surr=alpha_surr)


@dataclass
class BmruForwardCache:
    h_hat: np.ndarray  # [..., T, N] 후보
    beta: np.ndarray  # [..., T, N] 임계값
    beta_pre: np.ndarray  # [..., T, N] |.| 적용 전
    z: np.ndarray  # [..., T, N] 이진 게이트
    s: np.ndarray  # [..., T, N] 부호 (+1/-1)
    h: np.ndarray  # [..., T, N] 상태
    h0: np.ndarray  # [..., N]


@dataclass
class BmruGrads:
    W_x: np.ndarray
    b_x: np.ndarray
    W_beta: np.ndarray
    b_beta: np.ndarray
    alpha: np.ndarray
    dL_dx: np.ndarray
    dL_dh0: np.ndarray

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BMRU_PARAM_NAMES}


def heaviside(u: np.ndarray) -> np.ndarray:
    # H(0) = 1
    u = np.asarray(u)
    return (u >= 0).astype(u.dtype if u.dtype.kind == "f" else np.float64)


def sign(u: np.ndarray) -> np.ndarray:
    # S(0) = 1
    u = np.asarray(u)
    return np.where(u >= 0, 1.0, -1.0).astype(u.dtype if u.dtype.kind == "f" else np.float64)


def _time_major(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(a, -2, 0))


def _batch_major(a: np.ndarray) -> np.ndarray:
    return np.moveaxis(a, 0, -2)


class BMRUService:
    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.alpha_surr = settings.ALPHA_SURR
        self.scan = scan_service

    def init_params(self, rng: Rng, state_dim: int, input_dim: int,
                    alpha_surr: Optional[float] = None, dtype=None) -> BmruParams:
        """BMRU 파라미터를 초기화합니다. b_beta=0.5 로 쓰기/유지가 섞이도록 합니다."""
        dtype = np.dtype(dtype or numerics.dtype)
        return BmruParams(
            W_x=numerics.init_glorot_uniform(rng, input_dim, state_dim, dtype),
            b_x=np.zeros(state_dim, dtype=dtype),
            W_beta=numerics.init_glorot_uniform(rng, input_dim, state_dim, dtype),
            b_beta=np.full(state_dim, settings.BETA_BIAS_INIT, dtype=dtype),
            alpha=np.full(state_dim, settings.ALPHA_INIT, dtype=dtype),
            alpha_surr=self.alpha_surr if alpha_surr is None else alpha_surr,
        )

    def scalar_step(self, h_prev: float, x: float, beta: float, alpha: float) -> float:
        """|x| >= beta 이면 alpha*S(x)로 쓰고, 아니면 이전 상태를 유지합니다."""
        if beta < 0:
            raise ValueError("beta must be >= 0")
        if abs(x) >= beta:
            return alpha if x >= 0 else -alpha
        return h_prev

    def approx_step(self, h_prev: float, x: float, beta: float, alpha: float) -> float:
        """단순화 전 구간별 근사: 쌍안정 영역에서는 alpha*S(h_prev + x/beta) 입니다."""
        if abs(x) >= beta:
            return alpha if x >= 0 else -alpha
        return alpha if h_prev + x / beta >= 0 else -alpha

    def surrogate_h(self, u, alpha_surr: float):
        """Heaviside 대리 함수 값 atan(a*pi*u)/(pi*a) + 1/2 (a=0 이면 u + 1/2)."""
        if alpha_surr < 0:
            raise ValueError("alpha_surr must be >= 0")
        u = np.asarray(u)
        if alpha_surr == 0:
            return u + 0.5
        return np.arctan(alpha_surr * np.pi * u) / (np.pi * alpha_surr) + 0.5

    def surrogate_h_prime(self, u, alpha_surr: float):
        """Heaviside 대리 미분 1 / (1 + (a*pi*u)^2) 입니다."""
        if alpha_surr < 0:
            raise ValueError("alpha_surr must be >= 0")
        u = np.asarray(u)
        return 1.0 / (1.0 + (alpha_surr * np.pi * u) ** 2)

    def forward(self, p: BmruParams, x: np.ndarray, h0: Optional[np.ndarray] = None,
                chunk: Optional[int] = None) -> BmruForwardCache:
        """후보/임계값/게이트를 계산하고 상태 재귀는 병렬 스캔으로 풉니다."""
        x = np.asarray(x)
        batch, T, M = numerics.split_shape(x)
        if M != p.input_dim:
            raise ShapeMismatchError(f"BMRU expects {p.input_dim} inputs, got {M}")
        numerics.check_finite("BMRU input", x)
        N = p.state_dim
        dtype = p.W_x.dtype
        h0 = np.zeros(batch + (N,), dtype=dtype) if h0 is None else np.asarray(h0, dtype=dtype)
        if h0.shape != batch + (N,):
            raise ShapeMismatchError(f"h0 {h0.shape} does not match {batch + (N,)}")

        h_hat = numerics.matmul(x, p.W_x.T) + p.b_x
        beta_pre = numerics.matmul(x, p.W_beta.T) + p.b_beta
        beta = np.abs(beta_pre)
        z = heaviside(np.abs(h_hat) - beta)
        s = sign(h_hat)

        tape = RecurrenceTape(
            a=_time_major(1.0 - z),
            b=_time_major(z * s * p.alpha),
            h0=h0,
        )
        h = _batch_major(self.scan.scan_parallel(tape, chunk=chunk))
        return BmruForwardCache(h_hat=h_hat, beta=beta, beta_pre=beta_pre, z=z, s=s, h=h, h0=h0)

    def backward(self, p: BmruParams, cache: BmruForwardCache, x: np.ndarray, dL_dh: np.ndarray,
                 chunk: Optional[int] = None) -> BmruGrads:
        """대리 기울기 역전파입니다. 상태 경로는 순전파의 이진 게이트를 그대로 사용합니다."""
        x = np.asarray(x)
        if cache.h.shape[:-1] != x.shape[:-1] or x.shape[-1] != p.input_dim:
            raise ShapeMismatchError(f"cache {cache.h.shape} does not match input {x.shape}")
        if dL_dh.shape != cache.h.shape:
            raise ShapeMismatchError(f"dL_dh {dL_dh.shape} does not match states {cache.h.shape}")
        N, M = p.state_dim, p.input_dim
        a = _time_major(1.0 - cache.z)
        tape = RecurrenceTape(a=a, b=np.zeros_like(a), h0=cache.h0)
        dL_da, dL_db, dL_dh0 = self.scan.scan_backward(tape, _time_major(cache.h), _time_major(dL_dh), chunk=chunk)
        dL_da = _batch_major(dL_da)
        dL_db = _batch_major(dL_db)

        # b = z*s*alpha, a = 1 - z
        dz = dL_db * cache.s * p.alpha - dL_da
        ds = dL_db * cache.z * p.alpha
        dalpha = np.sum((dL_db * cache.z * cache.s).reshape(-1, N), axis=0)

        u = np.abs(cache.h_hat) - cache.beta
        du = dz * self.surrogate_h_prime(u, p.alpha_surr)
        dh_hat = du * sign(cache.h_hat) + ds * 2.0 * self.surrogate_h_prime(cache.h_hat, p.alpha_surr)
        dbeta_pre = -du * sign(cache.beta_pre)

        x2 = x.reshape(-1, M)
        dh2 = dh_hat.reshape(-1, N)
        dv2 = dbeta_pre.reshape(-1, N)
        dtype = p.W_x.dtype
        return BmruGrads(
            W_x=numerics.matmul(dh2.T, x2).astype(dtype),
            b_x=dh2.sum(axis=0).astype(dtype),
            W_beta=numerics.matmul(dv2.T, x2).astype(dtype),
            b_beta=dv2.sum(axis=0).astype(dtype),
            alpha=dalpha.astype(dtype),
            dL_dx=(numerics.matmul(dh_hat, p.W_x) + numerics.matmul(dbeta_pre, p.W_beta)).astype(dtype),
            dL_dh0=dL_dh0.astype(dtype),
        )

    def hand_built_memory_unit(self, threshold: float = 0.5, dtype=np.float64) -> BmruParams:
        """±1 입력에 쓰고 0 입력에서 유지하는 1-유닛 BMRU 입니다."""
        return BmruParams(
            W_x=np.ones((1, 1), dtype=dtype),
            b_x=np.zeros(1, dtype=dtype),
            W_beta=np.zeros((1, 1), dtype=dtype),
            b_beta=np.full(1, threshold, dtype=dtype),
            alpha=np.ones(1, dtype=dtype),
        )


# 전역 BMRU 서비스 인스턴스
bmru_service = BMRUService()
