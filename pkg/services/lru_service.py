import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from config.settings import settings
from schemas.errors import ConfigError, ShapeMismatchError
from services.numerics import Rng, numerics
from services.scan_service import RecurrenceTape, scan_service

LRU_PARAM_NAMES = ("nu", "theta", "B_re", "B_im", "C_re", "C_im", "D", "gamma")


def complex_dtype(dtype) -> np.dtype:
    return np.dtype(np.complex64) if np.dtype(dtype) == np.float32 else np.dtype(np.complex128)


@dataclass
class LruParams:
    nu: np.ndarray  # [N], |lambda| = exp(-exp(nu))
    theta: np.ndarray  # [N] 위상
    B_re: np.ndarray  # [N, M]
    B_im: np.ndarray  # [N, M]
    C_re: np.ndarray  # [H_out, N]
    C_im: np.ndarray  # [H_out, N]
    D: np.ndarray  # [H_out, M]
    gamma: np.ndarray  # [N] 입력 정규화

    @property
    def state_dim(self) -> int:
        return self.nu.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B_re.shape[1]

    @property
    def output_dim(self) -> int:
        return self.C_re.shape[0]

    @property
    def magnitude(self) -> np.ndarray:
        return np.exp(-np.exp(self.nu))

    @property
    def lam(self) -> np.ndarray:
        return (self.magnitude * np.exp(1j * self.theta)).astype(complex_dtype(self.nu.dtype))

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in LRU_PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: Dict[str, np.ndarray]) -> "LruParams":
        return cls(**{name: d[name] for name in LRU_PARAM_NAMES})


@dataclass
class LruCache:
    x: np.ndarray  # [..., T, M]
    u: np.ndarray  # [..., T, N] complex, B x
    h: np.ndarray  # [..., T, N] complex
    h0: np.ndarray  # [..., N] complex
    lam: np.ndarray  # [N] complex


@dataclass
class LruGrads:
    params: Dict[str, np.ndarray]
    dL_dx: np.ndarray
    dL_dh0: np.ndarray


class LRUService:
    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.scan = scan_service

    def init_params(self, rng: Rng, state_dim: int, input_dim: int, output_dim: int,
                    r_min: float = settings.R_MIN, r_max: float = settings.R_MAX,
                    theta_max: float = settings.THETA_MAX, dtype=None) -> LruParams:
        """고유값 크기는 링 [r_min, r_max]에서 r^2 균등, 위상은 [0, theta_max] 균등으로 뽑습니다."""
        if not (0.0 <= r_min < r_max < 1.0):
            raise ConfigError(f"need 0 <= r_min < r_max < 1, got r_min={r_min}, r_max={r_max}")
        if theta_max <= 0:
            raise ConfigError(f"theta_max must be positive, got {theta_max}")
        dtype = np.dtype(dtype or numerics.dtype)
        u = rng.uniform(0.0, 1.0, state_dim)
        r = np.sqrt(u * (r_max ** 2 - r_min ** 2) + r_min ** 2)
        r = np.clip(r, 1e-8, None)  # log(0) 방지
        theta = rng.uniform(0.0, theta_max, state_dim)
        return LruParams(
            nu=np.log(-np.log(r)).astype(dtype),
            theta=theta.astype(dtype),
            B_re=numerics.init_glorot_uniform(rng, input_dim, state_dim, dtype),
            B_im=numerics.init_glorot_uniform(rng, input_dim, state_dim, dtype),
            C_re=numerics.init_glorot_uniform(rng, state_dim, output_dim, dtype),
            C_im=numerics.init_glorot_uniform(rng, state_dim, output_dim, dtype),
            D=np.zeros((output_dim, input_dim), dtype=dtype),
            gamma=np.sqrt(1.0 - r ** 2).astype(dtype),
        )

    def forward(self, p: LruParams, x: np.ndarray, h0: Optional[np.ndarray] = None,
                chunk: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, LruCache]:
        """h_t = lambda * h_{t-1} + gamma * (B x_t), y_t = Re(C h_t) + D x_t 를 계산합니다."""
        x = np.asarray(x)
        batch, T, M = numerics.split_shape(x)
        if M != p.input_dim:
            raise ShapeMismatchError(f"LRU expects {p.input_dim} inputs, got {M}")
        N = p.state_dim
        cdtype = complex_dtype(p.nu.dtype)
        h0 = np.zeros(batch + (N,), dtype=cdtype) if h0 is None else np.asarray(h0, dtype=cdtype)
        if h0.shape != batch + (N,):
            raise ShapeMismatchError(f"h0 {h0.shape} does not match {batch + (N,)}")

        lam = p.lam
        B = (p.B_re + 1j * p.B_im).astype(cdtype)
        u = numerics.matmul(x.astype(cdtype), B.T)
        b = p.gamma * u
        b_tm = np.ascontiguousarray(np.moveaxis(b, -2, 0))
        tape = RecurrenceTape(a=np.ascontiguousarray(np.broadcast_to(lam, b_tm.shape)), b=b_tm, h0=h0)
        h = np.moveaxis(self.scan.scan_parallel(tape, chunk=chunk), 0, -2)

        y = numerics.matmul(h.real, p.C_re.T) - numerics.matmul(h.imag, p.C_im.T) + numerics.matmul(x, p.D.T)
        return h, y.astype(p.nu.dtype), LruCache(x=x, u=u, h=h, h0=h0, lam=lam)

    def backward(self, p: LruParams, cache: LruCache, dL_dy: np.ndarray,
                 dL_dh: Optional[np.ndarray] = None, chunk: Optional[int] = None) -> LruGrads:
        """정확한 연쇄 법칙입니다. 시간 방향 수반은 켤레 승수로 scan_backward 합니다."""
        x = cache.x
        expected = x.shape[:-1] + (p.output_dim,)
        if dL_dy.shape != expected:
            raise ShapeMismatchError(f"dL_dy {dL_dy.shape} does not match outputs {expected}")
        N, M, H = p.state_dim, p.input_dim, p.output_dim
        dtype = p.nu.dtype

        dy2 = dL_dy.reshape(-1, H)
        x2 = x.reshape(-1, M)
        h2 = cache.h.reshape(-1, N)
        grads = {
            "D": numerics.matmul(dy2.T, x2),
            "C_re": numerics.matmul(dy2.T, h2.real),
            "C_im": -numerics.matmul(dy2.T, h2.imag),
        }
        dx = numerics.matmul(dL_dy, p.D)

        # G = dL/dRe + i dL/dIm
        G_h = numerics.matmul(dL_dy, p.C_re) - 1j * numerics.matmul(dL_dy, p.C_im)
        if dL_dh is not None:
            G_h = G_h + dL_dh
        G_h_tm = np.ascontiguousarray(np.moveaxis(G_h, -2, 0))
        h_tm = np.ascontiguousarray(np.moveaxis(cache.h, -2, 0))
        tape = RecurrenceTape(a=np.ascontiguousarray(np.broadcast_to(cache.lam, h_tm.shape)),
                              b=np.zeros_like(h_tm), h0=cache.h0)
        G_a, G_b, G_h0 = self.scan.scan_backward(tape, h_tm, G_h_tm.astype(h_tm.dtype), chunk=chunk)

        G_lam = G_a.reshape(-1, N).sum(axis=0)
        lam = cache.lam
        grads["nu"] = np.real(np.conj(G_lam) * (-np.exp(p.nu) * lam))
        grads["theta"] = np.real(np.conj(G_lam) * (1j * lam))

        G_b = np.moveaxis(G_b, 0, -2)
        grads["gamma"] = np.real(np.conj(G_b) * cache.u).reshape(-1, N).sum(axis=0)
        G_u = (p.gamma * G_b).reshape(-1, N)
        grads["B_re"] = numerics.matmul(G_u.real.T, x2)
        grads["B_im"] = numerics.matmul(G_u.imag.T, x2)
        dx = dx + (numerics.matmul(G_u.real, p.B_re) + numerics.matmul(G_u.imag, p.B_im)).reshape(x.shape)

        grads = {name: grads[name].astype(dtype) for name in LRU_PARAM_NAMES}
        return LruGrads(params=grads, dL_dx=dx.astype(dtype), dL_dh0=G_h0)

    def hand_built_decay_unit(self, r: float = settings.R_MAX, dtype=np.float64) -> LruParams:
        """실수 고유값 r 하나로 입력을 흘려보내는 1-유닛 LRU 입니다 (y = Re(h))."""
        return LruParams(
            nu=np.array([np.log(-np.log(r))], dtype=dtype),
            theta=np.zeros(1, dtype=dtype),
            B_re=np.ones((1, 1), dtype=dtype),
            B_im=np.zeros((1, 1), dtype=dtype),
            C_re=np.ones((1, 1), dtype=dtype),
            C_im=np.zeros((1, 1), dtype=dtype),
            D=np.zeros((1, 1), dtype=dtype),
            gamma=np.ones(1, dtype=dtype),
        )


# 전역 LRU 서비스 인스턴스
lru_service = LRUService()
