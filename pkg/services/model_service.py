import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from config.settings import settings
from schemas.errors import ShapeMismatchError
from schemas.models import BlockConfig, NetworkConfig
from services.bmru_service import BMRU_PARAM_NAMES, BmruParams, bmru_service
from services.lru_service import LRU_PARAM_NAMES, LruParams, lru_service
from services.numerics import Rng, numerics

Params = Dict[str, np.ndarray]

GELU_K = np.sqrt(2.0 / np.pi)


def cell_layout(cfg: BlockConfig) -> List[Tuple[str, int, int]]:
    """블록 안 셀 구성 (종류, 상태 차원, 출력 차원) 목록을 반환합니다.

    혼합 블록은 상태/출력 차원을 반으로 나눠 BMRU와 LRU를 나란히 둡니다.
    """
    H, N = cfg.model_dim, cfg.state_dim
    if cfg.cell_kind == "hybrid":
        return [("bmru", N - N // 2, H - H // 2), ("lru", N // 2, H // 2)]
    return [(cfg.cell_kind, N, H)]


def is_bmru_param(name: str) -> bool:
    """BMRU 셀 고유 파라미터(W_x, b_x, W_beta, b_beta, alpha)인지 판정합니다."""
    parts = name.split(".")
    return (len(parts) == 5 and parts[0] == "blocks" and parts[2] == "bmru"
            and parts[3] in ("fwd", "bwd") and parts[4] in BMRU_PARAM_NAMES)


def _sub(params: Params, prefix: str) -> Dict[str, np.ndarray]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _put(grads: Params, prefix: str, values: Dict[str, np.ndarray]):
    for k, v in values.items():
        grads[f"{prefix}.{k}"] = grads[f"{prefix}.{k}"] + v if f"{prefix}.{k}" in grads else v


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


@dataclass
class BlockCache:
    x: np.ndarray
    x_norm: np.ndarray
    bn: Dict[str, Any]
    cells: List[Dict[str, Any]]
    glu: Dict[str, Any]


@dataclass
class NetworkCache:
    x: np.ndarray
    blocks: List[BlockCache] = field(default_factory=list)
    pooled: Optional[np.ndarray] = None
    pool_T: int = 0
    head: List[Dict[str, np.ndarray]] = field(default_factory=list)


class ModelService:
    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.eps = settings.BN_EPS
        self.momentum = settings.BN_MOMENTUM

    # ------------------------------------------------------------------
    # 구성 요소
    # ------------------------------------------------------------------

    def positional_encoding(self, T: int, dim: int, dtype=None) -> np.ndarray:
        """사인/코사인 위치 인코딩 [T, dim] 을 생성합니다."""
        if dim < 2 or dim % 2 != 0:
            raise ValueError(f"positional dim must be even and >= 2, got {dim}")
        t = np.arange(T, dtype=np.float64)[:, None]
        freq = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
        pe = np.empty((T, dim), dtype=np.float64)
        pe[:, 0::2] = np.sin(t / freq)
        pe[:, 1::2] = np.cos(t / freq)
        return pe.astype(dtype or numerics.dtype)

    def batch_norm_forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                           running_mean: np.ndarray, running_var: np.ndarray,
                           mode: str) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray], Dict[str, Any]]:
        """특징별 배치 정규화입니다. 새 이동 통계를 반환하고 입력 통계는 건드리지 않습니다."""
        x2 = _flat(x)
        m = x2.shape[0]
        if mode == "train":
            if m < 2:
                raise ShapeMismatchError("batch norm in train mode needs B*T >= 2")
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)
            new_mean = (1.0 - self.momentum) * running_mean + self.momentum * mean
            new_var = (1.0 - self.momentum) * running_var + self.momentum * var * m / (m - 1)
            stats = (new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype))
        elif mode == "eval":
            mean, var = running_mean, running_var
            stats = (running_mean, running_var)
        else:
            raise ValueError(f"unknown mode: {mode}")
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        y = (gamma * x_hat + beta).astype(x.dtype)
        return y, stats, {"x_hat": x_hat, "inv_std": inv_std, "gamma": gamma, "mode": mode}

    def batch_norm_backward(self, dy: np.ndarray, cache: Dict[str, Any]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        x_hat, inv_std, gamma = cache["x_hat"], cache["inv_std"], cache["gamma"]
        dy2, xh2 = _flat(dy), _flat(x_hat)
        dgamma = np.sum(dy2 * xh2, axis=0)
        dbeta = np.sum(dy2, axis=0)
        dxh = dy * gamma
        if cache["mode"] == "eval":
            return (dxh * inv_std).astype(dy.dtype), dgamma, dbeta
        m = dy2.shape[0]
        dxh2 = _flat(dxh)
        dx = inv_std / m * (m * dxh - dxh2.sum(axis=0) - x_hat * np.sum(dxh2 * xh2, axis=0))
        return dx.astype(dy.dtype), dgamma, dbeta

    def glu_forward(self, x: np.ndarray, W: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """2H 로 투영해 (u, v) 로 나누고 u * sigmoid(v) 를 반환합니다."""
        if W.shape[1] != x.shape[-1] or W.shape[0] % 2 != 0:
            raise ShapeMismatchError(f"GLU weight {W.shape} does not fit input {x.shape}")
        z = numerics.matmul(x, W.T) + b
        H = W.shape[0] // 2
        u, v = z[..., :H], z[..., H:]
        sig = 1.0 / (1.0 + np.exp(-v))
        return (u * sig).astype(x.dtype), {"x": x, "u": u, "sig": sig}

    def glu_backward(self, dy: np.ndarray, W: np.ndarray, cache: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        u, sig, x = cache["u"], cache["sig"], cache["x"]
        dz = np.concatenate([dy * sig, dy * u * sig * (1.0 - sig)], axis=-1)
        dz2 = _flat(dz)
        dW = numerics.matmul(dz2.T, _flat(x))
        db = dz2.sum(axis=0)
        return numerics.matmul(dz, W), dW, db

    def gelu(self, x: np.ndarray) -> np.ndarray:
        # tanh 근사
        return 0.5 * x * (1.0 + np.tanh(GELU_K * (x + 0.044715 * x ** 3)))

    def gelu_grad(self, x: np.ndarray) -> np.ndarray:
        t = np.tanh(GELU_K * (x + 0.044715 * x ** 3))
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3 * 0.044715 * x * x)

    # ------------------------------------------------------------------
    # 초기화
    # ------------------------------------------------------------------

    def init_block(self, cfg: BlockConfig, index: int, rng: Rng, dtype) -> Tuple[Params, Params]:
        H, P = cfg.model_dim, cfg.positional_dim
        F = H + P
        prefix = f"blocks.{index}"
        params: Params = {
            f"{prefix}.bn.gamma": np.ones(F, dtype=dtype),
            f"{prefix}.bn.beta": np.zeros(F, dtype=dtype),
        }
        state: Params = {
            f"{prefix}.bn.running_mean": np.zeros(F, dtype=dtype),
            f"{prefix}.bn.running_var": np.ones(F, dtype=dtype),
        }
        if cfg.cell_kind == "lru" and P > 0:
            self.logger.warning(f"블록 {index}: LRU 셀은 위치 인코딩 열을 사용하지 않음")
        directions = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
        for kind, n, out in cell_layout(cfg):
            for direction in directions:
                cell = f"{prefix}.{kind}.{direction}"
                if kind == "bmru":
                    p = bmru_service.init_params(rng, n, F, alpha_surr=cfg.alpha_surr, dtype=dtype)
                    params.update({f"{cell}.{k}": v for k, v in p.as_dict().items()})
                    params[f"{cell}.W_o"] = numerics.init_glorot_uniform(rng, n, out, dtype)
                    params[f"{cell}.b_o"] = np.zeros(out, dtype=dtype)
                else:
                    p = lru_service.init_params(rng, n, H, out, cfg.r_min, cfg.r_max, cfg.theta_max, dtype=dtype)
                    params.update({f"{cell}.{k}": v for k, v in p.as_dict().items()})
            if cfg.bidirectional:
                params[f"{prefix}.{kind}.merge.W"] = numerics.init_glorot_uniform(rng, 2 * out, out, dtype)
                params[f"{prefix}.{kind}.merge.b"] = np.zeros(out, dtype=dtype)
        params[f"{prefix}.glu.W"] = numerics.init_glorot_uniform(rng, H, 2 * H, dtype)
        params[f"{prefix}.glu.b"] = np.zeros(2 * H, dtype=dtype)
        return params, state

    def init_network(self, cfg: NetworkConfig, seed: int, dtype=None) -> Tuple[Params, Params]:
        """네트워크 파라미터와 배치 정규화 통계를 이름 -> 배열 딕셔너리로 초기화합니다."""
        dtype = np.dtype(dtype or numerics.dtype)
        rng = numerics.rng(seed, "init")
        H = cfg.model_dim
        params: Params = {
            "input.W": numerics.init_glorot_uniform(rng, cfg.input_dim, H, dtype),
            "input.b": np.zeros(H, dtype=dtype),
        }
        state: Params = {}
        for i, block in enumerate(cfg.blocks):
            p, s = self.init_block(block, i, rng, dtype)
            params.update(p)
            state.update(s)
        for j in range(cfg.head_layers):
            out = cfg.output_dim if j == cfg.head_layers - 1 else H
            params[f"head.{j}.W"] = numerics.init_glorot_uniform(rng, H, out, dtype)
            params[f"head.{j}.b"] = np.zeros(out, dtype=dtype)
        self.logger.info(f"네트워크 초기화 완료 - 블록 {len(cfg.blocks)}개, 파라미터 {self.count_parameters(params)}개")
        return params, state

    def count_parameters(self, params: Params) -> int:
        return int(sum(v.size for v in params.values()))

    # ------------------------------------------------------------------
    # 셀 실행
    # ------------------------------------------------------------------

    def _cell_forward(self, kind: str, cell_params: Dict[str, np.ndarray], cfg: BlockConfig,
                      x: np.ndarray, chunk: Optional[int]) -> Tuple[np.ndarray, Dict[str, Any]]:
        if kind == "bmru":
            p = BmruParams.from_dict(cell_params, alpha_surr=cfg.alpha_surr)
            cache = bmru_service.forward(p, x, chunk=chunk)
            out = numerics.matmul(cache.h, cell_params["W_o"].T) + cell_params["b_o"]
            return out, {"p": p, "cache": cache, "x": x, "h": cache.h}
        p = LruParams.from_dict(cell_params)
        h, y, cache = lru_service.forward(p, x, chunk=chunk)
        return y, {"p": p, "cache": cache, "x": x, "h": h}

    def _cell_backward(self, kind: str, cell_params: Dict[str, np.ndarray], c: Dict[str, Any],
                       dout: np.ndarray, chunk: Optional[int]) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        if kind == "bmru":
            h = c["h"]
            grads = {
                "W_o": numerics.matmul(_flat(dout).T, _flat(h)),
                "b_o": _flat(dout).sum(axis=0),
            }
            dh = numerics.matmul(dout, cell_params["W_o"])
            g = bmru_service.backward(c["p"], c["cache"], c["x"], dh, chunk=chunk)
            grads.update(g.as_dict())
            return g.dL_dx, grads
        g = lru_service.backward(c["p"], c["cache"], dout, chunk=chunk)
        return g.dL_dx, dict(g.params)

    @staticmethod
    def _cell_input(kind: str, cfg: BlockConfig, x_norm: np.ndarray) -> np.ndarray:
        # 위치 인코딩 열은 BMRU 셀에만 전달
        if kind == "lru" and cfg.positional_dim > 0:
            return np.ascontiguousarray(x_norm[..., :cfg.model_dim])
        return x_norm

    def _run_cell(self, kind: str, prefix: str, params: Params, cfg: BlockConfig,
                  x: np.ndarray, chunk: Optional[int]) -> Tuple[np.ndarray, Dict[str, Any]]:
        fwd_out, fwd = self._cell_forward(kind, _sub(params, f"{prefix}.fwd"), cfg, x, chunk)
        if not cfg.bidirectional:
            return fwd_out, {"fwd": fwd}
        bwd_rev, bwd = self._cell_forward(kind, _sub(params, f"{prefix}.bwd"), cfg, x[..., ::-1, :], chunk)
        both = np.concatenate([fwd_out, bwd_rev[..., ::-1, :]], axis=-1)
        out = numerics.matmul(both, params[f"{prefix}.merge.W"].T) + params[f"{prefix}.merge.b"]
        return out, {"fwd": fwd, "bwd": bwd, "both": both}

    def _run_cell_backward(self, kind: str, prefix: str, params: Params, cfg: BlockConfig,
                           c: Dict[str, Any], dout: np.ndarray, grads: Params, chunk: Optional[int]) -> np.ndarray:
        if cfg.bidirectional:
            W = params[f"{prefix}.merge.W"]
            _put(grads, f"{prefix}.merge", {
                "W": numerics.matmul(_flat(dout).T, _flat(c["both"])),
                "b": _flat(dout).sum(axis=0),
            })
            dboth = numerics.matmul(dout, W)
            out_c = W.shape[0]
            d_fwd, d_bwd = dboth[..., :out_c], dboth[..., out_c:]
            dx_b, g_b = self._cell_backward(kind, _sub(params, f"{prefix}.bwd"), c["bwd"],
                                            np.ascontiguousarray(d_bwd[..., ::-1, :]), chunk)
            _put(grads, f"{prefix}.bwd", g_b)
            dx = dx_b[..., ::-1, :]
        else:
            d_fwd, dx = dout, 0.0
        dx_f, g_f = self._cell_backward(kind, _sub(params, f"{prefix}.fwd"), c["fwd"], d_fwd, chunk)
        _put(grads, f"{prefix}.fwd", g_f)
        return dx_f + dx

    # ------------------------------------------------------------------
    # 블록 / 네트워크
    # ------------------------------------------------------------------

    def block_forward(self, cfg: BlockConfig, index: int, params: Params, state: Params,
                      x: np.ndarray, mode: str, chunk: Optional[int] = None) -> Tuple[np.ndarray, Params, BlockCache]:
        """out = x + GLU(cell(batch_norm(x ++ positional))) 를 계산합니다."""
        if x.ndim != 3 or x.shape[-1] != cfg.model_dim:
            raise ShapeMismatchError(f"block {index} expects [B, T, {cfg.model_dim}], got {x.shape}")
        prefix = f"blocks.{index}"
        B, T, _ = x.shape
        xin = x
        if cfg.positional_dim > 0:
            pe = self.positional_encoding(T, cfg.positional_dim, x.dtype)
            xin = np.concatenate([x, np.broadcast_to(pe, (B, T, cfg.positional_dim))], axis=-1)
        x_norm, (rm, rv), bn_cache = self.batch_norm_forward(
            xin, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"],
            state[f"{prefix}.bn.running_mean"], state[f"{prefix}.bn.running_var"], mode)
        new_state = {f"{prefix}.bn.running_mean": rm, f"{prefix}.bn.running_var": rv}

        outs, cells = [], []
        for kind, _, _ in cell_layout(cfg):
            cell_in = self._cell_input(kind, cfg, x_norm)
            out, c = self._run_cell(kind, f"{prefix}.{kind}", params, cfg, cell_in, chunk)
            outs.append(out)
            cells.append(c)
        cell_out = np.concatenate(outs, axis=-1) if len(outs) > 1 else outs[0]
        g, glu_cache = self.glu_forward(cell_out.astype(x.dtype), params[f"{prefix}.glu.W"], params[f"{prefix}.glu.b"])
        return x + g, new_state, BlockCache(x=x, x_norm=x_norm, bn=bn_cache, cells=cells, glu=glu_cache)

    def block_backward(self, cfg: BlockConfig, index: int, params: Params, cache: BlockCache,
                       dout: np.ndarray, grads: Params, chunk: Optional[int] = None) -> np.ndarray:
        prefix = f"blocks.{index}"
        dcell, dW, db = self.glu_backward(dout, params[f"{prefix}.glu.W"], cache.glu)
        _put(grads, f"{prefix}.glu", {"W": dW, "b": db})

        dx_norm = np.zeros_like(cache.x_norm)
        start = 0
        for (kind, _, out_dim), c in zip(cell_layout(cfg), cache.cells):
            d = np.ascontiguousarray(dcell[..., start:start + out_dim])
            start += out_dim
            dx_cell = self._run_cell_backward(kind, f"{prefix}.{kind}", params, cfg, c, d, grads, chunk)
            dx_norm[..., :dx_cell.shape[-1]] += dx_cell

        dxin, dgamma, dbeta = self.batch_norm_backward(dx_norm, cache.bn)
        _put(grads, f"{prefix}.bn", {"gamma": dgamma, "beta": dbeta})
        # 스킵 경로 + 정규화 경로 (위치 인코딩 열은 상수)
        return dout + dxin[..., :cfg.model_dim]

    def network_forward(self, cfg: NetworkConfig, params: Params, state: Params, x: np.ndarray,
                        mode: str = "eval", chunk: Optional[int] = None) -> Tuple[np.ndarray, Params, NetworkCache]:
        """입력 투영 -> 블록 -> 풀링 -> 헤드 순으로 예측 [B, output_dim] 을 계산합니다."""
        if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
            raise ShapeMismatchError(f"network expects [B, T, {cfg.input_dim}], got {x.shape}")
        dtype = params["input.W"].dtype
        x = x.astype(dtype, copy=False)
        cache = NetworkCache(x=x, pool_T=x.shape[1])
        z = (numerics.matmul(x, params["input.W"].T) + params["input.b"]).astype(dtype)
        new_state = dict(state)
        for i, block in enumerate(cfg.blocks):
            z, s, bc = self.block_forward(block, i, params, state, z, mode, chunk)
            new_state.update(s)
            cache.blocks.append(bc)

        pooled = z[:, -1, :] if cfg.pooling == "last_timestep" else z.mean(axis=1)
        cache.pooled = pooled
        a = pooled
        for j in range(cfg.head_layers):
            pre = numerics.matmul(a, params[f"head.{j}.W"].T) + params[f"head.{j}.b"]
            cache.head.append({"a": a, "pre": pre})
            a = self.gelu(pre) if j < cfg.head_layers - 1 else pre
        return a.astype(dtype), new_state, cache

    def network_backward(self, cfg: NetworkConfig, params: Params, cache: NetworkCache,
                         dL_dpred: np.ndarray, chunk: Optional[int] = None) -> Tuple[Params, np.ndarray]:
        """모든 파라미터의 기울기와 입력 기울기를 반환합니다."""
        grads: Params = {}
        d = dL_dpred
        for j in reversed(range(cfg.head_layers)):
            hc = cache.head[j]
            if j < cfg.head_layers - 1:
                d = d * self.gelu_grad(hc["pre"])
            grads[f"head.{j}.W"] = numerics.matmul(d.T, hc["a"])
            grads[f"head.{j}.b"] = d.sum(axis=0)
            d = numerics.matmul(d, params[f"head.{j}.W"])

        B, T = cache.x.shape[0], cache.pool_T
        dz = np.zeros((B, T, cfg.model_dim), dtype=d.dtype)
        if cfg.pooling == "last_timestep":
            dz[:, -1, :] = d
        else:
            dz[:] = d[:, None, :] / T

        for i in reversed(range(len(cfg.blocks))):
            dz = self.block_backward(cfg.blocks[i], i, params, cache.blocks[i], dz, grads, chunk)

        x2 = _flat(cache.x)
        grads["input.W"] = numerics.matmul(_flat(dz).T, x2)
        grads["input.b"] = _flat(dz).sum(axis=0)
        dx = numerics.matmul(dz, params["input.W"])
        grads = {k: np.asarray(grads[k]).astype(params[k].dtype) for k in params}
        return grads, dx


# 전역 모델 서비스 인스턴스
model_service = ModelService()
