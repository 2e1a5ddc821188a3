import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from config.settings import settings
from schemas.errors import ShapeMismatchError
from schemas.models import ScanStats


@dataclass(frozen=True)
class ScanElement:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if np.shape(self.a) != np.shape(self.b):
            raise ShapeMismatchError(f"scan element a{np.shape(self.a)} and b{np.shape(self.b)} differ")


@dataclass(frozen=True)
class RecurrenceTape:
    """h_t = a_t * h_{t-1} + b_t (t = 0..T-1, h_{-1} = h0) 를 나타내는 테이프입니다."""

    a: np.ndarray  # [T, *state]
    b: np.ndarray  # [T, *state]
    h0: np.ndarray  # [*state]

    def __post_init__(self):
        if self.a.shape != self.b.shape:
            raise ShapeMismatchError(f"tape multipliers {self.a.shape} and offsets {self.b.shape} differ")
        if self.a.ndim < 1 or self.a.shape[0] < 1:
            raise ShapeMismatchError("tape needs at least one element")
        if np.shape(self.h0) != self.a.shape[1:]:
            raise ShapeMismatchError(f"h0 {np.shape(self.h0)} does not match state {self.a.shape[1:]}")

    @property
    def length(self) -> int:
        return self.a.shape[0]

    @property
    def dtype(self):
        return np.result_type(self.a.dtype, self.b.dtype, np.asarray(self.h0).dtype)

    def element(self, t: int) -> ScanElement:
        return ScanElement(self.a[t], self.b[t])


def _combine(la, lb, ra, rb):
    # (left ⊛ right) = (l.a * r.a, r.a * l.b + r.b)
    return la * ra, ra * lb + rb


def _brent_kung_schedule(n: int) -> List[Tuple[int, int]]:
    """작업 효율적 포함 스캔의 (from, to) 결합 순서를 만듭니다. 결합 횟수는 2n 미만입니다."""
    levels = []
    skip = 1
    while 2 * skip - 1 < n:
        levels.append([(i, i + skip) for i in range(skip - 1, n - skip, 2 * skip)])
        skip *= 2
    while skip > 0 and 3 * skip > n:
        skip //= 2
    while skip >= 1:
        levels.append([(i, i + skip) for i in range(2 * skip - 1, n - skip, 2 * skip)])
        skip //= 2
    return [pair for level in levels for pair in level]


class ScanService:
    def __init__(self, threads: Optional[int] = None, chunk: Optional[int] = None):
        self.logger = logging.getLogger(__name__)
        self.threads = max(1, threads or settings.THREADS)
        self.chunk = chunk or settings.SCAN_CHUNK
        self.last_stats = ScanStats()
        self._lock = threading.Lock()
        self._pools: Dict[int, ThreadPoolExecutor] = {}

    def _pool(self, threads: int) -> ThreadPoolExecutor:
        """스레드 수별 실행기를 서비스 수명 동안 재사용합니다."""
        with self._lock:
            pool = self._pools.get(threads)
            if pool is None:
                pool = ThreadPoolExecutor(max_workers=threads, thread_name_prefix="scan")
                self._pools[threads] = pool
            return pool

    def shutdown(self):
        with self._lock:
            pools, self._pools = list(self._pools.values()), {}
        for pool in pools:
            pool.shutdown(wait=True)

    def combine(self, left: ScanElement, right: ScanElement) -> ScanElement:
        """두 원소를 결합 연산자로 합칩니다 (left가 시간상 앞)."""
        if np.shape(left.a) != np.shape(right.a):
            raise ShapeMismatchError(f"cannot combine {np.shape(left.a)} with {np.shape(right.a)}")
        a, b = _combine(left.a, left.b, right.a, right.b)
        return ScanElement(a, b)

    def scan_sequential(self, tape: RecurrenceTape) -> np.ndarray:
        """순차 루프로 모든 h_t를 계산합니다. 병렬 스캔의 기준(오라클)입니다."""
        out = np.empty(tape.a.shape, dtype=tape.dtype)
        h = np.asarray(tape.h0, dtype=tape.dtype)
        for t in range(tape.length):
            h = tape.a[t] * h + tape.b[t]
            out[t] = h
        return out

    def _scan_chunk(self, a: np.ndarray, b: np.ndarray, h_init: np.ndarray, dtype) -> Tuple[np.ndarray, np.ndarray]:
        out = np.empty(a.shape, dtype=dtype)
        prod = np.empty(a.shape, dtype=dtype)
        h = np.asarray(h_init, dtype=dtype)
        p = np.ones(a.shape[1:], dtype=dtype)
        for t in range(a.shape[0]):
            h = a[t] * h + b[t]
            p = p * a[t]
            out[t] = h
            prod[t] = p
        return prod, out

    def scan_parallel(self, tape: RecurrenceTape, chunk: Optional[int] = None, threads: Optional[int] = None) -> np.ndarray:
        """청크 단위 2-패스 병렬 스캔입니다. 결과는 scan_sequential과 같습니다."""
        chunk = chunk or self.chunk
        if chunk < 1:
            raise ValueError("chunk must be >= 1")
        threads = max(1, threads or self.threads)
        T = tape.length
        dtype = tape.dtype

        if chunk >= T:
            with self._lock:
                self.last_stats = ScanStats(combine_calls=0, chunks=1)
            return self.scan_sequential(tape)

        bounds = [(s, min(s + chunk, T)) for s in range(0, T, chunk)]
        zeros = np.zeros(tape.a.shape[1:], dtype=dtype)

        # 1단계: 청크 내부 순차 스캔 (첫 청크만 h0에서 시작)
        def local(k):
            s, e = bounds[k]
            return self._scan_chunk(tape.a[s:e], tape.b[s:e], tape.h0 if k == 0 else zeros, dtype)

        pool = self._pool(threads)
        locals_ = list(pool.map(local, range(len(bounds))))

        # 2단계: 청크 요약을 결합 연산자로 스캔
        # 첫 청크 요약은 (0, h_end)로 두어 이후 원소에 h0 이력을 전달
        summaries = [(np.zeros_like(zeros), locals_[0][1][-1])]
        summaries += [(prod[-1], out[-1]) for prod, out in locals_[1:]]
        combine_calls = 0
        for src, dst in _brent_kung_schedule(len(summaries)):
            summaries[dst] = _combine(*summaries[src], *summaries[dst])
            combine_calls += 1

        # 3단계: 각 청크를 앞선 누적값으로 보정
        def fix(k):
            prod, out = locals_[k]
            if k == 0:
                return out
            carry = summaries[k - 1][1]
            return prod * carry + out

        parts = list(pool.map(fix, range(len(bounds))))

        with self._lock:
            self.last_stats = ScanStats(combine_calls=combine_calls, chunks=len(bounds))
        return np.concatenate(parts, axis=0).astype(dtype, copy=False)

    def scan_backward(self, tape: RecurrenceTape, h: np.ndarray, dL_dh: np.ndarray,
                      chunk: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """역방향 수반 재귀를 시간 역순 병렬 스캔으로 계산합니다.

        g_t = dL_dh_t + conj(a_{t+1}) * g_{t+1}
        dL_db_t = g_t, dL_da_t = g_t * conj(h_{t-1}), dL_dh0 = conj(a_0) * g_0
        """
        if h.shape != tape.a.shape or dL_dh.shape != tape.a.shape:
            raise ShapeMismatchError(f"h {h.shape} / dL_dh {dL_dh.shape} do not match tape {tape.a.shape}")
        dtype = np.result_type(tape.dtype, dL_dh.dtype)
        a_next = np.zeros(tape.a.shape, dtype=dtype)
        a_next[:-1] = np.conj(tape.a[1:])
        reversed_tape = RecurrenceTape(
            a=np.ascontiguousarray(a_next[::-1]),
            b=np.ascontiguousarray(dL_dh[::-1].astype(dtype)),
            h0=np.zeros(tape.a.shape[1:], dtype=dtype),
        )
        g = self.scan_parallel(reversed_tape, chunk=chunk)[::-1]
        h_prev = np.concatenate([np.asarray(tape.h0, dtype=h.dtype)[None], h[:-1]], axis=0)
        dL_da = g * np.conj(h_prev)
        dL_db = np.ascontiguousarray(g)
        dL_dh0 = np.conj(tape.a[0]) * g[0]
        return dL_da, dL_db, dL_dh0


# 전역 스캔 서비스 인스턴스
scan_service = ScanService()
