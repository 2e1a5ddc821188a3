import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Tuple, Union

import numpy as np

from config.settings import settings
from schemas.models import BrcParams, ClockTrace, EquilibriumPoint, ToyCellParams


class ToyCellSystem:
    """h <- (1-c) h + c tanh(x + (beta+1) h) 단순화 셀입니다."""

    def __init__(self, params: ToyCellParams):
        self.params = params

    def step(self, h, x):
        p = self.params
        return (1.0 - p.c) * h + p.c * np.tanh(x + (p.beta + 1.0) * h)

    def residual(self, h, x):
        return np.tanh(x + (self.params.beta + 1.0) * h) - h

    def slope(self, h, x):
        p = self.params
        t = np.tanh(x + (p.beta + 1.0) * h)
        return (1.0 - p.c) + p.c * (p.beta + 1.0) * (1.0 - t * t)


class BrcSystem:
    """BRC 한 스텝 맵과 정상상태 함수입니다."""

    def __init__(self, params: BrcParams):
        self.params = params

    def _gate(self, h, x):
        p = self.params
        return 0.5 * (1.0 + np.tanh(0.5 * (p.U_c * x + p.w_c * h + p.b_c)))

    def _phi(self, h, x):
        p = self.params
        feedback = 1.0 + np.tanh(p.U_a * x + p.w_a * h + p.b_a)
        return np.tanh(p.U_h * x + feedback * h + p.b_h)

    def step(self, h, x):
        c = self._gate(h, x)
        return c * h + (1.0 - c) * self._phi(h, x)

    def residual(self, h, x):
        return self._phi(h, x) - h

    def slope(self, h, x):
        p = self.params
        q = np.tanh(p.U_a * x + p.w_a * h + p.b_a)
        phi = self._phi(h, x)
        dphi = (1.0 - phi * phi) * (1.0 + q + h * (1.0 - q * q) * p.w_a)
        c = self._gate(h, x)
        dc = c * (1.0 - c) * p.w_c
        return c + dc * (h - phi) + (1.0 - c) * dphi


System = Union[ToyCellSystem, BrcSystem]


class DynamicsService:
    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.tol = settings.ROOT_TOL
        self.marginal_tol = settings.MARGINAL_TOL
        self.threads = settings.THREADS

    def default_grid(self) -> np.ndarray:
        return np.linspace(settings.H_GRID_MIN, settings.H_GRID_MAX, settings.H_GRID_POINTS)

    def as_system(self, system) -> System:
        if isinstance(system, ToyCellParams):
            return ToyCellSystem(system)
        if isinstance(system, BrcParams):
            return BrcSystem(system)
        return system

    def simulate_internal_clock(self, system, x: float, h0: float, N: int) -> ClockTrace:
        """내부 클록을 N번 돌려 h~_t[0..N] 궤적을 만듭니다."""
        if N < 1:
            raise ValueError("N must be >= 1")
        system = self.as_system(system)
        values = np.empty(N + 1, dtype=np.float64)
        values[0] = h0
        h = float(h0)
        for n in range(1, N + 1):
            h = float(system.step(h, x))
            values[n] = h
        return ClockTrace(h0=h0, x=x, values=values.tolist())

    def brc_steady_residual(self, p: BrcParams, x: float, h: float) -> float:
        return float(BrcSystem(p).residual(h, x))

    def classify(self, system, x: float, h: float) -> Tuple[bool, bool]:
        """(stable, marginal) 을 반환합니다. |df/dh| < 1 이면 안정입니다."""
        system = self.as_system(system)
        slope = abs(float(system.slope(h, x)))
        marginal = abs(slope - 1.0) <= self.marginal_tol
        return (slope < 1.0 and not marginal), marginal

    def _bisect(self, system: System, x: float, lo: float, hi: float, tol: float) -> float:
        f_lo = system.residual(lo, x)
        mid = 0.5 * (lo + hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            f_mid = system.residual(mid, x)
            if abs(f_mid) <= tol or hi - lo <= 1e-15:
                break
            if np.sign(f_mid) == np.sign(f_lo):
                lo, f_lo = mid, f_mid
            else:
                hi = mid
        return float(mid)

    def solve_steady_states(self, system, x: float, h_grid: Optional[np.ndarray] = None,
                            tol: Optional[float] = None) -> List[EquilibriumPoint]:
        """격자 부호 변화로 근을 가두고 이분법으로 정밀화한 뒤 안정성을 판정합니다."""
        system = self.as_system(system)
        grid = self.default_grid() if h_grid is None else np.asarray(h_grid, dtype=np.float64)
        tol = self.tol if tol is None else tol
        values = system.residual(grid, x)

        roots = []
        for i in range(len(grid)):
            if values[i] == 0.0:
                roots.append(float(grid[i]))
            elif i + 1 < len(grid) and values[i] * values[i + 1] < 0.0:
                roots.append(self._bisect(system, x, float(grid[i]), float(grid[i + 1]), tol))

        if not roots:
            # 연속 함수라 [-2, 2] 안에 근이 있어야 함 - 격자 문제
            self.logger.warning(f"부호 변화 없음 - x={x}, 격자 [{grid[0]}, {grid[-1]}] 확인 필요")

        points = []
        for h in roots:
            stable, marginal = self.classify(system, x, h)
            points.append(EquilibriumPoint(x=float(x), h=h, stable=stable, marginal=marginal))
        return points

    def sweep_bifurcation(self, system, x_range: Tuple[float, float], n_x: int,
                          threads: Optional[int] = None) -> List[EquilibriumPoint]:
        """균일 x 격자에서 정상상태를 모두 구해 (x, h) 순으로 정렬해 반환합니다."""
        if n_x < 2:
            raise ValueError("n_x must be >= 2")
        system = self.as_system(system)
        xs = np.linspace(x_range[0], x_range[1], n_x)
        with ThreadPoolExecutor(max_workers=max(1, threads or self.threads)) as pool:
            per_x = list(pool.map(lambda x: self.solve_steady_states(system, float(x)), xs))
        points = [p for pts in per_x for p in pts]
        return sorted(points, key=lambda p: (p.x, p.h))

    def root_count(self, system, x: float) -> int:
        return len(self.solve_steady_states(system, x))

    def locate_fold(self, system, x_inside: float, x_outside: float, tol: float = 1e-6) -> float:
        """근 개수가 3개에서 1개로 바뀌는 경계 x를 이분법으로 찾습니다."""
        system = self.as_system(system)
        n_in = self.root_count(system, x_inside)
        n_out = self.root_count(system, x_outside)
        if n_in < 3 or n_out != 1:
            raise ValueError(f"no fold between {x_inside} ({n_in} roots) and {x_outside} ({n_out} roots)")
        lo, hi = x_inside, x_outside
        while abs(hi - lo) > tol:
            mid = 0.5 * (lo + hi)
            if self.root_count(system, mid) >= 3:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def approximation_branches(self, x: float, beta: float, alpha: float = 1.0) -> List[EquilibriumPoint]:
        """구간별 근사의 평형점입니다: 안정 ±alpha, 쌍안정 영역의 불안정 경계 h = -x/beta."""
        if beta <= 0:
            raise ValueError("approximation needs beta > 0")
        if abs(x) >= beta:
            h = alpha if x >= 0 else -alpha
            return [EquilibriumPoint(x=x, h=h, stable=True)]
        return [
            EquilibriumPoint(x=x, h=-alpha, stable=True),
            EquilibriumPoint(x=x, h=-x / beta, stable=False),
            EquilibriumPoint(x=x, h=alpha, stable=True),
        ]

    def sweep_approximation(self, x_range: Tuple[float, float], n_x: int, beta: float,
                            alpha: float = 1.0) -> List[EquilibriumPoint]:
        if n_x < 2:
            raise ValueError("n_x must be >= 2")
        xs = np.linspace(x_range[0], x_range[1], n_x)
        return [p for x in xs for p in self.approximation_branches(float(x), beta, alpha)]


# 전역 동역학 서비스 인스턴스
dynamics_service = DynamicsService()
