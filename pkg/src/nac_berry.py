"""
非绝热耦合与几何相位模块
JT 解析 NAC、数值 NAC、单值规范平滑、Λ 算子标量项，以及线积分 / 离散和乐两种几何相位
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from config import get_tolerances
from eigen import (
    Eigensystem, PathTrace, eig_complex_symmetric, match_branches, track_along_path,
)
from errors import DomainError, InvalidLoopError, PathRefinementError, SingularityError
from topology import Region, find_exceptional_points, jt_exceptional_points
from vibronic import (
    JTParams, ModelParams, NuclearCoords, PJTParams, TWO_PI, build_diabatic, diabatic_gradient,
)

logger = logging.getLogger(__name__)

RAW = 'raw'
SINGLE_VALUED = 'single_valued'
LINE_INTEGRAL = 'line_integral'
HOLONOMY = 'holonomy'


@dataclass
class NACField:
    """
    一点上的一阶非绝热耦合 F_nm

    F 的形状为 (N, N, 2)，最后一维是坐标分量：
    basis='cartesian' 时为 (q̂x, q̂y)，'polar' 时为 (ρ̂, φ̂)。
    """
    F: np.ndarray
    at: NuclearCoords
    basis: str = 'cartesian'
    gauge: str = SINGLE_VALUED

    def to_polar(self) -> 'NACField':
        if self.basis == 'polar':
            return self
        c, s = math.cos(self.at.phi), math.sin(self.at.phi)
        fx, fy = self.F[..., 0], self.F[..., 1]
        F = np.stack([c * fx + s * fy, -s * fx + c * fy], axis=-1)
        return NACField(F=F, at=self.at, basis='polar', gauge=self.gauge)

    def to_cartesian(self) -> 'NACField':
        if self.basis == 'cartesian':
            return self
        c, s = math.cos(self.at.phi), math.sin(self.at.phi)
        fr, fp = self.F[..., 0], self.F[..., 1]
        F = np.stack([c * fr - s * fp, s * fr + c * fp], axis=-1)
        return NACField(F=F, at=self.at, basis='cartesian', gauge=self.gauge)


@dataclass(frozen=True)
class LoopSpec:
    """逆时针圆形回路，从中心方位角 start_angle 处出发"""
    center: NuclearCoords
    radius: float
    n_points: int = 64
    start_angle: float = 0.0

    def __post_init__(self):
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise DomainError(f"回路半径必须为正: {self.radius}")
        if self.n_points < 16:
            raise DomainError(f"回路点数至少为 16: {self.n_points}")

    def with_points(self, n_points: int) -> 'LoopSpec':
        return LoopSpec(center=self.center, radius=self.radius, n_points=n_points,
                        start_angle=self.start_angle)

    def angles(self, turns: int = 1) -> np.ndarray:
        return self.start_angle + TWO_PI * np.arange(self.n_points * turns + 1) / self.n_points

    def points(self, turns: int = 1) -> List[NuclearCoords]:
        """首尾重合的点列，共 n_points * turns + 1 个点"""
        t = self.angles(turns)
        qx = self.center.qx + self.radius * np.cos(t)
        qy = self.center.qy + self.radius * np.sin(t)
        qx[-1], qy[-1] = qx[0], qy[0]
        return [NuclearCoords(x, y) for x, y in zip(qx, qy)]

    def tangent(self, t: float) -> Tuple[float, float]:
        return (-self.radius * math.sin(t), self.radius * math.cos(t))


@dataclass
class BerryResult:
    tau: float  # 带符号
    method: str
    permutation: Tuple[int, ...]
    n_points: int
    turns: int
    branch: int = 0
    gauge: str = SINGLE_VALUED

    @property
    def magnitude(self) -> float:
        return abs(self.tau)

    def to_dict(self) -> dict:
        return {
            'tau': self.magnitude,
            'tau_signed': self.tau,
            'method': self.method,
            'permutation': list(self.permutation),
            'n_points': self.n_points,
            'turns': self.turns,
            'branch': self.branch,
            'gauge': self.gauge,
        }


def _e_slice(n: int) -> Tuple[int, int]:
    """E 对在态序中的下标"""
    return (1, 2) if n == 3 else (0, 1)


# ---------------------------------------------------------------- JT 解析

def analytic_jt_nac(p: JTParams, Q: NuclearCoords) -> Tuple[np.ndarray, NACField]:
    """
    JT 模型的 ∇θ 与单值规范下的 F^s（ρ̂、φ̂ 分量）

    ∂θ/∂ρ = -kg sin3φ / w
    (1/ρ)∂θ/∂φ = (k² - kgρ cos3φ - 2g²ρ²) / (ρ w)
    F^s = ½ [[-i∇Reθ, ∇θ], [-∇θ, -i∇Reθ]]
    """
    rho, phi = Q.rho, Q.phi
    k, g = p.k, p.g
    if rho == 0.0:
        raise SingularityError("ρ=0 处 NAC 发散（中心交叉点）", {'qx': Q.qx, 'qy': Q.qy})
    c3 = math.cos(3 * phi)
    w = k * k + g * g * rho * rho + 2 * k * g * rho * c3
    if abs(w) <= 1e-14 * max(abs(k), abs(g) * rho) ** 2:
        raise SingularityError("w=0（例外点）处 NAC 发散", {'qx': Q.qx, 'qy': Q.qy, 'rho': rho, 'phi': phi})
    d_rho = -k * g * math.sin(3 * phi) / w
    d_phi = (k * k - k * g * rho * c3 - 2 * g * g * rho * rho) / (rho * w)
    grad = np.array([d_rho, d_phi], dtype=complex)
    diag = -0.5j * grad.real
    F = np.zeros((2, 2, 2), dtype=complex)
    F[0, 0] = F[1, 1] = diag
    F[0, 1] = 0.5 * grad
    F[1, 0] = -0.5 * grad
    return grad, NACField(F=F, at=Q, basis='polar', gauge=SINGLE_VALUED)


# ---------------------------------------------------------------- 规范平滑

def _z(vectors: np.ndarray, branch: int) -> complex:
    i, j = _e_slice(vectors.shape[0])
    return complex(vectors[i, branch] + 1j * vectors[j, branch])


def gauge_smooth(frames: Sequence[np.ndarray], reference_branch: int = 0,
                 threshold: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    把沿路径的双正交标架变成连续、单值的规范

    先逐列对齐符号，再以参考支 E 分量 z = v_Ex + i v_Ey 的展开辐角 χ 为标量相位：
    右标架乘 e^{-iχ}，左标架乘 e^{iχ}，因此 T̃_s T_s = T^T T 不变。

    Returns:
        (right, left, chi)
    """
    threshold = get_tolerances().overlap_threshold if threshold is None else threshold
    frames = [np.array(T, dtype=complex) for T in frames]
    if not frames:
        raise DomainError("标架序列为空")
    for i in range(1, len(frames)):
        prev, cur = frames[i - 1], frames[i]
        for n in range(cur.shape[1]):
            ov = prev[:, n] @ cur[:, n]
            if abs(ov) < threshold:
                raise PathRefinementError(f"第 {i} 段标架重叠过小 {abs(ov):.3f}", segment=(i - 1, i))
            if ov.real < 0:
                cur[:, n] = -cur[:, n]
    chi = np.unwrap(np.array([np.angle(_z(T, reference_branch)) for T in frames]))
    right = np.array([np.exp(-1j * c) * T for c, T in zip(chi, frames)])
    left = np.array([np.exp(1j * c) * T.T for c, T in zip(chi, frames)])
    return right, left, chi


# ---------------------------------------------------------------- 数值 NAC

def _aligned(params: ModelParams, Q: NuclearCoords, reference: Eigensystem, threshold: float,
             segment) -> Eigensystem:
    es = eig_complex_symmetric(build_diabatic(params, Q), sort=False)
    return match_branches(reference, es, threshold, segment)


def _raw_nac(params: ModelParams, Q: NuclearCoords, center: Eigensystem, h: float,
             threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """F_raw[n, m, d] = v_n^T ∂_d v_m 以及参考支的 ∇χ（χ 取自 gauge_smooth）"""
    n = center.dim
    F = np.zeros((n, n, 2), dtype=complex)
    grad_chi = np.zeros(2)
    for d, (dx, dy) in enumerate(((h, 0.0), (0.0, h))):
        plus = _aligned(params, Q.shifted(dx, dy), center, threshold, ('+', d))
        minus = _aligned(params, Q.shifted(-dx, -dy), center, threshold, ('-', d))
        F[:, :, d] = center.vectors.T @ ((plus.vectors - minus.vectors) / (2 * h))
        _, _, chi = gauge_smooth([minus.vectors, center.vectors, plus.vectors], 0, threshold)
        grad_chi[d] = (chi[2] - chi[0]) / (2 * h)
    return F, grad_chi


def _nac_in_frame(params: ModelParams, Q: NuclearCoords, center: Eigensystem, step: float,
                  richardson: bool, threshold: float, gauge: str = SINGLE_VALUED) -> np.ndarray:
    F, gchi = _raw_nac(params, Q, center, step, threshold)
    if richardson:
        F2, gchi2 = _raw_nac(params, Q, center, step / 2, threshold)
        F = (4 * F2 - F) / 3
        gchi = (4 * gchi2 - gchi) / 3
    if gauge == RAW:
        return F
    eye = np.eye(center.dim)
    return F - 1j * eye[:, :, None] * gchi[None, None, :]


def _check_nac_point(params: ModelParams, Q: NuclearCoords, step: float) -> Eigensystem:
    if Q.rho < 10 * step:
        raise SingularityError("距中心交叉点太近", {'rho': Q.rho, 'min_rho': 10 * step})
    center = eig_complex_symmetric(build_diabatic(params, Q))
    if center.phase_rigidity.min() < 1e-6:
        raise SingularityError("距例外点太近", {'qx': Q.qx, 'qy': Q.qy,
                                                 'rigidity': float(center.phase_rigidity.min())})
    return center


def numeric_nac(params: ModelParams, Q: NuclearCoords, step: Optional[float] = None,
                richardson: bool = False, gauge: str = SINGLE_VALUED) -> NACField:
    """
    中心差分求 F = T^T ∇T；gauge=single_valued 时再加上标量项 -i∇χ

    相邻差分点的本征矢按双线性重叠与中心标架对齐。
    """
    tol = get_tolerances()
    step = tol.nac_step if step is None else step
    center = _check_nac_point(params, Q, step)
    if gauge not in (RAW, SINGLE_VALUED):
        raise DomainError(f"未知规范: {gauge}")
    F = _nac_in_frame(params, Q, center, step, richardson, tol.overlap_threshold, gauge)
    return NACField(F=F, at=Q, basis='cartesian', gauge=gauge)


def lambda_terms(params: ModelParams, Q: NuclearCoords,
                 step: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Λ 算子中不含 ∇ 的两项：FF_nm = Σ_k F_nk·F_km 与 ∇·F_nm

    散度用外层步长 10·step 的中心差分，四个邻点的标架都对齐到中心标架。
    """
    tol = get_tolerances()
    step = tol.nac_step if step is None else step
    center = _check_nac_point(params, Q, step)
    thr = tol.overlap_threshold
    F = _nac_in_frame(params, Q, center, step, False, thr)
    FF = np.einsum('nkd,kmd->nm', F, F)

    H = 10 * step
    div = np.zeros_like(FF)
    for d, (dx, dy) in enumerate(((H, 0.0), (0.0, H))):
        parts = []
        for sgn in (1, -1):
            Qs = Q.shifted(sgn * dx, sgn * dy)
            frame = _aligned(params, Qs, center, thr, ('div', d, sgn))
            parts.append(_nac_in_frame(params, Qs, frame, step, False, thr)[:, :, d])
        div += (parts[0] - parts[1]) / (2 * H)
    return FF, div


# ---------------------------------------------------------------- 几何相位

@lru_cache(maxsize=32)
def _known_degeneracies(params: PJTParams, rho_max: float) -> Tuple[NuclearCoords, ...]:
    """半径 rho_max 以内的数值简并点，按 (参数, 半径) 缓存"""
    return tuple(p.coords for p in find_exceptional_points(params, Region(rho_max=rho_max)))


def _check_loop_geometry(params: ModelParams, loop: LoopSpec, tol):
    """在跟踪之前排除穿过已知简并点的回路"""
    if abs(loop.radius - loop.center.rho) < tol.loop_exclusion:
        raise InvalidLoopError("回路穿过中心交叉点", {'radius': loop.radius})
    if isinstance(params, JTParams):
        if params.g == 0:
            return
        points = [ep.coords for ep in jt_exceptional_points(params)]
    else:
        # 搜索半径取整到 0.2 的倍数，缓存才能在相近回路间复用
        reach = loop.center.rho + loop.radius + tol.loop_exclusion
        points = _known_degeneracies(params, 0.2 * math.ceil(reach / 0.2))
    for Q in points:
        d = abs(math.hypot(Q.qx - loop.center.qx, Q.qy - loop.center.qy) - loop.radius)
        if d < tol.loop_exclusion:
            raise InvalidLoopError("回路穿过简并点", {
                'qx': Q.qx, 'qy': Q.qy, 'rho': Q.rho, 'phi_deg': math.degrees(Q.phi), 'distance': d})


def _validate_loop(trace: PathTrace, tol):
    if trace.rigidity.min() < tol.coalescence_threshold:
        raise InvalidLoopError("回路上有本征矢合并", {'rigidity': float(trace.rigidity.min())})
    values = trace.branch_values
    gaps = [np.abs(values[:, i] - values[:, j]).min()
            for i in range(values.shape[1]) for j in range(i + 1, values.shape[1])]
    if min(gaps) < tol.degeneracy_tol:
        raise InvalidLoopError("回路上本征值简并", {'gap': float(min(gaps))})


def _trace_loop(params: ModelParams, loop: LoopSpec, branch: int, tol) -> Tuple[PathTrace, PathTrace, int]:
    """返回 (单圈轨迹, m 圈轨迹, m)"""
    _check_loop_geometry(params, loop, tol)
    single = track_along_path(params, loop.points(1))
    _validate_loop(single, tol)
    turns = single.cycle_length(branch)
    full = single if turns == 1 else track_along_path(params, loop.points(turns))
    return single, full, turns


def _line_integral(params: ModelParams, loop: LoopSpec, trace: PathTrace, turns: int, branch: int) -> float:
    """∮ χ' dt，χ' = Im(z'/z)，dv_n = Σ_{m≠n} v_m (v_m^T dM v_n)/(λ_n - λ_m)"""
    t = loop.angles(turns)
    rates = np.empty(len(t))
    for i, (Q, ti) in enumerate(zip(trace.points, t)):
        dMx, dMy = diabatic_gradient(params, Q)
        tx, ty = loop.tangent(ti)
        dM = dMx * tx + dMy * ty
        V = trace.branch_vectors[i]
        lam = trace.branch_values[i]
        v = V[:, branch]
        dv = np.zeros_like(v)
        for m in range(len(lam)):
            if m != branch:
                dv += V[:, m] * (V[:, m] @ dM @ v) / (lam[branch] - lam[m])
        rates[i] = (_z(dv[:, None], 0) / _z(V, branch)).imag
    return float(integrate.trapezoid(rates, t))


def _link_phase(vectors: np.ndarray, branch: int) -> float:
    right, left, _ = gauge_smooth(vectors, reference_branch=branch)
    links = np.einsum('in,in->i', left[:-1, branch, :], right[1:, :, branch])
    return -float(np.sum(np.angle(links)))


def _holonomy(trace: PathTrace, branch: int) -> float:
    """
    单值规范标架相邻重叠 ṽ_i^T v_{i+1} 的相位之和，τ = -Σ arg

    每段只贡献 O(1/n) 的小相位，因此和不会被折回 (-π, π]。
    复双线性重叠带 O(h²) 的虚部，累加后是 O(h) 偏差，
    用同一轨迹隔点抽样（步长 2h）的结果做 Richardson 外推消去。
    """
    vectors = trace.branch_vectors
    fine = _link_phase(vectors, branch)
    if (len(vectors) - 1) % 2:
        return fine
    return 2.0 * fine - _link_phase(vectors[::2], branch)


def berry_phase(params: ModelParams, loop: LoopSpec, method: str = LINE_INTEGRAL,
                branch: int = 0) -> BerryResult:
    """
    回路上的几何相位 τ

    branch 在单圈置换下的循环长度 m 决定需要绕的圈数（例外点处 m=2），τ 为 m 圈累积相位除以 m。
    line_integral 对 χ' 用梯形积分，holonomy 累加单值规范下相邻标架重叠的相位；
    两者都成倍加密直到 |Δτ| < berry_tol。

    Raises:
        InvalidLoopError: 回路穿过或贴近简并点
        PathRefinementError: 到 berry_max_points 仍未收敛
    """
    if method not in (LINE_INTEGRAL, HOLONOMY):
        raise DomainError(f"未知方法: {method}")
    tol = get_tolerances()
    n = loop.n_points
    previous: Optional[float] = None
    while True:
        current = loop.with_points(n)
        try:
            single, full, turns = _trace_loop(params, current, branch, tol)
            if method == HOLONOMY:
                tau = _holonomy(full, branch) / turns
            else:
                tau = _line_integral(params, current, full, turns, branch) / turns
        except PathRefinementError as e:
            if 2 * n > tol.berry_max_points:
                raise
            logger.debug(f"[Berry] 分支指派失败 {e.details}，加密到 {2 * n} 点")
            n *= 2
            continue
        if previous is not None and abs(tau - previous) < tol.berry_tol:
            break
        if 2 * n > tol.berry_max_points:
            delta = None if previous is None else abs(tau - previous)
            raise PathRefinementError(f"加密到 {n} 点 τ 仍未收敛", details={
                'n_points': n, 'tau': float(tau), 'delta': delta, 'berry_tol': tol.berry_tol})
        previous = tau
        n *= 2
    logger.info(f"[Berry] {method} τ={tau:.6f} 圈数={turns} 点数={n} 置换={single.permutation}")
    return BerryResult(tau=float(tau), method=method, permutation=single.permutation,
                       n_points=n, turns=turns, branch=branch)
