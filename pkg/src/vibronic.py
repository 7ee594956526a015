"""
振动电子模型核心模块
坐标约定、模型参数以及 JT (2x2) / PJT (3x3) 复对称非绝热势矩阵的构造

态顺序固定为 (A, Ex, Ey)，JT 模型为 (Ex, Ey)。能量单位 Hartree，坐标为无量纲质量加权简正坐标。
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from errors import DomainError, UnsupportedRegionError


# 键长位移到简正坐标的变换常数 f (a0^-1)，对称伸缩模 Qs 冻结
F_CONST = 2.639255

TWO_PI = 2.0 * math.pi


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise DomainError(f"输入必须是有限值: {values}")


@dataclass(frozen=True)
class NuclearCoords:
    """对称破缺位移 (Qx, Qy)，极坐标 (rho, phi) 由其导出"""
    qx: float
    qy: float

    def __post_init__(self):
        _check_finite(self.qx, self.qy)
        object.__setattr__(self, 'qx', float(self.qx))
        object.__setattr__(self, 'qy', float(self.qy))

    @property
    def rho(self) -> float:
        return math.hypot(self.qx, self.qy)

    @property
    def phi(self) -> float:
        """[0, 2π) 内的角度，rho=0 时为 0"""
        if self.qx == 0.0 and self.qy == 0.0:
            return 0.0
        phi = math.atan2(self.qy, self.qx)
        if phi < 0.0:
            phi += TWO_PI
        if phi >= TWO_PI:
            phi -= TWO_PI
        return phi

    @classmethod
    def from_polar(cls, rho: float, phi: float) -> 'NuclearCoords':
        _check_finite(rho, phi)
        if rho < 0:
            raise DomainError(f"rho 不能为负: {rho}")
        return cls(rho * math.cos(phi), rho * math.sin(phi))

    @classmethod
    def from_bonds(cls, dr1: float, dr2: float, dr3: float) -> 'NuclearCoords':
        """由三个键长位移 (a0) 计算"""
        _check_finite(dr1, dr2, dr3)
        qx = F_CONST / math.sqrt(3.0) * (2.0 * dr1 - dr2 - dr3)
        qy = F_CONST * (dr2 - dr3)
        return cls(qx, qy)

    def shifted(self, dqx: float, dqy: float) -> 'NuclearCoords':
        return NuclearCoords(self.qx + dqx, self.qy + dqy)

    def as_tuple(self) -> Tuple[float, float]:
        return (self.qx, self.qy)


def convert_coords(cartesian: Optional[Tuple[float, float]] = None,
                   polar: Optional[Tuple[float, float]] = None,
                   bonds: Optional[Tuple[float, float, float]] = None) -> NuclearCoords:
    """
    统一的坐标入口，三种输入形式只能给出一种

    Args:
        cartesian: (qx, qy)
        polar: (rho, phi)，phi 为弧度
        bonds: (Δr1, Δr2, Δr3)，单位 a0
    """
    given = [x is not None for x in (cartesian, polar, bonds)]
    if sum(given) != 1:
        raise DomainError("必须且只能给出一种坐标形式")
    if cartesian is not None:
        return NuclearCoords(*cartesian)
    if polar is not None:
        return NuclearCoords.from_polar(*polar)
    return NuclearCoords.from_bonds(*bonds)


def _as_complex(value, name: str) -> complex:
    try:
        c = complex(value)
    except (TypeError, ValueError):
        raise DomainError(f"参数 {name} 不是复数: {value!r}")
    if not (math.isfinite(c.real) and math.isfinite(c.imag)):
        raise DomainError(f"参数 {name} 必须有限: {value!r}")
    return c


@dataclass(frozen=True)
class PJTParams:
    """(E+A)⊗e 赝 Jahn-Teller 模型的复参数（Hartree）"""
    eps_E: complex
    eps_A: complex
    omega: complex
    k: complex
    g: complex
    alpha: complex
    beta: Optional[complex] = None
    nu: Optional[complex] = None
    mu: Optional[complex] = None
    order: int = 2

    def __post_init__(self):
        for name in ('eps_E', 'eps_A', 'omega', 'k', 'g', 'alpha'):
            object.__setattr__(self, name, _as_complex(getattr(self, name), name))
        third = [getattr(self, n) for n in ('beta', 'nu', 'mu')]
        if self.order == 2:
            if any(v is not None for v in third):
                raise DomainError("二阶模型不能带 beta/nu/mu")
        elif self.order == 3:
            if any(v is None for v in third):
                raise DomainError("三阶模型需要 beta、nu、mu 全部给出")
            for name in ('beta', 'nu', 'mu'):
                object.__setattr__(self, name, _as_complex(getattr(self, name), name))
        else:
            raise DomainError(f"order 只能是 2 或 3: {self.order}")

    @property
    def dim(self) -> int:
        return 3

    def names(self) -> Tuple[str, ...]:
        base = ('eps_E', 'eps_A', 'omega', 'k', 'g', 'alpha')
        return base + ('beta', 'nu', 'mu') if self.order == 3 else base

    def values(self) -> Tuple[complex, ...]:
        return tuple(getattr(self, n) for n in self.names())

    def real_part(self) -> 'PJTParams':
        """束缚态极限：去掉全部虚部"""
        kw = {n: complex(getattr(self, n).real) for n in self.names()}
        return PJTParams(order=self.order, **kw)


@dataclass(frozen=True)
class JTParams:
    """E⊗e Jahn-Teller 模型（PJT 中 alpha=0、去掉 A 态的极限）"""
    eps_E: complex
    omega: complex
    k: complex
    g: complex

    def __post_init__(self):
        for name in self.names():
            object.__setattr__(self, name, _as_complex(getattr(self, name), name))

    @property
    def dim(self) -> int:
        return 2

    @property
    def order(self) -> int:
        return 2

    def names(self) -> Tuple[str, ...]:
        return ('eps_E', 'omega', 'k', 'g')

    def values(self) -> Tuple[complex, ...]:
        return tuple(getattr(self, n) for n in self.names())


ModelParams = Union[PJTParams, JTParams]


def model_name(params: ModelParams) -> str:
    return 'pjt' if isinstance(params, PJTParams) else 'jt'


def params_from_values(template: ModelParams, values) -> ModelParams:
    """按 template 的参数名顺序重建参数对象"""
    kw = dict(zip(template.names(), values))
    if isinstance(template, PJTParams):
        return PJTParams(order=template.order, **kw)
    return JTParams(**kw)


@dataclass(frozen=True)
class DiabaticMatrix:
    """固定几何下的复对称非绝热势矩阵"""
    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=complex)
        entries.setflags(write=False)
        object.__setattr__(self, 'entries', entries)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def labels(self) -> Tuple[str, ...]:
        return ('A', 'Ex', 'Ey') if self.dim == 3 else ('Ex', 'Ey')


def coupling_matrices(Q: NuclearCoords) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    返回 (J_k, J_g, J_alpha) 三个 3x3 实对称耦合矩阵

    直接用 qx、qy 写出：rho cos(phi)=qx, rho sin(phi)=qy,
    rho^2 cos(2phi)=qx^2-qy^2, rho^2 sin(2phi)=2 qx qy
    """
    x, y = Q.qx, Q.qy
    c2 = x * x - y * y
    s2 = 2.0 * x * y
    jk = np.array([[0.0, 0.0, 0.0],
                   [0.0, x, y],
                   [0.0, y, -x]])
    jg = np.array([[0.0, 0.0, 0.0],
                   [0.0, c2, -s2],
                   [0.0, -s2, -c2]])
    ja = np.array([[0.0, x, -y],
                   [x, 0.0, 0.0],
                   [-y, 0.0, 0.0]])
    return jk, jg, ja


def _pjt_stack(p: PJTParams, qx, qy) -> np.ndarray:
    """向量化构造 (..., 3, 3) 矩阵"""
    qx = np.asarray(qx, dtype=float)
    qy = np.asarray(qy, dtype=float)
    if p.order == 3 and np.any(qy != 0.0):
        raise UnsupportedRegionError("三阶 PJT 项只在 Qy=0 切片上实现",
                                     {'max_abs_qy': float(np.max(np.abs(qy)))})
    rho2 = qx * qx + qy * qy
    c2 = qx * qx - qy * qy
    s2 = 2.0 * qx * qy
    harm = 0.5 * p.omega * rho2
    m = np.zeros(qx.shape + (3, 3), dtype=complex)
    m[..., 0, 0] = p.eps_A + harm
    m[..., 1, 1] = p.eps_E + harm + p.k * qx + p.g * c2
    m[..., 2, 2] = p.eps_E + harm - p.k * qx - p.g * c2
    m[..., 1, 2] = p.k * qy - p.g * s2
    m[..., 0, 1] = p.alpha * qx
    m[..., 0, 2] = -p.alpha * qy
    if p.order == 3:
        # 切片重构：对角 +nu Qx^3，E 块 ±mu Qx^3，A-Ex 耦合 alpha Qx + beta Qx^2
        cube = qx ** 3
        m[..., 0, 0] += p.nu * cube
        m[..., 1, 1] += p.nu * cube + p.mu * cube
        m[..., 2, 2] += p.nu * cube - p.mu * cube
        m[..., 0, 1] += p.beta * qx * qx
    m[..., 1, 0] = m[..., 0, 1]
    m[..., 2, 0] = m[..., 0, 2]
    m[..., 2, 1] = m[..., 1, 2]
    return m


def _jt_stack(p: JTParams, qx, qy) -> np.ndarray:
    qx = np.asarray(qx, dtype=float)
    qy = np.asarray(qy, dtype=float)
    rho2 = qx * qx + qy * qy
    c2 = qx * qx - qy * qy
    s2 = 2.0 * qx * qy
    diag = p.eps_E + 0.5 * p.omega * rho2
    m = np.zeros(qx.shape + (2, 2), dtype=complex)
    m[..., 0, 0] = diag + p.k * qx + p.g * c2
    m[..., 1, 1] = diag - p.k * qx - p.g * c2
    m[..., 0, 1] = p.k * qy - p.g * s2
    m[..., 1, 0] = m[..., 0, 1]
    return m


def diabatic_stack(params: ModelParams, qx, qy) -> np.ndarray:
    """任意形状网格上的非绝热矩阵，返回 (..., N, N)"""
    if isinstance(params, PJTParams):
        return _pjt_stack(params, qx, qy)
    return _jt_stack(params, qx, qy)


def build_pjt_diabatic(p: PJTParams, Q: NuclearCoords) -> DiabaticMatrix:
    """3x3 PJT 非绝热势 (ε_n + ½ω ρ²)δ_nm + k J^k + g J^g + α J^α"""
    return DiabaticMatrix(_pjt_stack(p, Q.qx, Q.qy))


def build_jt_diabatic(p: JTParams, Q: NuclearCoords) -> DiabaticMatrix:
    """2x2 JT 非绝热势，即 PJT 矩阵的 E 块"""
    return DiabaticMatrix(_jt_stack(p, Q.qx, Q.qy))


def build_diabatic(params: ModelParams, Q: NuclearCoords) -> DiabaticMatrix:
    if isinstance(params, PJTParams):
        return build_pjt_diabatic(params, Q)
    return build_jt_diabatic(params, Q)


def gamma_matrix(p: PJTParams, Q: NuclearCoords) -> np.ndarray:
    """非绝热宽度矩阵 Γ = -2 Im(V^d)"""
    return -2.0 * build_pjt_diabatic(p, Q).entries.imag


def diabatic_gradient(params: ModelParams, Q: NuclearCoords) -> Tuple[np.ndarray, np.ndarray]:
    """∂V/∂Qx 与 ∂V/∂Qy（解析）"""
    if isinstance(params, PJTParams) and params.order == 3:
        raise UnsupportedRegionError("三阶模型的角向形式未知，无法求 Qy 方向导数")
    x, y = Q.qx, Q.qy
    n = params.dim
    dx = np.zeros((n, n), dtype=complex)
    dy = np.zeros((n, n), dtype=complex)
    e = 1 if n == 3 else 0  # Ex 的下标
    w = params.omega
    for i in range(n):
        dx[i, i] = w * x
        dy[i, i] = w * y
    # E 块：k(x, y; y, -x) + g(x²-y², -2xy; -2xy, -(x²-y²))
    dx[e, e] += params.k + 2.0 * params.g * x
    dx[e + 1, e + 1] -= params.k + 2.0 * params.g * x
    dx[e, e + 1] = dx[e + 1, e] = -2.0 * params.g * y
    dy[e, e] += -2.0 * params.g * y
    dy[e + 1, e + 1] -= -2.0 * params.g * y
    dy[e, e + 1] = dy[e + 1, e] = params.k - 2.0 * params.g * x
    if n == 3:
        dx[0, 1] = dx[1, 0] = params.alpha
        dy[0, 2] = dy[2, 0] = -params.alpha
    return dx, dy
