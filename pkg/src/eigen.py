"""
本征分解模块
复对称矩阵的双正交本征分解、解析绝热势（切片与 JT 二维）以及沿路径的本征支跟踪
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from config import get_tolerances
from errors import ContractViolation, DomainError, PathRefinementError
from vibronic import (
    DiabaticMatrix, JTParams, ModelParams, NuclearCoords, PJTParams, diabatic_stack,
)

logger = logging.getLogger(__name__)


@dataclass
class Eigensystem:
    """
    复对称矩阵的本征系统

    vectors 的第 i 列是 values[i] 的右本征矢；左本征矢即其转置。
    非例外点邻域内满足 T^T T = I（双线性归一化）。
    """
    values: np.ndarray
    vectors: np.ndarray
    phase_rigidity: np.ndarray
    coalesced: np.ndarray  # (N, N) 布尔矩阵，标记合并的本征对

    @property
    def dim(self) -> int:
        return len(self.values)

    @property
    def left(self) -> np.ndarray:
        return self.vectors.T

    @property
    def any_coalesced(self) -> bool:
        return bool(np.any(self.coalesced))

    def closest_pair(self) -> Tuple[int, int]:
        """复平面上距离最近的一对本征值"""
        best, pair = math.inf, (0, 1)
        for i in range(self.dim):
            for j in range(i + 1, self.dim):
                d = abs(self.values[i] - self.values[j])
                if d < best:
                    best, pair = d, (i, j)
        return pair

    def permuted(self, order: Sequence[int]) -> 'Eigensystem':
        order = list(order)
        return Eigensystem(
            values=self.values[order],
            vectors=self.vectors[:, order],
            phase_rigidity=self.phase_rigidity[order],
            coalesced=self.coalesced[np.ix_(order, order)],
        )


def _as_array(M) -> np.ndarray:
    if isinstance(M, DiabaticMatrix):
        return np.array(M.entries, dtype=complex)
    return np.asarray(M, dtype=complex)


def _check_symmetric(a: np.ndarray):
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] not in (2, 3):
        raise ContractViolation(f"只支持 2x2 或 3x3 方阵: {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("矩阵包含非有限值")
    scale = max(1.0, float(np.max(np.abs(a))))
    asym = float(np.max(np.abs(a - a.T)))
    if asym > 1e-14 * scale:
        raise ContractViolation("矩阵不是复对称的", {'asymmetry': asym})


def _eig2(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 闭式解，在例外点处给出严格自正交的本征矢"""
    p, b, d = a[0, 0], a[0, 1], a[1, 1]
    m = 0.5 * (p + d)
    h = 0.5 * (p - d)
    r = np.sqrt(h * h + b * b)
    values = np.array([m - r, m + r])
    vectors = np.zeros((2, 2), dtype=complex)
    if b == 0:
        # 已经对角
        if abs(p - values[0]) <= abs(d - values[0]):
            vectors[:, 0], vectors[:, 1] = (1.0, 0.0), (0.0, 1.0)
        else:
            vectors[:, 0], vectors[:, 1] = (0.0, 1.0), (1.0, 0.0)
        return values, vectors
    for i, lam in enumerate(values):
        v1 = np.array([b, lam - p])
        v2 = np.array([lam - d, b])
        v = v1 if np.linalg.norm(v1) >= np.linalg.norm(v2) else v2
        vectors[:, i] = v / np.linalg.norm(v)
    return values, vectors


def _bilinear_gram_schmidt(block: np.ndarray, threshold: float) -> np.ndarray:
    """简并子空间内按 v^T w 做带主元的 Gram-Schmidt"""
    work = [block[:, j].copy() for j in range(block.shape[1])]
    out = []
    while work:
        norms = [abs(v @ v) / max(np.vdot(v, v).real, 1e-300) for v in work]
        best = int(np.argmax(norms))
        if norms[best] < threshold and len(work) > 1:
            # 全部自正交时取两者之和
            work[0] = work[0] + work[1]
            norms[0] = abs(work[0] @ work[0]) / max(np.vdot(work[0], work[0]).real, 1e-300)
            best = 0
        v = work.pop(best)
        out.append(v)
        if norms[best] < threshold:
            continue
        vv = v @ v
        work = [w - (v @ w) / vv * v for w in work]
        work = [w / np.linalg.norm(w) for w in work if np.linalg.norm(w) > 1e-14]
    while len(out) < block.shape[1]:
        out.append(out[-1])
    return np.column_stack(out)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    idx = int(np.argmax(np.abs(v)))
    if v[idx].real < 0 or (v[idx].real == 0 and v[idx].imag < 0):
        return -v
    return v


def eig_complex_symmetric(M, sort: bool = True,
                          threshold: Optional[float] = None) -> Eigensystem:
    """
    复对称矩阵的双正交本征分解

    Args:
        M: DiabaticMatrix 或 2x2/3x3 复数组
        sort: 按实部升序排列
        threshold: 相位刚性阈值，低于此值视为合并（默认取配置）

    Returns:
        Eigensystem，合并的本征矢保持欧氏归一而不做双线性归一化
    """
    tol = get_tolerances()
    threshold = tol.coalescence_threshold if threshold is None else threshold
    a = _as_array(M)
    _check_symmetric(a)
    n = a.shape[0]

    if n == 2:
        values, vectors = _eig2(a)
    else:
        values, vectors = linalg.eig(a)
        vectors = vectors / np.linalg.norm(vectors, axis=0)

    # 可对角化的简并（例如 rho=0）在子空间内重新正交化
    scale = max(1.0, float(np.max(np.abs(values))))
    seen = set()
    for i in range(n):
        if i in seen:
            continue
        cluster = [j for j in range(n)
                   if abs(values[j] - values[i]) <= tol.degeneracy_tol * scale]
        seen.update(cluster)
        if len(cluster) < 2:
            continue
        block = vectors[:, cluster]
        smallest = np.linalg.svd(block, compute_uv=False)[-1]
        if smallest > math.sqrt(threshold):
            vectors[:, cluster] = _bilinear_gram_schmidt(block, threshold)

    rigidity = np.zeros(n)
    for i in range(n):
        v = vectors[:, i]
        vv = v @ v
        rigidity[i] = abs(vv) / np.vdot(v, v).real
        if rigidity[i] >= threshold:
            v = v / np.sqrt(vv)
        else:
            v = v / np.linalg.norm(v)
        vectors[:, i] = _fix_sign(v)

    low = rigidity < threshold
    coalesced = np.logical_and.outer(low, low)
    np.fill_diagonal(coalesced, False)
    if np.any(coalesced):
        logger.debug(f"[Eig] 本征矢合并，相位刚性 {rigidity.min():.3e}")

    es = Eigensystem(values=np.asarray(values, dtype=complex), vectors=vectors,
                     phase_rigidity=rigidity, coalesced=coalesced)
    if sort:
        order = np.lexsort((es.values.imag, es.values.real))
        es = es.permuted(order)
    return es


def eigvals_stack(stack: np.ndarray) -> np.ndarray:
    """批量本征值，按实部排序；2x2 用闭式解"""
    stack = np.asarray(stack, dtype=complex)
    if stack.shape[-1] == 2:
        m = 0.5 * (stack[..., 0, 0] + stack[..., 1, 1])
        h = 0.5 * (stack[..., 0, 0] - stack[..., 1, 1])
        r = np.sqrt(h * h + stack[..., 0, 1] ** 2)
        values = np.stack([m - r, m + r], axis=-1)
    else:
        values = np.linalg.eigvals(stack)
    order = np.argsort(values.real, axis=-1, kind='stable')
    return np.take_along_axis(values, order, axis=-1)


def analytic_slice_potentials(p: PJTParams, qx):
    """
    Qy=0 切片上 PJT 模型的解析绝热势

    V2 为 B2 态（Ey），V1/V3 是 A1 对的两个根（主值平方根，V1 取负号）。
    qx 可以是标量或数组。
    """
    x = np.asarray(qx, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("qx 必须有限")
    nu = p.nu if p.order == 3 else 0.0
    mu = p.mu if p.order == 3 else 0.0
    beta = p.beta if p.order == 3 else 0.0
    x2, x3 = x * x, x ** 3
    harm = 0.5 * p.omega * x2 + nu * x3
    split = p.k * x + p.g * x2 + mu * x3
    mean = 0.5 * (p.eps_A + p.eps_E) + harm + 0.5 * split
    coup = p.alpha * x + beta * x2
    root = np.sqrt(0.25 * (p.eps_A - p.eps_E - split) ** 2 + coup * coup)
    v1 = mean - root
    v2 = p.eps_E + harm - split
    v3 = mean + root
    if x.ndim == 0:
        return complex(v1), complex(v2), complex(v3)
    return v1, v2, v3


def jt_slice_potentials(p: JTParams, qx):
    """JT 切片：V1 = ε + ω/2 x² + (kx + gx²)，V2 取负号"""
    x = np.asarray(qx, dtype=float)
    base = p.eps_E + 0.5 * p.omega * x * x
    split = p.k * x + p.g * x * x
    if x.ndim == 0:
        return complex(base + split), complex(base - split)
    return base + split, base - split


@dataclass
class JTAdiabatic:
    """JT 模型在一点上的解析量"""
    v1: complex
    v2: complex
    theta: complex
    lam: complex
    u: complex
    pole: bool = False
    exceptional: bool = False


def _sqrt_w(p: JTParams, w):
    """取与 k 同向的 √w 分支，使 g=0 时 √w = k"""
    s = np.sqrt(w)
    if p.k != 0:
        flip = (s / p.k).real < 0
        s = np.where(flip, -s, s)
    return s


def jt_adiabatic(p: JTParams, Q: NuclearCoords) -> JTAdiabatic:
    """
    JT 模型的解析绝热势 V = ε + ½ωρ² ∓ ρ√w

    w = k² + g²ρ² + 2kgρ cos3φ，
    θ 满足 e^{iθ} = (den + i·num)/√w，λ = num/den = tanθ，u = ρ·den·√(1+λ²)。
    den = 0 时 λ 取无穷并标记 pole；w = 0 时为例外点，θ 无定义。
    """
    rho, phi = Q.rho, Q.phi
    k, g = p.k, p.g
    num = k * math.sin(phi) - g * rho * math.sin(2 * phi)
    den = k * math.cos(phi) + g * rho * math.cos(2 * phi)
    w = k * k + g * g * rho * rho + 2 * k * g * rho * math.cos(3 * phi)
    sw = complex(_sqrt_w(p, w))
    base = p.eps_E + 0.5 * p.omega * rho * rho
    v1, v2 = base - rho * sw, base + rho * sw

    scale = max(abs(k), abs(g) * rho, 1e-300)
    pole = abs(den) <= 1e-15 * scale
    exceptional = abs(w) <= 1e-30 * scale * scale
    if exceptional:
        logger.debug(f"[JT] 例外点 rho={rho:.6g}, phi={phi:.6g}")
        theta = complex(math.nan, math.nan)
    else:
        theta = complex(-1j * np.log((den + 1j * num) / sw))
    if pole:
        # θ 本身仍由对数给出（±π/2），只有 λ 发散
        lam = complex(math.inf, 0.0)
        u = rho * num
    else:
        lam = num / den
        u = rho * den * complex(np.sqrt(1 + lam * lam))
    return JTAdiabatic(v1=complex(v1), v2=complex(v2), theta=theta, lam=complex(lam),
                       u=complex(u), pole=pole, exceptional=exceptional)


def jt_eigvecs(theta: complex) -> np.ndarray:
    """
    T(θ) = [[cos θ/2, sin θ/2], [sin θ/2, -cos θ/2]]

    第 0 列对应 +ρ√w（V2），第 1 列对应 V1。复 θ 下 T^T T = I 仍然成立。
    """
    theta = complex(theta)
    if not (math.isfinite(theta.real) and math.isfinite(theta.imag)):
        raise DomainError(f"θ 必须有限: {theta}")
    c = np.cos(theta / 2)
    s = np.sin(theta / 2)
    return np.array([[c, s], [s, -c]], dtype=complex)


@dataclass
class PathTrace:
    """沿路径跟踪的本征支"""
    points: List[NuclearCoords]
    branch_values: np.ndarray  # (n_points, N)
    branch_vectors: np.ndarray  # (n_points, N, N)
    permutation: Tuple[int, ...]
    rigidity: np.ndarray = field(default=None)  # (n_points, N)

    @property
    def closed(self) -> bool:
        a, b = self.points[0], self.points[-1]
        return math.hypot(a.qx - b.qx, a.qy - b.qy) < 1e-12

    @property
    def is_identity(self) -> bool:
        return tuple(self.permutation) == tuple(range(len(self.permutation)))

    def cycle_length(self, branch: int) -> int:
        """branch 在置换下回到自身所需的圈数"""
        n, j = 1, self.permutation[branch]
        while j != branch:
            j = self.permutation[j]
            n += 1
        return n


def bilinear_overlap(prev: np.ndarray, new: np.ndarray) -> np.ndarray:
    """O[i, j] = |v_i^T w_j|"""
    return np.abs(prev.T @ new)


def match_branches(prev: Eigensystem, new: Eigensystem, threshold: float, segment) -> Eigensystem:
    overlap = bilinear_overlap(prev.vectors, new.vectors)
    rows, cols = linear_sum_assignment(-overlap)
    order = [0] * prev.dim
    for r, c in zip(rows, cols):
        order[r] = c
    assigned = overlap[rows, cols]
    if assigned.min() < threshold:
        raise PathRefinementError(
            f"相邻点分支指派不唯一，最小重叠 {assigned.min():.3f}",
            segment=segment, details={'min_overlap': float(assigned.min())})
    matched = new.permuted(order)
    vecs = matched.vectors.copy()
    for i in range(prev.dim):
        if (prev.vectors[:, i] @ vecs[:, i]).real < 0:
            vecs[:, i] = -vecs[:, i]
    matched.vectors = vecs
    return matched


def match_by_values(prev: Eigensystem, new: Eigensystem) -> Eigensystem:
    """重叠指派失败时退回到最近本征值指派"""
    cost = np.abs(prev.values[:, None] - new.values[None, :])
    rows, cols = linear_sum_assignment(cost)
    order = [0] * prev.dim
    for r, c in zip(rows, cols):
        order[r] = c
    return new.permuted(order)


def track_along_path(params: ModelParams, points: Sequence[NuclearCoords],
                     threshold: Optional[float] = None) -> PathTrace:
    """
    沿有序点列跟踪本征支

    相邻点按双线性重叠 |v_i^T w_j| 做最优指派，并使 Re(v^T w) > 0。
    末点再与独立分解（按实部排序）比较得到置换；闭合回路上即为和乐置换。
    """
    if len(points) < 2:
        raise DomainError("路径至少需要两个点")
    threshold = get_tolerances().overlap_threshold if threshold is None else threshold
    qx = np.array([p.qx for p in points])
    qy = np.array([p.qy for p in points])
    stack = diabatic_stack(params, qx, qy)

    current = eig_complex_symmetric(stack[0])
    systems = [current]
    for i in range(1, len(points)):
        new = eig_complex_symmetric(stack[i], sort=False)
        current = match_branches(current, new, threshold, (i - 1, i))
        systems.append(current)

    reference = eig_complex_symmetric(stack[-1])
    overlap = bilinear_overlap(systems[-1].vectors, reference.vectors)
    rows, cols = linear_sum_assignment(-overlap)
    permutation = tuple(int(c) for _, c in sorted(zip(rows, cols)))
    logger.debug(f"[Track] {len(points)} 点，置换 {permutation}")

    return PathTrace(
        points=list(points),
        branch_values=np.array([s.values for s in systems]),
        branch_vectors=np.array([s.vectors for s in systems]),
        permutation=permutation,
        rigidity=np.array([s.phase_rigidity for s in systems]),
    )
