"""
拓扑分析模块
复绝热势的简并点定位与分类：中心锥形交叉、例外点、实部/虚部简并接缝，以及曲面网格扫描
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import mpmath
import numpy as np
from scipy import ndimage, optimize

from config import get_config, get_tolerances
from eigen import (
    Eigensystem, match_branches, match_by_values, eig_complex_symmetric, eigvals_stack,
)
from errors import (
    DegenerateParametersError, DomainError, NoFiniteEPError, PathRefinementError,
)
from vibronic import (
    JTParams, ModelParams, NuclearCoords, PJTParams, TWO_PI, diabatic_stack,
)

logger = logging.getLogger(__name__)

CONICAL = 'conical_intersection'
EXCEPTIONAL = 'exceptional_point'
RE_SEAM = 're_seam'
IM_SEAM = 'im_seam'


@dataclass(frozen=True)
class Region:
    """极坐标区域 rho_min <= rho <= rho_max, phi_min <= phi < phi_max（弧度）"""
    rho_min: float = 0.0
    rho_max: float = 0.6
    phi_min: float = 0.0
    phi_max: float = TWO_PI

    def __post_init__(self):
        if not (0.0 <= self.rho_min < self.rho_max):
            raise DomainError(f"区域半径无效: [{self.rho_min}, {self.rho_max}]")
        if not self.phi_min < self.phi_max:
            raise DomainError(f"区域角度无效: [{self.phi_min}, {self.phi_max}]")

    @property
    def full_circle(self) -> bool:
        return self.phi_max - self.phi_min >= TWO_PI - 1e-12

    def contains(self, Q: NuclearCoords, slack: float = 1e-9) -> bool:
        if not (self.rho_min - slack <= Q.rho <= self.rho_max + slack):
            return False
        if self.full_circle or Q.rho == 0.0:
            return True
        phi = (Q.phi - self.phi_min) % TWO_PI
        return phi <= self.phi_max - self.phi_min + slack


@dataclass
class DegeneracyPoint:
    """简并点"""
    coords: NuclearCoords
    kind: str
    branches: Tuple[int, int]
    residual: float
    rigidity: float
    extrapolated: bool = False

    def to_dict(self) -> Dict:
        return {
            'qx': self.coords.qx,
            'qy': self.coords.qy,
            'rho': self.coords.rho,
            'phi_deg': math.degrees(self.coords.phi),
            'kind': self.kind,
            'branches': list(self.branches),
            'residual': self.residual,
            'rigidity': self.rigidity,
            'extrapolated': self.extrapolated,
        }


@dataclass
class SeamCurve:
    """Re 或 Im 简并接缝上的有序点列"""
    kind: str
    points: List[NuclearCoords]
    branches: Tuple[int, int] = (0, 1)


@dataclass
class SeamTrace:
    curves: List[SeamCurve] = field(default_factory=list)
    degenerate: bool = False  # 参数全实时 Im 处处为零，不输出曲线


# ---------------------------------------------------------------- JT 解析结果

def jt_critical_radius(p: JTParams) -> float:
    """例外点半径 ρ_c = |k|/|g|"""
    if p.g == 0:
        raise NoFiniteEPError("g=0 时线性 JT 模型只有中心交叉点", {'k': [p.k.real, p.k.imag]})
    return abs(p.k) / abs(p.g)


def _jt_w(p: JTParams, rho: float, phi):
    return p.k * p.k + p.g * p.g * rho * rho + 2 * p.k * p.g * rho * np.cos(3 * np.asarray(phi))


def _unique_angles(angles, eps: float = 1e-12) -> List[float]:
    out: List[float] = []
    for a in sorted(a % TWO_PI for a in angles):
        if a > TWO_PI - eps:
            a = 0.0
        if not any(abs(a - b) < eps or abs(abs(a - b) - TWO_PI) < eps for b in out):
            out.append(a)
    return sorted(out)


def jt_exceptional_points(p: JTParams) -> List[DegeneracyPoint]:
    """
    w = 0 的解析解：e^{±3iφ} = -k/(g ρ_c)

    复参数下给出六个例外点；k、g 均为实数时只剩三个普通交叉点。
    """
    rho_c = jt_critical_radius(p)
    z = -p.k / (p.g * rho_c)
    a = math.atan2(z.imag, z.real)
    angles = _unique_angles([(s * a + TWO_PI * n) / 3.0 for s in (1, -1) for n in range(3)])
    real_params = p.k.imag == 0 and p.g.imag == 0
    kind = CONICAL if real_params else EXCEPTIONAL
    points = []
    for phi in angles:
        points.append(DegeneracyPoint(
            coords=NuclearCoords.from_polar(rho_c, phi), kind=kind, branches=(0, 1),
            residual=float(2 * rho_c * math.sqrt(abs(complex(_jt_w(p, rho_c, phi))))),
            rigidity=1.0 if real_params else 0.0))
    return points


def jt_seam_angles(p: JTParams, rho: float) -> List[float]:
    """
    固定 ρ 上 Im(w)=0 的角度，即 Re 或 Im 接缝与该圆的交点

    cos3φ = -(Re k Im k + Re g Im g ρ²) / (ρ (Re k Im g + Im k Re g))
    """
    if rho <= 0:
        raise DomainError(f"rho 必须为正: {rho}")
    k, g = p.k, p.g
    denom = rho * (k.real * g.imag + k.imag * g.real)
    if abs(denom) < 1e-300:
        raise DegenerateParametersError("Im(kg)=0，接缝角公式退化（束缚态极限）")
    rhs = -(k.real * k.imag + g.real * g.imag * rho * rho) / denom
    if abs(rhs) > 1.0 + 1e-12:
        return []
    # 转折点处舍入可能让 |rhs| 略大于 1
    a = math.acos(max(-1.0, min(1.0, rhs)))
    return _unique_angles([(s * a + TWO_PI * n) / 3.0 for s in (1, -1) for n in range(3)])


def classify_seam_point(p: JTParams, rho: float, phi: float) -> str:
    """Re(w)<0 时 V1、V2 实部相同，否则虚部相同"""
    return RE_SEAM if complex(_jt_w(p, rho, phi)).real < 0 else IM_SEAM


# ---------------------------------------------------------------- 数值例外点搜索

def _pair_gap(values: np.ndarray) -> np.ndarray:
    n = values.shape[-1]
    gaps = [np.abs(values[..., i] - values[..., j]) for i in range(n) for j in range(i + 1, n)]
    return np.min(np.stack(gaps, axis=-1), axis=-1)


def _gap_at(params: ModelParams, x: float, y: float) -> float:
    values = eigvals_stack(diabatic_stack(params, np.array([x]), np.array([y])))
    return float(_pair_gap(values)[0])


def _mp_matrix(params: ModelParams, x, y):
    x, y = mpmath.mpf(x), mpmath.mpf(y)
    c = lambda z: mpmath.mpc(z.real, z.imag)
    k, g, w, eps_E = c(params.k), c(params.g), c(params.omega), c(params.eps_E)
    harm = w * (x * x + y * y) / 2
    dxx = k * x + g * (x * x - y * y)
    dxy = k * y - 2 * g * x * y
    if isinstance(params, JTParams):
        return mpmath.matrix([[eps_E + harm + dxx, dxy], [dxy, eps_E + harm - dxx]])
    a = c(params.alpha)
    return mpmath.matrix([
        [c(params.eps_A) + harm, a * x, -a * y],
        [a * x, eps_E + harm + dxx, dxy],
        [-a * y, dxy, eps_E + harm - dxx],
    ])


def _discriminant(params: ModelParams, x, y):
    """特征多项式判别式，简并当且仅当为零"""
    A = _mp_matrix(params, x, y)
    if A.rows == 2:
        tr = A[0, 0] + A[1, 1]
        det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
        return tr * tr - 4 * det
    tr = A[0, 0] + A[1, 1] + A[2, 2]
    tr2 = sum(A[i, j] * A[j, i] for i in range(3) for j in range(3))
    a = -tr
    b = (tr * tr - tr2) / 2
    c = -mpmath.det(A)
    return 18 * a * b * c - 4 * a ** 3 * c + a * a * b * b - 4 * b ** 3 - 27 * c * c


def _polish(params: ModelParams, x0: float, y0: float, dps: int):
    """
    在判别式上做高精度 Newton 精修

    返回 mpf 坐标；舍入到双精度会把例外点处的相位刚性抬高到阈值以上，
    所以分类必须在高精度坐标上完成。
    """
    with mpmath.workdps(dps):
        start = (mpmath.mpf(x0), mpmath.mpf(y0))
        scale = abs(_discriminant(params, x0 + 1e-3, y0)) or mpmath.mpf(1)
        f = [lambda x, y: mpmath.re(_discriminant(params, x, y)) / scale,
             lambda x, y: mpmath.im(_discriminant(params, x, y)) / scale]
        try:
            root = mpmath.findroot(f, start, verify=False)
        except (ZeroDivisionError, ValueError) as e:
            logger.debug(f"[EP] 判别式精修失败 ({x0:.6g}, {y0:.6g}): {e}")
            return start
        x, y = root[0], root[1]
    if math.hypot(float(x) - x0, float(y) - y0) > 1e-3:
        # Newton 跳到了别的根
        return start
    return x, y


def _classify(params: ModelParams, x: float, y: float, dps: int):
    """返回 (branches, gap, rigidity)，用高精度本征矢计算相位刚性"""
    with mpmath.workdps(dps):
        A = _mp_matrix(params, x, y)
        try:
            E, ER = mpmath.eig(A)
        except ZeroDivisionError:
            # Schur 对角元严格相等，矩阵已经亏损
            E, ER = mpmath.eig(A, right=False), None
        n = len(E)
        order = sorted(range(n), key=lambda i: (float(mpmath.re(E[i])), float(mpmath.im(E[i]))))
        best = None
        for a in range(n):
            for b in range(a + 1, n):
                gap = abs(E[order[a]] - E[order[b]])
                if best is None or gap < best[1]:
                    best = ((a, b), gap)
        (a, b), gap = best
        if ER is None:
            return (a, b), float(gap), 0.0
        rig = []
        for i in (order[a], order[b]):
            v = [ER[r, i] for r in range(n)]
            vv = abs(sum(z * z for z in v))
            norm = sum(abs(z) ** 2 for z in v)
            rig.append(float(vv / norm))
    return (a, b), float(gap), max(rig)


def _grid_candidates(params: ModelParams, region: Region, tol) -> List[Tuple[float, float]]:
    drho = tol.ep_grid_drho
    start = region.rho_min if region.rho_min > 0 else drho
    n_rho = max(2, int(round((region.rho_max - start) / drho)) + 1)
    rho = np.linspace(start, region.rho_max, n_rho)
    dphi = math.radians(tol.ep_grid_dphi_deg)
    n_phi = max(8, int(round((region.phi_max - region.phi_min) / dphi)))
    phi = region.phi_min + dphi * np.arange(n_phi)
    R, P = np.meshgrid(rho, phi, indexing='ij')
    values = eigvals_stack(diabatic_stack(params, R * np.cos(P), R * np.sin(P)))
    gap = _pair_gap(values)
    mode = ('nearest', 'wrap' if region.full_circle else 'nearest')
    local = gap == ndimage.minimum_filter(gap, size=3, mode=mode)
    idx = np.argwhere(local)
    idx = idx[np.argsort(gap[local], kind='stable')][:tol.ep_max_candidates]
    logger.debug(f"[EP] 网格 {gap.shape}，候选 {len(idx)} 个")
    return [(float(R[i, j] * math.cos(P[i, j])), float(R[i, j] * math.sin(P[i, j]))) for i, j in idx]


def find_exceptional_points(params: ModelParams, region: Optional[Region] = None) -> List[DegeneracyPoint]:
    """
    在区域内搜索并分类简并点

    粗网格（极坐标）上找最小本征值间隙的局部极小，Nelder-Mead 精化后
    在特征多项式判别式上做 mpmath 精修，再用相位刚性区分锥形交叉与例外点。
    """
    tol = get_tolerances()
    region = region or Region()
    if region.rho_max > tol.validity_radius:
        logger.warning(f"[EP] 区域超出模型有效范围 rho>{tol.validity_radius}，结果标记为外推")

    found: List[DegeneracyPoint] = []

    def add(x, y):
        Q = NuclearCoords(float(x), float(y))
        if not region.contains(Q):
            return
        for p in found:
            if math.hypot(p.coords.qx - Q.qx, p.coords.qy - Q.qy) < tol.ep_merge_radius:
                return
        branches, gap, rigidity = _classify(params, x, y, tol.polish_dps)
        if rigidity < tol.coalescence_threshold:
            kind = EXCEPTIONAL
        elif gap < tol.degeneracy_tol:
            kind = CONICAL
        else:
            logger.debug(f"[EP] 丢弃非简并候选 ({Q.qx:.6g}, {Q.qy:.6g}) gap={gap:.3e}")
            return
        found.append(DegeneracyPoint(coords=Q, kind=kind, branches=branches, residual=gap,
                                     rigidity=rigidity, extrapolated=Q.rho > tol.validity_radius))
        logger.info(f"[EP] {kind} rho={Q.rho:.6f} phi={math.degrees(Q.phi):.4f}° gap={gap:.2e}")

    if region.rho_min == 0.0:
        origin = eig_complex_symmetric(diabatic_stack(params, np.array(0.0), np.array(0.0)))
        i, j = origin.closest_pair()
        if abs(origin.values[i] - origin.values[j]) < tol.degeneracy_tol:
            found.append(DegeneracyPoint(
                coords=NuclearCoords(0.0, 0.0), kind=CONICAL, branches=(i, j),
                residual=float(abs(origin.values[i] - origin.values[j])),
                rigidity=float(min(origin.phase_rigidity[i], origin.phase_rigidity[j]))))

    for x0, y0 in _grid_candidates(params, region, tol):
        res = optimize.minimize(lambda v: _gap_at(params, v[0], v[1]), np.array([x0, y0]),
                                method='Nelder-Mead',
                                options={'xatol': 1e-12, 'fatol': 1e-16, 'maxiter': 2000})
        x, y = float(res.x[0]), float(res.x[1])
        if math.hypot(x, y) < 1e-4:
            # 中心交叉点，判别式在此为二重零点
            if region.rho_min == 0.0:
                continue
            x, y = 0.0, 0.0
        else:
            x, y = _polish(params, x, y, tol.polish_dps)
        add(x, y)

    found.sort(key=lambda p: (p.coords.rho > 1e-12, round(p.coords.phi, 9), p.coords.rho))
    logger.info(f"[EP] 共找到 {len(found)} 个简并点")
    return found


# ---------------------------------------------------------------- 接缝

def _pair_discriminant(params: ModelParams, qx, qy, branches: Tuple[int, int]):
    values = eigvals_stack(diabatic_stack(params, qx, qy))
    va, vb = values[..., branches[0]], values[..., branches[1]]
    return (va - vb) ** 2, va, vb


def _refine_on_seam(params: ModelParams, x: float, y: float, branches, iterations: int = 30):
    """沿梯度把点投影到 Im D = 0 上"""
    h = 1e-7
    f = lambda a, b: float(_pair_discriminant(params, np.array(a), np.array(b), branches)[0].imag)
    for _ in range(iterations):
        fx = f(x, y)
        if fx == 0.0:
            break
        gx = (f(x + h, y) - f(x - h, y)) / (2 * h)
        gy = (f(x, y + h) - f(x, y - h)) / (2 * h)
        gg = gx * gx + gy * gy
        if gg == 0.0:
            break
        dx, dy = fx * gx / gg, fx * gy / gg
        x, y = x - dx, y - dy
        if math.hypot(dx, dy) < 1e-15:
            break
    return x, y


def trace_seams(params: ModelParams, region: Optional[Region] = None,
                branches: Tuple[int, int] = (0, 1), n_rho: int = 200,
                n_phi: int = 720) -> SeamTrace:
    """
    等值线追踪 Im((V_a - V_b)²) = 0，按 Re 的符号分成 re_seam 与 im_seam

    等值线顶点逐个投影回零集并校验残差，不满足的点被丢弃；
    投影后与前一点重合（距离 < 1e-12）的点也去掉。
    """
    tol = get_tolerances()
    region = region or Region()
    start = max(region.rho_min, (region.rho_max - region.rho_min) / n_rho)
    rho = np.linspace(start, region.rho_max, n_rho)
    phi = np.linspace(region.phi_min, region.phi_max, n_phi + 1)
    R, P = np.meshgrid(rho, phi, indexing='ij')
    X, Y = R * np.cos(P), R * np.sin(P)
    D, _, _ = _pair_discriminant(params, X, Y, branches)
    D = D / (R * R)
    if np.max(np.abs(D.imag)) <= 1e-14 * max(np.max(np.abs(D)), 1e-300):
        logger.info("[Seam] 虚部处处为零，接缝退化")
        return SeamTrace(curves=[], degenerate=True)

    fig, ax = plt.subplots()
    try:
        cs = ax.contour(X, Y, D.imag, levels=[0.0])
        segments = [np.asarray(s) for s in cs.allsegs[0]]
    finally:
        plt.close(fig)

    curves: List[SeamCurve] = []
    for seg in segments:
        run_kind, run = None, []
        for x0, y0 in seg:
            x, y = _refine_on_seam(params, float(x0), float(y0), branches)
            Q = NuclearCoords(x, y)
            if not region.contains(Q, slack=1e-6) or Q.rho == 0.0:
                continue
            d, va, vb = _pair_discriminant(params, np.array(x), np.array(y), branches)
            diff = complex(va - vb)
            kind = RE_SEAM if complex(d).real < 0 else IM_SEAM
            residual = abs(diff.real) if kind == RE_SEAM else abs(diff.imag)
            if residual >= tol.degeneracy_tol:
                continue
            if run and math.hypot(Q.qx - run[-1].qx, Q.qy - run[-1].qy) < 1e-12:
                continue
            if kind != run_kind and run:
                curves.append(SeamCurve(kind=run_kind, points=run, branches=branches))
                run = []
            run_kind = kind
            run.append(Q)
        if run:
            curves.append(SeamCurve(kind=run_kind, points=run, branches=branches))
    logger.info(f"[Seam] {len(curves)} 条接缝段")
    return SeamTrace(curves=curves, degenerate=False)


# ---------------------------------------------------------------- 网格扫描

@dataclass(frozen=True)
class GridSpec:
    """kind='cartesian' 时两轴为 qx、qy；'polar' 时为 rho、phi（弧度）"""
    kind: str
    axis1: Tuple[float, float, int]
    axis2: Tuple[float, float, int]

    def __post_init__(self):
        if self.kind not in ('cartesian', 'polar'):
            raise DomainError(f"未知网格类型: {self.kind}")
        for start, stop, n in (self.axis1, self.axis2):
            if n < 1 or not (math.isfinite(start) and math.isfinite(stop)):
                raise DomainError(f"网格轴无效: {(start, stop, n)}")
            if n > 1 and stop <= start:
                raise DomainError(f"网格轴必须单调递增: {(start, stop, n)}")

    @classmethod
    def parse(cls, text: str) -> 'GridSpec':
        """解析 "qx=-0.5:0.5:101,qy=-0.5:0.5:101" 或 "rho=0:0.2:41,phi=0:360:73"（角度为度）"""
        axes = {}
        try:
            for part in text.split(','):
                name, rng = part.split('=')
                start, stop, n = rng.split(':')
                axes[name.strip()] = (float(start), float(stop), int(n))
        except ValueError:
            raise DomainError(f"无法解析网格: {text!r}")
        if set(axes) == {'qx', 'qy'}:
            return cls('cartesian', axes['qx'], axes['qy'])
        if set(axes) == {'rho', 'phi'}:
            a, b, n = axes['phi']
            return cls('polar', axes['rho'], (math.radians(a), math.radians(b), n))
        raise DomainError(f"网格轴必须是 qx,qy 或 rho,phi: {text!r}")

    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        return tuple(np.linspace(a, b, n) for a, b, n in (self.axis1, self.axis2))

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        """返回 (qx, qy)，形状为 (axis2, axis1)：每行固定第二个坐标"""
        a1, a2 = self.axes()
        A2, A1 = np.meshgrid(a2, a1, indexing='ij')
        if self.kind == 'cartesian':
            return A1, A2
        return A1 * np.cos(A2), A1 * np.sin(A2)


@dataclass
class SurfaceTable:
    qx: np.ndarray
    qy: np.ndarray
    values: np.ndarray  # (n_points, N)
    rigidity: np.ndarray  # 最近一对本征值的相位刚性

    @property
    def n_branches(self) -> int:
        return self.values.shape[1]


def _track_row(systems: List[Eigensystem], first: Eigensystem, threshold: float) -> List[Eigensystem]:
    row = [first]
    for i in range(1, len(systems)):
        try:
            row.append(match_branches(row[-1], systems[i], threshold, (i - 1, i)))
        except PathRefinementError:
            row.append(match_by_values(row[-1], systems[i]))
    return row


def grid_scan(params: ModelParams, grid: GridSpec, threads: Optional[int] = None) -> SurfaceTable:
    """
    在网格上计算全部绝热势

    每点的本征分解并行执行；支标签沿行、行首沿第一列跟踪，保证全局连续。
    """
    tol = get_tolerances()
    threads = threads or get_config().threads
    qx, qy = grid.mesh()
    n_rows, n_cols = qx.shape
    stack = diabatic_stack(params, qx.ravel(), qy.ravel())
    with ThreadPoolExecutor(max_workers=threads) as pool:
        systems = list(pool.map(lambda m: eig_complex_symmetric(m, sort=False), stack))
    logger.info(f"[Scan] {len(systems)} 点，{threads} 线程")

    head = eig_complex_symmetric(stack[0])
    tracked: List[Eigensystem] = []
    for r in range(n_rows):
        row = systems[r * n_cols:(r + 1) * n_cols]
        if r == 0:
            first = head
        else:
            try:
                first = match_branches(tracked[(r - 1) * n_cols], row[0], tol.overlap_threshold, (r - 1, r))
            except PathRefinementError:
                first = match_by_values(tracked[(r - 1) * n_cols], row[0])
        tracked.extend(_track_row(row, first, tol.overlap_threshold))

    values = np.array([s.values for s in tracked])
    rigidity = np.empty(len(tracked))
    for n, s in enumerate(tracked):
        i, j = s.closest_pair()
        rigidity[n] = min(s.phase_rigidity[i], s.phase_rigidity[j])
    return SurfaceTable(qx=qx.ravel(), qy=qy.ravel(), values=values, rigidity=rigidity)
