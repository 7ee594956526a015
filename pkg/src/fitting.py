"""
参数拟合模块
Breit-Wigner 时间延迟拟合、复共振势组装、C2v 切片上 JT/PJT 参数的复非线性最小二乘以及合成数据
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, optimize

from config import get_tolerances
from eigen import analytic_slice_potentials, jt_slice_potentials
from errors import DomainError, FitError, IllPosedError
from vibronic import JTParams, ModelParams, NuclearCoords, PJTParams, params_from_values

logger = logging.getLogger(__name__)

# 全纯中心差分步长
JACOBIAN_STEP = 1e-7


@dataclass(frozen=True)
class ResonanceSample:
    """Qy=0 切片上的一个共振点：位置 eps_n、宽度 gamma_n（Hartree），branch 为 1/2/3"""
    qx: float
    branch: int
    eps_n: float
    gamma_n: float
    v_ion: float = 0.0

    @property
    def Q(self) -> NuclearCoords:
        return NuclearCoords(self.qx, 0.0)


@dataclass
class TimeDelayCurve:
    """固定几何下的 dδ/dE 采样"""
    energies: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.energies.shape != self.values.shape or self.energies.ndim != 1:
            raise DomainError("能量与时间延迟的长度不一致")
        if not (np.all(np.isfinite(self.energies)) and np.all(np.isfinite(self.values))):
            raise DomainError("时间延迟数据包含非有限值")
        if np.any(np.diff(self.energies) <= 0):
            raise DomainError("能量网格必须严格递增")


@dataclass
class FitResult:
    """拟合结果；covariance 仅作参考（线性化估计）"""
    params: Optional[ModelParams]
    residual: float
    iterations: int
    converged: bool
    diagnostics: Dict = field(default_factory=dict)
    history: List[float] = field(default_factory=list)
    covariance: Optional[np.ndarray] = None


@dataclass
class TimeDelayFit:
    resonances: List[Tuple[float, float]]
    bg: float
    result: FitResult


def assemble_potential(s: ResonanceSample) -> complex:
    """V = V_ion + ε - iγ/2"""
    if s.gamma_n < 0:
        raise DomainError(f"宽度不能为负: {s.gamma_n}", {'qx': s.qx, 'branch': s.branch})
    return complex(s.v_ion + s.eps_n, -0.5 * s.gamma_n)


# ---------------------------------------------------------------- Breit-Wigner

def bw_time_delay(E, resonances: Sequence[Tuple[float, float]], bg: float):
    """dδ/dE = Σ (γ/2)/((E-ε)² + (γ/2)²) + bg，E 可为数组"""
    E = np.asarray(E, dtype=float)
    total = np.full(E.shape, float(bg))
    for eps, gamma in resonances:
        if not gamma > 0:
            raise DomainError(f"共振宽度必须为正: {gamma}")
        half = 0.5 * gamma
        total = total + half / ((E - eps) ** 2 + half * half)
    return float(total) if total.ndim == 0 else total


def _unpack_bw(x: np.ndarray) -> Tuple[List[Tuple[float, float]], float]:
    return [(float(x[2 * i]), float(x[2 * i + 1])) for i in range((len(x) - 1) // 2)], float(x[-1])


def _bw_initial(curve: TimeDelayCurve, n_res: int) -> np.ndarray:
    """按局部极大值给初值，峰不够时在最高峰两侧补齐"""
    E, y = curve.energies, curve.values
    bg = float(np.min(y))
    peaks = [i for i in range(1, len(y) - 1) if y[i] >= y[i - 1] and y[i] > y[i + 1]]
    peaks.sort(key=lambda i: -y[i])
    x0 = []
    for i in peaks[:n_res]:
        height = max(y[i] - bg, 1e-12)
        x0 += [E[i], 2.0 / height]
    while len(x0) < 2 * n_res:
        top = int(np.argmax(y))
        width = 2.0 / max(y[top] - bg, 1e-12)
        x0 += [E[top] + width * (len(x0) // 2), width]
    return np.array(x0 + [bg])


def fit_time_delay(curve: TimeDelayCurve, n_res: int,
                   init: Optional[Sequence[float]] = None) -> TimeDelayFit:
    """
    拟合 n_res 个 Lorentzian 加常数背景

    Args:
        init: 可选初值 [ε1, γ1, ..., bg]

    Raises:
        FitError: 曲线平坦或不收敛，best 中带目前最好的参数
    """
    if n_res < 1:
        raise DomainError("n_res 至少为 1")
    if len(curve.energies) < 3 * n_res + 1:
        raise IllPosedError(f"数据点不足: {len(curve.energies)} < {3 * n_res + 1}")
    y = curve.values
    if np.ptp(y) <= 1e-12 * max(1.0, float(np.mean(np.abs(y)))):
        raise FitError("时间延迟曲线平坦，无法确定共振", details={'n_res': n_res})

    x0 = np.asarray(init, dtype=float) if init is not None else _bw_initial(curve, n_res)
    if x0.shape != (2 * n_res + 1,):
        raise DomainError(f"初值长度应为 {2 * n_res + 1}")

    def residual(x):
        res, bg = _unpack_bw(x)
        half = np.array([g for _, g in res]) * 0.5
        eps = np.array([e for e, _ in res])
        model = bg + np.sum(half[:, None] / ((curve.energies[None, :] - eps[:, None]) ** 2 + half[:, None] ** 2), axis=0)
        return model - y

    sol = optimize.least_squares(residual, x0, method='lm', xtol=1e-15, ftol=1e-15, gtol=1e-15,
                                 max_nfev=2000 * len(x0))
    resonances, bg = _unpack_bw(sol.x)
    sse = float(sol.fun @ sol.fun)
    flags = []
    e_lo, e_hi = float(curve.energies[0]), float(curve.energies[-1])
    for eps, gamma in resonances:
        if gamma <= 0 or gamma > 10 * (e_hi - e_lo):
            flags.append('gamma_divergent')
        if not e_lo <= eps <= e_hi:
            flags.append('eps_outside_range')
    result = FitResult(params=None, residual=sse, iterations=int(sol.nfev), converged=sol.status > 0,
                       diagnostics={'flags': flags, 'message': sol.message,
                                    'values': sol.x.tolist()},
                       covariance=_covariance(sol.jac, sol.fun))
    if not result.converged:
        raise FitError(f"时间延迟拟合不收敛: {sol.message}", best=result)
    if flags:
        logger.warning(f"[BW] 拟合结果可疑: {flags}")
    logger.info(f"[BW] {n_res} 个共振，SSE={sse:.3e}")
    return TimeDelayFit(resonances=resonances, bg=bg, result=result)


def synth_time_delay(energies, resonances: Sequence[Tuple[float, float]], bg: float,
                     noise: float = 0.0, seed: int = 0) -> TimeDelayCurve:
    """由已知共振生成时间延迟曲线"""
    E = np.asarray(energies, dtype=float)
    values = bw_time_delay(E, resonances, bg)
    if noise > 0:
        values = values + np.random.default_rng(seed).normal(0.0, noise, E.shape)
    return TimeDelayCurve(E, values)


def _covariance(J: np.ndarray, r: np.ndarray) -> Optional[np.ndarray]:
    m, n = J.shape
    if m <= n:
        return None
    s2 = float(r @ r) / (m - n)
    return linalg.pinv(J.T @ J) * s2


# ---------------------------------------------------------------- Levenberg-Marquardt

class LevenbergMarquardt:
    """
    阻尼最小二乘

    每次迭代解 (JᵀJ + λ·diag(JᵀJ)) δ = -Jᵀr；接受则 λ 除以 factor，否则乘以 factor。
    只接受使残差下降的步，所以残差序列单调不增。
    """

    def __init__(self, residual: Callable[[np.ndarray], np.ndarray],
                 jacobian: Callable[[np.ndarray], np.ndarray],
                 damping: float = 1e-3, factor: float = 10.0,
                 ftol: float = 1e-12, max_iterations: int = 500):
        self.residual = residual
        self.jacobian = jacobian
        self.damping = damping
        self.factor = factor
        self.ftol = ftol
        self.max_iterations = max_iterations
        self.history: List[float] = []
        self.iterations = 0
        self.converged = False
        self.message = ''

    def _step(self, J: np.ndarray, r: np.ndarray, lam: float) -> Optional[np.ndarray]:
        A = J.T @ J
        d = np.diag(A).copy()
        d[d == 0] = 1.0
        try:
            return linalg.solve(A + lam * np.diag(d), -J.T @ r, assume_a='sym')
        except (linalg.LinAlgError, ValueError):
            return None

    def minimize(self, x0: np.ndarray) -> np.ndarray:
        x = np.array(x0, dtype=float)
        r = self.residual(x)
        sse = float(r @ r)
        self.history = [sse]
        lam = self.damping
        for it in range(1, self.max_iterations + 1):
            self.iterations = it
            if sse < 1e-30:
                self.converged, self.message = True, 'residual below 1e-30'
                return x
            J = self.jacobian(x)
            accepted = False
            while lam < 1e16:
                delta = self._step(J, r, lam)
                if delta is not None:
                    x_new = x + delta
                    r_new = self.residual(x_new)
                    sse_new = float(r_new @ r_new)
                    if sse_new < sse:
                        accepted = True
                        break
                lam *= self.factor
            if not accepted:
                # 任何阻尼下都不能再下降
                self.converged, self.message = True, 'no further decrease'
                return x
            change = (sse - sse_new) / sse
            x, r, sse = x_new, r_new, sse_new
            self.history.append(sse)
            lam = max(lam / self.factor, 1e-16)
            if change < self.ftol:
                self.converged, self.message = True, 'relative change below ftol'
                return x
        self.message = 'max iterations reached'
        return x


# ---------------------------------------------------------------- 切片拟合

def _check_slice_data(data: Sequence[ResonanceSample], branches: Tuple[int, ...], n_real: int):
    if not data:
        raise IllPosedError("没有数据")
    for s in data:
        if s.branch not in branches:
            raise IllPosedError(f"分支标签必须属于 {branches}: {s.branch}", {'qx': s.qx})
    present = {s.branch for s in data}
    xs = np.array([s.qx for s in data])
    if len(data) * 2 < n_real:
        raise IllPosedError(f"样本数不足以确定 {n_real} 个实参数", {'n_samples': len(data)})
    return present, xs


def _weights(weights: Optional[Tuple[float, float]]) -> Tuple[float, float]:
    if weights is not None:
        return weights
    tol = get_tolerances()
    return tol.weight_real, tol.weight_imag


def _complex_to_real(values: Sequence[complex]) -> np.ndarray:
    return np.array([part for v in values for part in (v.real, v.imag)])


def _real_to_complex(x: np.ndarray) -> List[complex]:
    return [complex(x[2 * i], x[2 * i + 1]) for i in range(len(x) // 2)]


def _pjt_model(p: PJTParams, x: np.ndarray, branch: np.ndarray, data: np.ndarray) -> np.ndarray:
    """按分支取模型值；A1 样本取 V1、V3 中离数据最近的一个"""
    v1, v2, v3 = analytic_slice_potentials(p, x)
    a1 = np.where(np.abs(v1 - data) <= np.abs(v3 - data), v1, v3)
    return np.where(branch == 2, v2, a1)


def slice_residual(params: ModelParams, data: Sequence[ResonanceSample],
                   weights: Optional[Tuple[float, float]] = None) -> float:
    """加权残差平方和 Σ w_re Re(Δ)² + w_im Im(Δ)²"""
    w_re, w_im = _weights(weights)
    x = np.array([s.qx for s in data])
    b = np.array([s.branch for s in data])
    y = np.array([assemble_potential(s) for s in data])
    if isinstance(params, PJTParams):
        model = _pjt_model(params, x, b, y)
    else:
        v1, v2 = jt_slice_potentials(params, x)
        model = np.where(b == 1, v1, v2)
    d = model - y
    return float(w_re * np.sum(d.real ** 2) + w_im * np.sum(d.imag ** 2))


def _pair_a1(data: Sequence[ResonanceSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """同一 qx 上的两个 A1 样本配对，返回 (x, 和, 差的平方)"""
    groups: Dict[float, List[complex]] = {}
    for s in data:
        if s.branch in (1, 3):
            groups.setdefault(s.qx, []).append(assemble_potential(s))
    xs, sums, sq = [], [], []
    for x in sorted(groups):
        vals = groups[x]
        if len(vals) == 2:
            xs.append(x)
            sums.append(vals[0] + vals[1])
            sq.append((vals[0] - vals[1]) ** 2)
    return np.array(xs), np.array(sums), np.array(sq)


def _pjt_initial(data: Sequence[ResonanceSample], order: int) -> PJTParams:
    """矩估计：V2 与 V1+V3 的多项式系数，再由 (V3-V1)² 求 α、β"""
    b2 = [s for s in data if s.branch == 2]
    x2 = np.array([s.qx for s in b2])
    y2 = np.array([assemble_potential(s) for s in b2])
    xa, sums, sq = _pair_a1(data)
    if len(x2) < order + 1 or len(xa) < order + 1:
        raise IllPosedError("B2 或成对的 A1 样本不足", {'n_b2': len(x2), 'n_a1_pairs': len(xa)})
    deg = order
    c = np.polyfit(x2, y2, deg)[::-1]  # V2 = εE - kx + (ω/2 - g)x² + (ν - μ)x³
    s = np.polyfit(xa, sums, deg)[::-1]  # V1+V3 = εA+εE + kx + (ω+g)x² + (2ν+μ)x³
    eps_E = c[0]
    eps_A = s[0] - eps_E
    k = 0.5 * (s[1] - c[1])
    omega = 2.0 * (c[2] + s[2]) / 3.0
    g = s[2] - omega
    nu = mu = 0.0
    if order == 3:
        nu = (c[3] + s[3]) / 3.0
        mu = nu - c[3]
    d = eps_A - eps_E - k * xa - g * xa ** 2 - mu * xa ** 3
    q = (sq - d * d) / 4.0  # = (αx + βx²)²
    if order == 2:
        mask = np.abs(xa) > 0
        alpha2 = np.sum(q[mask] * xa[mask] ** 2) / np.sum(xa[mask] ** 4)
        alpha, beta = np.sqrt(alpha2), None
    else:
        A = np.column_stack([xa ** 2, xa ** 3, xa ** 4])
        coef = np.linalg.lstsq(A, q, rcond=None)[0]
        alpha = np.sqrt(coef[0])
        beta = coef[1] / (2 * alpha) if alpha != 0 else 0.0
    if order == 2:
        return PJTParams(eps_E=eps_E, eps_A=eps_A, omega=omega, k=k, g=g, alpha=alpha)
    return PJTParams(eps_E=eps_E, eps_A=eps_A, omega=omega, k=k, g=g, alpha=alpha,
                     beta=beta, nu=nu, mu=mu, order=3)


def _canonical(p: PJTParams) -> PJTParams:
    """(α, β) → (-α, -β) 不改变模型，取 Re α ≥ 0"""
    if p.alpha.real >= 0:
        return p
    values = dict(zip(p.names(), p.values()))
    values['alpha'] = -p.alpha
    if p.order == 3:
        values['beta'] = -p.beta
    return PJTParams(order=p.order, **values)


def fit_pjt_slice(data: Sequence[ResonanceSample], order: int = 2,
                  init: Optional[PJTParams] = None,
                  weights: Optional[Tuple[float, float]] = None) -> FitResult:
    """
    Qy=0 切片上 PJT 参数的复非线性最小二乘

    实部与虚部残差一起最小化；复参数拆成实数对，雅可比由全纯中心差分得到。
    A1 样本（branch 1/3）每次迭代按最近模型值重新指派给 V1 或 V3。
    """
    if order not in (2, 3):
        raise DomainError(f"order 只能是 2 或 3: {order}")
    n_complex = 6 if order == 2 else 9
    present, xs = _check_slice_data(data, (1, 2, 3), 2 * n_complex)
    if 2 not in present or not present & {1, 3}:
        raise IllPosedError("需要同时有 B2 (branch 2) 与 A1 (branch 1/3) 数据")
    if not (np.any(xs < 0) and np.any(xs > 0)):
        raise IllPosedError("数据必须覆盖 Qx 的正负两侧")

    tol = get_tolerances()
    w_re, w_im = _weights(weights)
    sw = np.array([math.sqrt(w_re), math.sqrt(w_im)])
    x = xs
    b = np.array([s.branch for s in data])
    y = np.array([assemble_potential(s) for s in data])

    start = init if init is not None else _pjt_initial(data, order)
    if start.order != order:
        raise DomainError("初值的 order 与拟合 order 不一致")
    template = start

    def model_of(z: np.ndarray) -> np.ndarray:
        return _pjt_model(params_from_values(template, _real_to_complex(z)), x, b, y)

    def residual(z: np.ndarray) -> np.ndarray:
        d = model_of(z) - y
        return np.concatenate([sw[0] * d.real, sw[1] * d.imag])

    def jacobian(z: np.ndarray) -> np.ndarray:
        cols = []
        vals = _real_to_complex(z)
        base = params_from_values(template, vals)
        v1, _, v3 = analytic_slice_potentials(base, x)
        # 固定当前的 V1/V3 指派
        pick1 = np.abs(v1 - y) <= np.abs(v3 - y)
        for i in range(len(vals)):
            hi = list(vals)
            lo = list(vals)
            hi[i] += JACOBIAN_STEP
            lo[i] -= JACOBIAN_STEP
            fh = analytic_slice_potentials(params_from_values(template, hi), x)
            fl = analytic_slice_potentials(params_from_values(template, lo), x)
            deriv = [(fh[j] - fl[j]) / (2 * JACOBIAN_STEP) for j in range(3)]
            df = np.where(b == 2, deriv[1], np.where(pick1, deriv[0], deriv[2]))
            cols.append(np.concatenate([sw[0] * df.real, sw[1] * df.imag]))
            cols.append(np.concatenate([-sw[0] * df.imag, sw[1] * df.real]))
        return np.column_stack(cols)

    lm = LevenbergMarquardt(residual, jacobian, damping=tol.lm_damping, factor=tol.lm_factor,
                            ftol=tol.lm_ftol, max_iterations=tol.lm_max_iterations)
    z = lm.minimize(_complex_to_real(start.values()))
    best = _canonical(params_from_values(template, _real_to_complex(z)))
    return _finish(best, data, weights, lm, jacobian(z), residual(z), 'pjt')


def _finish(best: ModelParams, data, weights, lm: 'LevenbergMarquardt', J: np.ndarray,
            r: np.ndarray, tag: str) -> FitResult:
    n = J.shape[1]
    rank = int(np.linalg.matrix_rank(J))
    sv = np.linalg.svd(J, compute_uv=False)
    diagnostics = {
        'rank': rank,
        'condition': float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf,
        'width_sign_violations': _width_violations(best, data),
        'covariance_note': 'indicative only',
        'message': lm.message,
    }
    result = FitResult(params=best, residual=slice_residual(best, data, weights),
                       iterations=lm.iterations, converged=lm.converged,
                       diagnostics=diagnostics, history=list(lm.history),
                       covariance=_covariance(J, r))
    if rank < n:
        raise FitError(f"雅可比秩亏损 {rank} < {n}", best=result, details={'rank': rank})
    if not lm.converged:
        raise FitError(f"拟合在 {lm.iterations} 次迭代后未收敛", best=result)
    logger.info(f"[Fit] {tag} 收敛，迭代 {lm.iterations} 次，残差 {result.residual:.3e}")
    return result


def _width_violations(p: ModelParams, data: Sequence[ResonanceSample]) -> int:
    """模型在样本点上给出 Im V > 0（负宽度）的个数"""
    x = np.array(sorted({s.qx for s in data}))
    if isinstance(p, PJTParams):
        values = np.concatenate(analytic_slice_potentials(p, x))
    else:
        values = np.concatenate(jt_slice_potentials(p, x))
    return int(np.sum(values.imag > 0))


def fit_jt_slice(data: Sequence[ResonanceSample],
                 weights: Optional[Tuple[float, float]] = None) -> FitResult:
    """
    JT 切片模型对 {ε, ω, k, g} 是线性的，实部与虚部各解一次线性最小二乘

    设计矩阵列为 [1, x²/2, s·x, s·x²]，branch 1 取 s=+1，branch 2 取 s=-1。
    """
    _check_slice_data(data, (1, 2), 8)
    x = np.array([s.qx for s in data])
    sgn = np.array([1.0 if s.branch == 1 else -1.0 for s in data])
    y = np.array([assemble_potential(s) for s in data])
    A = np.column_stack([np.ones_like(x), 0.5 * x * x, sgn * x, sgn * x * x])
    rank = int(np.linalg.matrix_rank(A))
    if rank < 4:
        raise IllPosedError(f"设计矩阵秩亏损 {rank} < 4（需要两个分支的数据）", {'rank': rank})
    re = linalg.lstsq(A, y.real)[0]
    im = linalg.lstsq(A, y.imag)[0]
    coef = re + 1j * im
    params = JTParams(eps_E=coef[0], omega=coef[1], k=coef[2], g=coef[3])
    sv = np.linalg.svd(A, compute_uv=False)
    residual = slice_residual(params, data, weights)
    logger.info(f"[Fit] jt 线性解，残差 {residual:.3e}")
    return FitResult(params=params, residual=residual, iterations=1, converged=True,
                     diagnostics={'rank': rank, 'condition': float(sv[0] / sv[-1]),
                                  'width_sign_violations': _width_violations(params, data),
                                  'covariance_note': 'indicative only'},
                     history=[residual])


def synth_data(params: ModelParams, qx: Sequence[float], noise: float = 0.0, seed: int = 0,
               v_ion: float = 0.0) -> List[ResonanceSample]:
    """
    由解析切片势生成带分支标签的样本；noise 为实部和虚部上的高斯噪声标准差（Hartree）

    ε = Re V - V_ion，γ = -2 Im V。
    """
    if noise < 0:
        raise DomainError(f"噪声不能为负: {noise}")
    x = np.asarray(qx, dtype=float)
    if isinstance(params, PJTParams):
        branches = analytic_slice_potentials(params, x)
    else:
        branches = jt_slice_potentials(params, x)
    rng = np.random.default_rng(seed)
    samples = []
    for i, xi in enumerate(x):
        for n, values in enumerate(branches, start=1):
            v = complex(values[i])
            if noise > 0:
                v += complex(rng.normal(0.0, noise), rng.normal(0.0, noise))
            samples.append(ResonanceSample(qx=float(xi), branch=n, eps_n=v.real - v_ion,
                                           gamma_n=-2.0 * v.imag, v_ion=v_ion))
    return samples
