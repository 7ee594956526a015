"""
复 JT/PJT 振动电子耦合工具包
命令行入口
"""
import sys
import os
import json
import math
import logging
import argparse
from typing import List, Optional, Sequence

# 添加src目录到路径（支持从不同目录运行）
current_dir = os.path.dirname(os.path.abspath(__file__))
if current_dir not in sys.path:
    sys.path.insert(0, current_dir)

# 也添加父目录（如果从src目录运行）
parent_dir = os.path.dirname(current_dir)
src_dir = os.path.join(parent_dir, 'src')
if os.path.exists(src_dir) and src_dir not in sys.path:
    sys.path.insert(0, src_dir)

import numpy as np

from config import RunConfig, get_config, set_config
from errors import ConfigError, DomainError, NoFiniteEPError, SchemaError, VibronicError
from vibronic import JTParams, NuclearCoords, PJTParams
from eigen import analytic_slice_potentials, jt_adiabatic, jt_eigvecs, jt_slice_potentials
from topology import (
    GridSpec, Region, classify_seam_point, find_exceptional_points, grid_scan, jt_critical_radius,
    jt_exceptional_points, jt_seam_angles, trace_seams,
)
from nac_berry import (
    HOLONOMY, LINE_INTEGRAL, RAW, SINGLE_VALUED, LoopSpec, analytic_jt_nac, berry_phase, lambda_terms,
    numeric_nac,
)
from fitting import (
    fit_jt_slice, fit_pjt_slice, fit_time_delay, synth_data, synth_time_delay,
)
import file_io

logger = logging.getLogger('vibronic')

SUBCOMMANDS = ('surface', 'slice', 'berry', 'nac', 'find-ep', 'seams', 'fit', 'bw-fit', 'synth', 'validate')


def _parse_pair(text: str) -> NuclearCoords:
    try:
        x, y = (float(v) for v in text.split(','))
    except ValueError:
        raise DomainError(f"坐标格式应为 x,y: {text!r}")
    return NuclearCoords(x, y)


def _parse_triplet(text: str):
    try:
        a, b, n = text.split(":")
        return float(a), float(b), int(n)
    except ValueError:
        raise DomainError(f"范围格式应为 start:stop:n: {text!r}")


def _parse_range(text: str) -> np.ndarray:
    a, b, n = _parse_triplet(text)
    return np.linspace(a, b, n)


def _emit(args, text: str):
    """有 --output 时原子写文件，否则写到标准输出"""
    if args.output:
        file_io.atomic_write(args.output, text)
        logger.info(f"[Output] 已写入 {args.output}")
    else:
        sys.stdout.write(text)


def _emit_table(args, header: Sequence[str], rows: List[list]):
    if args.format == 'json':
        _emit(args, file_io.dumps_json([dict(zip(header, r)) for r in rows]))
    else:
        _emit(args, file_io.csv_text(header, rows))


def _load_params(args):
    path = args.params or get_config().params_path
    if not path:
        raise SchemaError("需要 --params 或配置中的 params_path")
    return file_io.load_params(path)


def _setting(args, name: str, section: dict, default=None):
    """命令行值优先，其次是配置中的同名键"""
    value = getattr(args, name, None)
    if value is None:
        value = section.get(name, default)
    return value



# ---------------------------------------------------------------- 子命令

def cmd_surface(args) -> int:
    params = _load_params(args)
    grid_text = args.grid or get_config().grid
    if not grid_text:
        raise SchemaError("需要 --grid")
    table = grid_scan(params, GridSpec.parse(grid_text), threads=args.threads)
    n = table.n_branches
    header = ['qx', 'qy'] + [f'{p}_v{i + 1}' for i in range(n) for p in ('re', 'im')] + ['rigidity']
    rows = []
    for j in range(len(table.qx)):
        v = table.values[j]
        row = [float(table.qx[j]), float(table.qy[j])]
        for i in range(n):
            row += [float(v[i].real), float(v[i].imag)]
        rows.append(row + [float(table.rigidity[j])])
    _emit_table(args, header, rows)
    return 0


def cmd_slice(args) -> int:
    params = _load_params(args)
    if args.rho is not None:
        # 固定 ρ 的角向扫描
        a, b, n = _parse_triplet(args.phi)
        grid = GridSpec("polar", (args.rho, args.rho, 1), (math.radians(a), math.radians(b), n))
        table = grid_scan(params, grid, threads=args.threads)
        k = table.n_branches
        header = ['phi_deg'] + [f'{p}_v{i + 1}' for i in range(k) for p in ('re', 'im')] + ['rigidity']
        phis = np.degrees(grid.axes()[1])
        rows = []
        for j, phi in enumerate(phis):
            row = [float(phi)]
            for i in range(k):
                row += [float(table.values[j][i].real), float(table.values[j][i].imag)]
            rows.append(row + [float(table.rigidity[j])])
        _emit_table(args, header, rows)
        return 0

    qx = _parse_range(args.qx)
    if isinstance(params, PJTParams):
        branches = analytic_slice_potentials(params, qx)
    else:
        branches = jt_slice_potentials(params, qx)
    header = ['qx'] + [f'{p}_v{i + 1}' for i in range(len(branches)) for p in ('re', 'im')]
    rows = []
    for j, x in enumerate(qx):
        row = [float(x)]
        for values in branches:
            row += [float(values[j].real), float(values[j].imag)]
        rows.append(row)
    _emit_table(args, header, rows)
    return 0


def _loop_from(args) -> LoopSpec:
    """命令行优先，缺省项取配置 loop 段"""
    section = get_config().loop
    center = args.center if args.center is not None else section.get('center', '0,0')
    if isinstance(center, str):
        center = _parse_pair(center)
    else:
        try:
            center = NuclearCoords(*(float(v) for v in center))
        except (TypeError, ValueError):
            raise ConfigError(f"loop.center 应为 [qx, qy]: {center!r}", {'key': 'loop.center'})
    radius = _setting(args, 'radius', section)
    if radius is None:
        raise SchemaError("需要 --radius 或配置中的 loop.radius")
    start = _setting(args, 'start_deg', section, 0.0)
    return LoopSpec(center=center, radius=float(radius), n_points=int(_setting(args, 'n_points', section, 64)),
                    start_angle=math.radians(float(start)))


def cmd_berry(args) -> int:
    params = _load_params(args)
    section = get_config().loop
    result = berry_phase(params, _loop_from(args), method=_setting(args, 'method', section, LINE_INTEGRAL),
                         branch=int(_setting(args, 'branch', section, 0)))
    logger.info(f"[Berry] τ = {result.tau:.6f}，置换 {result.permutation}")
    _emit(args, file_io.dumps_json(result.to_dict()))
    return 0


def _jt_only(params, flag: str) -> JTParams:
    if not isinstance(params, JTParams):
        raise DomainError(f"{flag} 只适用于 JT 模型")
    return params


def cmd_nac(args) -> int:
    params = _load_params(args)
    Q = _parse_pair(args.at)
    if args.analytic:
        grad, field = analytic_jt_nac(_jt_only(params, '--analytic'), Q)
        if not args.polar:
            field = field.to_cartesian()
    else:
        field = numeric_nac(params, Q, richardson=args.richardson, gauge=args.gauge)
        if args.polar:
            field = field.to_polar()
    names = ('rho', 'phi') if field.basis == 'polar' else ('qx', 'qy')
    out = {
        'at': [Q.qx, Q.qy],
        'basis': field.basis,
        'gauge': field.gauge,
        'F': {c: field.F[..., d] for d, c in enumerate(names)},
    }
    if args.analytic:
        state = jt_adiabatic(params, Q)
        out['grad_theta'] = {'rho': grad[0], 'phi': grad[1]}
        out['theta'] = state.theta
        out['values'] = [state.v1, state.v2]
        out['T'] = jt_eigvecs(state.theta)
    if args.with_lambda:
        ff, div = lambda_terms(params, Q)
        out['FF'] = ff
        out['divF'] = div
    _emit(args, file_io.dumps_json(out))
    return 0


def cmd_find_ep(args) -> int:
    params = _load_params(args)
    region = Region(rho_min=args.rho_min, rho_max=args.rho_max)
    points = find_exceptional_points(params, region)
    logger.info(f"[EP] 找到 {len(points)} 个简并点")
    out = {'points': [p.to_dict() for p in points]}
    if isinstance(params, JTParams):
        # 解析解作对照，g=0 时只有中心交叉点
        try:
            out['analytic'] = {'rho_c': jt_critical_radius(params),
                               'points': [p.to_dict() for p in jt_exceptional_points(params)]}
        except NoFiniteEPError:
            out['analytic'] = {'rho_c': None, 'points': []}
    _emit(args, file_io.dumps_json(out))
    return 0


def cmd_seams(args) -> int:
    params = _load_params(args)
    if args.rho is not None:
        # JT 固定 ρ 的解析接缝角
        jt = _jt_only(params, '--rho')
        rows = [[args.rho, math.degrees(phi), classify_seam_point(jt, args.rho, phi)]
                for phi in jt_seam_angles(jt, args.rho)]
        _emit_table(args, ['rho', 'phi_deg', 'kind'], rows)
        return 0
    a, b = (int(v) for v in args.branches.split(','))
    trace = trace_seams(params, Region(rho_max=args.rho_max), branches=(a, b),
                        n_rho=args.n_rho, n_phi=args.n_phi)
    if trace.degenerate:
        logger.warning("[Seam] 参数全为实数，Im 接缝处处简并，不输出曲线")
    rows = []
    for cid, curve in enumerate(trace.curves):
        for Q in curve.points:
            rows.append([cid, curve.kind, Q.qx, Q.qy, Q.rho, math.degrees(Q.phi)])
    _emit_table(args, ['curve', 'kind', 'qx', 'qy', 'rho', 'phi_deg'], rows)
    return 0


def _fit_data(args) -> str:
    path = _setting(args, 'data', get_config().fit)
    if not path:
        raise SchemaError("需要 --data 或配置中的 fit.data")
    return path


def cmd_fit(args) -> int:
    data = file_io.read_slice_data(_fit_data(args))
    model = args.model or get_config().model
    order = args.order or get_config().order
    if model == 'jt':
        result = fit_jt_slice(data)
    else:
        init = _setting(args, 'init', get_config().fit)
        result = fit_pjt_slice(data, order=order, init=file_io.load_params(init) if init else None)
    _emit(args, file_io.dumps_json(file_io.fit_result_to_dict(result)))
    return 0


def cmd_bw_fit(args) -> int:
    curve = file_io.read_time_delay(_fit_data(args))
    init = [float(v) for v in args.init.split(',')] if args.init else None
    fit = fit_time_delay(curve, int(_setting(args, 'n_res', get_config().fit, 1)), init=init)

    out = {
        'resonances': [{'eps': e, 'gamma': g} for e, g in fit.resonances],
        'bg': fit.bg,
        'residual': fit.result.residual,
        'converged': fit.result.converged,
        'flags': fit.result.diagnostics.get('flags', []),
    }
    if fit.result.covariance is not None:
        out['covariance'] = fit.result.covariance
    _emit(args, file_io.dumps_json(out))
    return 0


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else get_config().seed
    if args.kind == 'time-delay':
        resonances = []
        for item in (args.resonances or '').split(','):
            if item:
                eps, gamma = item.split(':')
                resonances.append((float(eps), float(gamma)))
        if not resonances:
            raise SchemaError("time-delay 需要 --resonances eps:gamma,...")
        curve = synth_time_delay(_parse_range(args.energies), resonances, args.bg,
                                 noise=args.noise, seed=seed)
        _emit(args, file_io.csv_text(file_io.TIME_DELAY_COLUMNS,
                                     zip(curve.energies.tolist(), curve.values.tolist())))
        return 0
    params = _load_params(args)
    samples = synth_data(params, _parse_range(args.qx), noise=args.noise, seed=seed, v_ion=args.v_ion)
    _emit(args, file_io.csv_text(file_io.SLICE_COLUMNS,
                                 ([s.qx, s.branch, s.eps_n, s.gamma_n, s.v_ion] for s in samples)))
    return 0


def cmd_validate(args) -> int:
    report = file_io.validate_files(args.files)
    sys.stdout.write(file_io.dumps_json(report))
    if any(item['kind'] == 'schema' for item in report):
        return 2
    return 1 if report else 0


# ---------------------------------------------------------------- 参数解析

class JSONErrorParser(argparse.ArgumentParser):
    """参数错误不直接退出，转成 SchemaError 交给 run_command 输出 JSON"""

    def error(self, message):
        raise SchemaError(f"命令行参数错误: {message}", {'usage': self.format_usage().strip()})


def build_parser() -> argparse.ArgumentParser:
    parser = JSONErrorParser(prog='vibronic', description='复 JT/PJT 振动电子耦合工具包')
    parser.add_argument('-v', '--verbose', action='store_true', help='输出调试日志')
    parser.add_argument('--config', type=str, help='JSON 运行配置文件')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p, params=True, table=False):
        if params:
            p.add_argument('--params', type=str, help='参数 JSON 文件')
        p.add_argument('--output', '-o', type=str, help='输出文件（默认标准输出）')
        if table:
            p.add_argument('--format', choices=('csv', 'json'), default=None, help='表格格式')
        return p

    p = common(sub.add_parser('surface', help='网格上的复绝热势'), table=True)
    p.add_argument('--grid', type=str, help='qx=a:b:n,qy=a:b:n 或 rho=a:b:n,phi=度:度:n')
    p.add_argument('--threads', type=int, default=None, help='并行线程数')
    p.set_defaults(func=cmd_surface)

    p = common(sub.add_parser('slice', help='Qy=0 切片或固定 ρ 的角向扫描'), table=True)
    p.add_argument('--qx', type=str, default='-0.5:0.5:101', help='切片范围 a:b:n')
    p.add_argument('--rho', type=float, default=None, help='固定 ρ 做角向扫描')
    p.add_argument('--phi', type=str, default='0:360:361', help='角向范围（度）a:b:n')
    p.add_argument('--threads', type=int, default=None, help='并行线程数')
    p.set_defaults(func=cmd_slice)

    p = common(sub.add_parser('berry', help='圆形回路上的几何相位'))
    # 未给出的项依次取配置 loop 段和内置默认值
    p.add_argument('--center', type=str, default=None, help='回路中心 qx,qy（默认 0,0）')
    p.add_argument('--radius', type=float, default=None, help='回路半径')
    p.add_argument('--n-points', type=int, default=None, help='初始离散点数（默认 64）')
    p.add_argument('--start-deg', type=float, default=None, help='起点相对中心的方位角（度）')
    p.add_argument('--method', choices=(LINE_INTEGRAL, HOLONOMY), default=None)
    p.add_argument('--branch', type=int, default=None, help='绝热态下标（从 0 开始）')
    p.set_defaults(func=cmd_berry)

    p = common(sub.add_parser('nac', help='一点上的非绝热耦合矩阵'))
    p.add_argument('--at', type=str, required=True, help='坐标 qx,qy')
    p.add_argument('--gauge', choices=(SINGLE_VALUED, RAW), default=SINGLE_VALUED)
    p.add_argument('--polar', action='store_true', help='输出 (ρ, φ) 分量')
    p.add_argument('--richardson', action='store_true', help='Richardson 外推')
    p.add_argument('--with-lambda', action='store_true', help='同时输出 FF 与 ∇·F')
    p.add_argument('--analytic', action='store_true', help='JT 模型：解析 F^s、∇θ 与本征矢')
    p.set_defaults(func=cmd_nac)

    p = common(sub.add_parser('find-ep', help='搜索例外点与锥形交叉'))
    p.add_argument('--rho-min', type=float, default=0.0)
    p.add_argument('--rho-max', type=float, default=0.6)
    p.set_defaults(func=cmd_find_ep)

    p = common(sub.add_parser('seams', help='Re/Im 简并接缝'), table=True)
    p.add_argument('--rho-max', type=float, default=0.6)
    p.add_argument('--branches', type=str, default='0,1', help='本征对下标 a,b')
    p.add_argument('--n-rho', type=int, default=200)
    p.add_argument('--n-phi', type=int, default=720)
    p.add_argument('--rho', type=float, default=None, help='JT 模型：只输出该 ρ 上的解析接缝角')
    p.set_defaults(func=cmd_seams)

    p = common(sub.add_parser('fit', help='切片数据拟合模型参数'), params=False)
    p.add_argument('--data', type=str, default=None, help='切片 CSV: qx,branch,eps_n,gamma_n,v_ion')
    p.add_argument('--model', choices=('pjt', 'jt'), default=None)
    p.add_argument('--order', type=int, choices=(2, 3), default=None)
    p.add_argument('--init', type=str, help='初值参数 JSON')
    p.set_defaults(func=cmd_fit)

    p = common(sub.add_parser('bw-fit', help='Breit-Wigner 时间延迟拟合'), params=False)
    p.add_argument('--data', type=str, default=None, help='时间延迟 CSV: e,ddelta_de')
    p.add_argument('--n-res', type=int, default=None, help='共振个数（默认 1）')
    p.add_argument('--init', type=str, help='初值 eps1,gamma1,...,bg')
    p.set_defaults(func=cmd_bw_fit)

    p = common(sub.add_parser('synth', help='生成合成数据'))
    p.add_argument('--kind', choices=('slice', 'time-delay'), default='slice')
    p.add_argument('--qx', type=str, default='-0.5:0.5:41', help='切片范围 a:b:n')
    p.add_argument('--noise', type=float, default=0.0, help='高斯噪声标准差（Hartree）')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--v-ion', type=float, default=0.0)
    p.add_argument('--resonances', type=str, help='eps:gamma,eps:gamma,...')
    p.add_argument('--bg', type=float, default=0.0)
    p.add_argument('--energies', type=str, default='0.25:0.35:201', help='能量范围 a:b:n')
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('validate', help='检查文件格式与不变量')
    p.add_argument('files', nargs='+')
    p.set_defaults(func=cmd_validate)
    return parser


def _setup_logging(verbose: bool):
    # basicConfig 只在第一次调用时生效
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(levelname)s %(name)s %(message)s', stream=sys.stderr)
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """执行一条子命令，返回退出码；失败时在 stderr 输出 JSON 错误对象"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SchemaError as e:
        sys.stderr.write(json.dumps(e.to_dict(), ensure_ascii=False) + '\n')
        return e.exit_code
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    _setup_logging(args.verbose)

    try:
        if args.config:
            set_config(RunConfig.load(args.config))
        config = get_config()
        if getattr(args, 'format', 'csv') is None:
            args.format = config.output_format
        if getattr(args, 'output', None) is None and config.output:
            args.output = config.output
        if getattr(args, 'threads', None) is not None:
            config.threads = max(1, args.threads)
        return args.func(args)
    except VibronicError as e:
        sys.stderr.write(json.dumps(e.to_dict(), ensure_ascii=False, default=str) + '\n')
        return e.exit_code
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        logger.debug("[Error] 未分类的数值错误", exc_info=True)
        sys.stderr.write(json.dumps({'error': type(e).__name__, 'message': str(e), 'details': {}},
                                    ensure_ascii=False) + '\n')
        return 3


def main():
    """程序入口"""
    sys.exit(run_command())


if __name__ == "__main__":
    main()
