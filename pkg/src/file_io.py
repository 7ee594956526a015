"""
文件读写模块
参数 JSON、切片数据 / 时间延迟 CSV 的读写与校验；所有输出都先写临时文件再重命名
"""
import csv
import io
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from errors import DomainError, SchemaError
from fitting import FitResult, ResonanceSample, TimeDelayCurve
from vibronic import JTParams, ModelParams, PJTParams, model_name

logger = logging.getLogger(__name__)

SLICE_COLUMNS = ('qx', 'branch', 'eps_n', 'gamma_n', 'v_ion')
TIME_DELAY_COLUMNS = ('e', 'ddelta_de')

JT_NAMES = ('eps_E', 'omega', 'k', 'g')
PJT_NAMES = ('eps_E', 'eps_A', 'omega', 'k', 'g', 'alpha')
PJT_THIRD_ORDER_NAMES = ('beta', 'nu', 'mu')


def fmt(value: float) -> str:
    """17 位有效数字，可无损回读"""
    return format(float(value), '.17g')


def atomic_write(path, text: str):
    target = Path(path)
    directory = str(target.parent) if str(target.parent) else '.'
    fd, tmp = tempfile.mkstemp(dir=directory, suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps_json(obj: Any) -> str:
    return json.dumps(_jsonable(obj), ensure_ascii=False, indent=2, sort_keys=False) + '\n'


def write_json(path, obj: Any):
    atomic_write(path, dumps_json(obj))


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """浮点列统一按 17 位有效数字写出"""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    atomic_write(path, csv_text(header, rows))


# ---------------------------------------------------------------- 参数文件

def _parse_complex(value, name: str) -> complex:
    if not (isinstance(value, (list, tuple)) and len(value) == 2
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        raise SchemaError(f"参数 {name} 必须写成 [re, im] 数组: {value!r}", {'param': name})
    return complex(value[0], value[1])


def params_to_dict(params: ModelParams) -> Dict[str, Any]:
    data = {
        'model': model_name(params),
        'order': params.order,
        'params': {n: [v.real, v.imag] for n, v in zip(params.names(), params.values())},
    }
    if params.order == 3:
        data['metadata'] = {'third_order_domain': 'qy=0 slice only'}
    return data


def params_from_dict(data: Dict[str, Any]) -> ModelParams:
    if not isinstance(data, dict):
        raise SchemaError("参数文件顶层必须是对象")
    model = data.get('model')
    order = data.get('order', 2)
    raw = data.get('params')
    if model not in ('pjt', 'jt'):
        raise SchemaError(f"model 必须是 pjt 或 jt: {model!r}")
    if order not in (2, 3) or (model == 'jt' and order != 2):
        raise SchemaError(f"{model} 模型不支持 order={order!r}")
    if not isinstance(raw, dict):
        raise SchemaError("缺少 params 对象")
    if model == 'jt':
        expected = JT_NAMES
    else:
        expected = PJT_NAMES + (PJT_THIRD_ORDER_NAMES if order == 3 else ())
    missing = [n for n in expected if n not in raw]
    extra = sorted(set(raw) - set(expected))
    if missing or extra:
        raise SchemaError("参数名不匹配", {'missing': missing, 'unexpected': extra})
    values = {n: _parse_complex(raw[n], n) for n in expected}
    try:
        if model == 'jt':
            return JTParams(**values)
        return PJTParams(order=order, **values)
    except DomainError as e:
        raise SchemaError(e.message, e.details)


def load_params(path) -> ModelParams:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"读取参数文件失败: {e}", {'path': str(path)})
    return params_from_dict(data)


def save_params(path, params: ModelParams):
    write_json(path, params_to_dict(params))


def fit_result_to_dict(result: FitResult) -> Dict[str, Any]:
    data = params_to_dict(result.params) if result.params is not None else {}
    data.update({
        'residual': result.residual,
        'iterations': result.iterations,
        'converged': result.converged,
        'diagnostics': result.diagnostics,
    })
    if result.covariance is not None:
        data['covariance'] = result.covariance
    return data


# ---------------------------------------------------------------- CSV

def _read_rows(path, columns: Sequence[str]) -> List[Dict[str, str]]:
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.DictReader(f)
            header = [h.strip() for h in (reader.fieldnames or [])]
            missing = [c for c in columns if c not in header]
            if missing:
                raise SchemaError(f"CSV 缺少列: {missing}", {'path': str(path)})
            reader.fieldnames = header
            return [dict(row, _line=reader.line_num) for row in reader]
    except OSError as e:
        raise SchemaError(f"读取 CSV 失败: {e}", {'path': str(path)})


def _number(row: Dict[str, str], name: str) -> float:
    try:
        return float(row[name])
    except (TypeError, ValueError):
        raise SchemaError(f"第 {row['_line']} 行 {name} 不是数字: {row.get(name)!r}",
                          {'row': row['_line'], 'column': name})


def read_slice_data(path) -> List[ResonanceSample]:
    samples = []
    for row in _read_rows(path, SLICE_COLUMNS):
        branch = _number(row, 'branch')
        if branch != int(branch):
            raise SchemaError(f"第 {row['_line']} 行 branch 必须是整数", {'row': row['_line']})
        samples.append(ResonanceSample(qx=_number(row, 'qx'), branch=int(branch),
                                       eps_n=_number(row, 'eps_n'), gamma_n=_number(row, 'gamma_n'),
                                       v_ion=_number(row, 'v_ion')))
    return samples


def write_slice_data(path, samples: Sequence[ResonanceSample]):
    write_csv(path, SLICE_COLUMNS,
              ([s.qx, s.branch, s.eps_n, s.gamma_n, s.v_ion] for s in samples))


def read_time_delay(path) -> TimeDelayCurve:
    rows = _read_rows(path, TIME_DELAY_COLUMNS)
    return TimeDelayCurve([_number(r, 'e') for r in rows], [_number(r, 'ddelta_de') for r in rows])


def write_time_delay(path, curve: TimeDelayCurve):
    write_csv(path, TIME_DELAY_COLUMNS, zip(curve.energies.tolist(), curve.values.tolist()))


# ---------------------------------------------------------------- 校验

def _violation(path, message: str, row: Optional[int] = None, kind: str = 'invariant') -> Dict[str, Any]:
    return {'path': str(path), 'row': row, 'kind': kind, 'message': message}


def _validate_csv(path) -> List[Dict[str, Any]]:
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.reader(f)
            header = [h.strip() for h in next(reader, [])]
            rows = [(reader.line_num, r) for r in reader]
    except OSError as e:
        raise SchemaError(f"无法读取文件: {e}", {'path': str(path)})

    report = []
    if set(SLICE_COLUMNS) <= set(header):
        kind = 'slice'
    elif set(TIME_DELAY_COLUMNS) <= set(header):
        kind = 'time_delay'
    elif {'qx', 'qy', 'rigidity'} <= set(header):
        kind = 'surface'
    else:
        return [_violation(path, f"无法识别的表头: {header}", kind='schema')]

    col = {name: i for i, name in enumerate(header)}
    prev_e = None
    for line, r in rows:
        if len(r) != len(header):
            report.append(_violation(path, f"列数 {len(r)} 与表头 {len(header)} 不符", line, 'schema'))
            continue
        try:
            values = {name: float(r[i]) for name, i in col.items()}
        except ValueError:
            report.append(_violation(path, "存在非数字字段", line, 'schema'))
            continue
        bad = [n for n, v in values.items() if not math.isfinite(v)]
        if bad and kind != 'surface':
            report.append(_violation(path, f"非有限值: {bad}", line))
        if kind == 'slice':
            if values['gamma_n'] < 0:
                report.append(_violation(path, f"gamma_n = {values['gamma_n']} < 0", line))
            if values['branch'] not in (1.0, 2.0, 3.0):
                report.append(_violation(path, f"branch 必须是 1、2 或 3: {r[col['branch']]}", line))
        elif kind == 'time_delay':
            if prev_e is not None and values['e'] <= prev_e:
                report.append(_violation(path, "能量网格不是严格递增", line))
            prev_e = values['e']
        elif not 0.0 <= values['rigidity'] <= 1.0 + 1e-12:
            report.append(_violation(path, f"相位刚性超出 [0, 1]: {values['rigidity']}", line))
    return report


def _validate_json(path) -> List[Dict[str, Any]]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise SchemaError(f"无法读取文件: {e}", {'path': str(path)})
    except json.JSONDecodeError as e:
        return [_violation(path, f"JSON 解析失败: {e}", kind='schema')]
    try:
        params_from_dict(data)
    except SchemaError as e:
        return [_violation(path, e.message, kind='schema')]
    return []


def validate_files(paths: Sequence) -> List[Dict[str, Any]]:
    """
    只检查格式与不变量，不做计算

    Returns:
        违规列表，每项含 path、row（文件行号）、kind（schema/invariant）、message；空列表表示全部合格
    """
    report = []
    for path in paths:
        suffix = Path(path).suffix.lower()
        if suffix == '.json':
            found = _validate_json(path)
        elif suffix == '.csv':
            found = _validate_csv(path)
        else:
            found = [_violation(path, f"不支持的文件类型: {suffix or '(无扩展名)'}", kind='schema')]
        for item in found:
            logger.warning(f"[Validate] {item['path']} 第 {item['row']} 行: {item['message']}")
        report.extend(found)
    return report
