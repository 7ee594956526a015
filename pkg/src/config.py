"""
配置管理模块
管理模型选择、网格/回路/拟合设置和数值容差
"""
import json
import os
import tempfile
from pathlib import Path
from dataclasses import dataclass, asdict, field, fields
from typing import Optional, Dict, Any

from errors import ConfigError


THREADS_ENV = 'VIBRONIC_THREADS'
LOOP_KEYS = ('center', 'radius', 'n_points', 'start_deg', 'method', 'branch')
FIT_KEYS = ('data', 'init', 'n_res')


@dataclass
class Tolerances:
    """数值容差与算法超参数"""
    # 本征分解
    coalescence_threshold: float = 1e-8  # 相位刚性低于此值视为例外点邻域
    overlap_threshold: float = 0.5  # 路径跟踪的最小重叠
    degeneracy_tol: float = 1e-10

    # 例外点搜索
    ep_grid_drho: float = 0.002
    ep_grid_dphi_deg: float = 0.25
    ep_merge_radius: float = 1e-6
    ep_max_candidates: int = 64
    validity_radius: float = 0.6  # 超出此半径的结果标记为外推
    polish_dps: int = 40  # mpmath 精修精度（十进制位）

    # 非绝热耦合与几何相位
    nac_step: float = 1e-5
    berry_tol: float = 1e-4
    berry_max_points: int = 16384
    loop_exclusion: float = 1e-4

    # Levenberg-Marquardt
    lm_damping: float = 1e-3
    lm_factor: float = 10.0
    lm_ftol: float = 1e-12
    lm_max_iterations: int = 500
    weight_real: float = 1.0
    weight_imag: float = 1.0


@dataclass
class RunConfig:
    """运行配置"""
    # 模型设置
    model: str = "pjt"  # pjt | jt
    order: int = 2
    params_path: Optional[str] = None

    # 任务设置
    grid: Optional[str] = None  # 例如 "qx=-0.5:0.5:101,qy=-0.5:0.5:101"
    loop: Dict[str, Any] = field(default_factory=dict)  # berry 的缺省回路，键见 LOOP_KEYS
    fit: Dict[str, Any] = field(default_factory=dict)  # fit / bw-fit 的缺省输入，键见 FIT_KEYS

    # 输出设置
    output: Optional[str] = None
    output_format: str = "csv"  # csv | json
    seed: int = 0
    threads: int = 1

    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self):
        if isinstance(self.tolerances, dict):
            self.tolerances = _build(Tolerances, self.tolerances, 'tolerances')
        self.validate()

    def validate(self):
        """执行前校验"""
        if self.model not in ('pjt', 'jt'):
            raise ConfigError(f"未知模型: {self.model}", {'key': 'model'})
        if self.order not in (2, 3):
            raise ConfigError(f"order 只能是 2 或 3: {self.order}", {'key': 'order'})
        if self.model == 'jt' and self.order != 2:
            raise ConfigError("JT 模型只有二阶形式", {'key': 'order'})
        if self.output_format not in ('csv', 'json'):
            raise ConfigError(f"未知输出格式: {self.output_format}", {'key': 'output_format'})
        if self.threads < 1:
            raise ConfigError("threads 必须 >= 1", {'key': 'threads'})
        for name, allowed in (('loop', LOOP_KEYS), ('fit', FIT_KEYS)):
            section = getattr(self, name)
            if not isinstance(section, dict):
                raise ConfigError(f"{name} 必须是对象", {'key': name})
            unknown = sorted(set(section) - set(allowed))
            if unknown:
                raise ConfigError(f"{name} 中有未知键: {', '.join(unknown)}",
                                  {'key': name, 'unknown_keys': unknown})

    @classmethod
    def load(cls, path) -> 'RunConfig':
        """加载配置，未知键直接拒绝"""
        config_path = Path(path)
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"读取配置失败: {e}", {'path': str(config_path)})
        if not isinstance(data, dict):
            raise ConfigError("配置文件顶层必须是对象", {'path': str(config_path)})
        return _build(cls, data, 'config')

    def save(self, path):
        """保存配置（临时文件 + 重命名）"""
        config_path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=str(config_path.parent or '.'), suffix='.tmp')
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            json.dump(asdict(self), f, ensure_ascii=False, indent=2)
        os.replace(tmp, config_path)


def _build(cls, data: Dict[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where} 中有未知键: {', '.join(unknown)}", {'unknown_keys': unknown})
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{where} 字段类型错误: {e}")


def _threads_from_env(default: int) -> int:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return default
    try:
        return max(1, int(value))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} 必须是整数: {value!r}")


# 全局配置实例
_config: Optional[RunConfig] = None


def get_config() -> RunConfig:
    """获取全局配置"""
    global _config
    if _config is None:
        _config = RunConfig()
        _config.threads = _threads_from_env(_config.threads)
    return _config


def set_config(config: RunConfig) -> RunConfig:
    """替换全局配置"""
    global _config
    config.threads = _threads_from_env(config.threads)
    _config = config
    return _config


def get_tolerances() -> Tolerances:
    """当前生效的容差"""
    return get_config().tolerances
