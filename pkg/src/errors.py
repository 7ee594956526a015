"""
异常定义模块
所有数值与输入错误的统一基类，CLI 根据 exit_code 返回退出码
"""
from typing import Any, Dict, Optional


class VibronicError(Exception):
    """工具包异常基类"""
    exit_code = 3

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        Exception.__init__(self, message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        """转换为可序列化的错误对象"""
        return {
            "error": type(self).__name__,
            "message": self.message,
            "details": self.details,
        }


class DomainError(VibronicError, ValueError):
    """输入超出定义域（非有限值、负宽度等）"""
    exit_code = 2


class ContractViolation(VibronicError, ValueError):
    """调用约定被破坏，例如传入非对称矩阵"""
    exit_code = 2


class UnsupportedRegionError(VibronicError):
    """三阶模型只在 Qy=0 切片上有定义"""


class SingularityError(VibronicError):
    """在奇点（θ 极点、简并点）处求值"""


class PathRefinementError(VibronicError):
    """路径相邻点之间的分支指派不唯一，需要加密路径"""

    def __init__(self, message: str, segment=None, details=None):
        details = dict(details or {})
        if segment is not None:
            details["segment"] = list(segment)
        VibronicError.__init__(self, message, details)
        self.segment = segment


class NoFiniteEPError(VibronicError):
    """g=0 时线性 JT 模型没有有限半径的例外点"""


class DegenerateParametersError(VibronicError):
    """参数组合使公式退化（例如纯实数参数下的接缝角公式）"""


class InvalidLoopError(VibronicError):
    """积分回路穿过或过于靠近简并点"""


class FitError(VibronicError):
    """拟合不收敛，附带目前为止最好的参数"""

    def __init__(self, message: str, best=None, details=None):
        VibronicError.__init__(self, message, details)
        self.best = best


class IllPosedError(FitError):
    """数据不足以确定全部参数"""


class ConfigError(VibronicError):
    """配置文件错误（未知键、类型不符）"""
    exit_code = 2


class SchemaError(VibronicError):
    """参数/数据文件格式错误"""
    exit_code = 2
