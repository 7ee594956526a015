import os
import sys

import pytest

SRC = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src')
if SRC not in sys.path:
    sys.path.insert(0, SRC)

from config import RunConfig, set_config  # noqa: E402
from vibronic import JTParams, PJTParams  # noqa: E402

# 已发表的三组拟合参数（Hartree）
PJT_SECOND = dict(
    eps_E=0.3339 - 0.0121j, eps_A=0.3760 - 0.0027j, omega=-0.0031 + 0.0019j,
    k=-0.0037 - 0.0012j, g=0.0085 - 0.0021j, alpha=0.0627 + 0.0018j,
)
PJT_THIRD = dict(
    eps_E=0.3339 - 0.0121j, eps_A=0.3760 - 0.0027j, omega=-0.0033 + 0.0020j,
    k=-0.0036 - 0.0011j, g=0.0086 - 0.0021j, alpha=0.0627 + 0.0018j,
    beta=0.0011, nu=-0.0005 - 0.0003j, mu=-0.0006 - 0.0004j,
)
JT_SECOND = dict(eps_E=0.3339 - 0.0121j, omega=-0.0741 + 0.0089j, k=-0.0034 - 0.0011j, g=0.0268 + 0.0014j)


@pytest.fixture(autouse=True)
def fresh_config():
    """每个测试使用默认配置"""
    set_config(RunConfig())
    yield


@pytest.fixture
def pjt2():
    return PJTParams(**PJT_SECOND)


@pytest.fixture
def pjt3():
    return PJTParams(order=3, **PJT_THIRD)


@pytest.fixture
def jt():
    return JTParams(**JT_SECOND)
