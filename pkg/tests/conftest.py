"""
测试公共夹具：默认动力学配置、RC 设置、小规模波形和一个小模拟器

slow 标记的测试（较慢的端到端检查）只在 --runslow 时运行。
"""
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from shared.learning.nnet import Mlp  # noqa: E402
from shared.learning.simlearn import (Normalization, SimArch, SimHyper, SimulatorModel,  # noqa: E402
                                      train_simulator)
from shared.lung.dynamics import (DynamicsConfig, PlantFactory, RcPlant, Waveform, iso_setting,  # noqa: E402
                                  pip_waveforms)
from shared.lung.explore import ISO_EXPLORATION, collect_dataset  # noqa: E402
from shared.utils.seeding import derive_rng  # noqa: E402

TINY_ARCH = SimArch(d=1, W=16, H_p=3, H_c=3, N_B=1)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行较慢的 slow 测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 较慢的测试，需要 --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def dynamics_cfg() -> DynamicsConfig:
    return DynamicsConfig()


@pytest.fixture
def rc_setting():
    return iso_setting(5, 50)


@pytest.fixture
def rc_factory(rc_setting) -> PlantFactory:
    return PlantFactory(setting=rc_setting)


@pytest.fixture
def waveforms():
    return pip_waveforms((20.0, 30.0))


@pytest.fixture(scope="session")
def episodes():
    """R5_C50 上 PIP 25 的 30 次探索呼吸"""
    setting = iso_setting(5, 50)
    plant = RcPlant(setting)
    return collect_dataset(plant, ISO_EXPLORATION[(5.0, 50.0)], Waveform(pip=25.0), 30, derive_rng(0, 'tests'))


@pytest.fixture(scope="session")
def tiny_simulator(episodes) -> SimulatorModel:
    return train_simulator(episodes, TINY_ARCH, SimHyper(epochs=20), seed=0, setting=iso_setting(5, 50))


@pytest.fixture
def random_simulator() -> SimulatorModel:
    """随机权重的模拟器（输出非平凡，用于梯度检查）"""
    arch = SimArch(d=1, W=8, H_p=3, H_c=3, N_B=1)
    width = arch.H_p + arch.H_c
    norm = Normalization(mean=np.zeros(width), scale=np.full(width, 30.0), target_mean=10.0, target_scale=2.0)
    return SimulatorModel(arch=arch, norm=norm, boundary=[Mlp(arch.widths, seed=1)], general=Mlp(arch.widths, seed=2))
