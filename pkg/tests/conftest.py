"""
pytest 公共夹具：64位精度、固定随机源、小模型配置、临时目录下的应用
"""
import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from config import TestingConfig  # noqa: E402
from core.model_zoo import ModelConfig, StageConfig, micro_config  # noqa: E402
from core.tensor import current_tape, set_default_dtype  # noqa: E402
from core.trainer import DatasetSpec, TrainRunConfig  # noqa: E402


@pytest.fixture(autouse=True)
def float64_and_clean_tape():
    set_default_dtype('float64')
    current_tape().clear()
    yield
    current_tape().clear()
    set_default_dtype('float64')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_cfg():
    return micro_config('filter', num_classes=4, input_size=16)


@pytest.fixture
def conv_only_cfg():
    """没有 FilterAttention 阶段的模型"""
    return ModelConfig(input_size=16, stem_channels=8, num_classes=2,
                       stages=[StageConfig('inverted_residual', 8)])


@pytest.fixture
def tiny_run_cfg(micro_cfg):
    """几秒内跑完的训练配置"""
    return TrainRunConfig(
        model=micro_cfg,
        data=DatasetSpec(kind='synthetic', num_classes=4, train_size=48, val_size=16, seed=0),
        epochs=2, batch_size=16, seed=0,
    )


@pytest.fixture
def testing_config(tmp_path, monkeypatch):
    """把测试配置的所有目录重定向到本用例的临时目录"""
    for name, sub in (('RUNS_DIR', 'runs'), ('STATIC_FILES_DIR', 'static'),
                      ('LOG_DIR', 'logs'), ('DATA_DIR', 'raw')):
        path = str(tmp_path / sub)
        os.makedirs(path, exist_ok=True)
        monkeypatch.setattr(TestingConfig, name, path)
    monkeypatch.setattr(TestingConfig, 'BENCH_REPETITIONS', 30)
    monkeypatch.setattr(TestingConfig, 'BENCH_WARMUP', 5)
    return TestingConfig


@pytest.fixture
def app(testing_config):
    from app import create_app
    application = create_app('testing')
    yield application
    set_default_dtype('float64')


@pytest.fixture
def client(app):
    return app.test_client()
