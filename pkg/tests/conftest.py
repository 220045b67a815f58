import numpy as np
import pytest
import torch

from siamdefect.config import Config, ModelConfig, TrainConfig

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(stage_channels=(8, 16, 16, 32), stage_depths=(1, 1, 1, 1), stage_heads=(1, 2, 2, 4),
                reduction_ratios=(8, 4, 2, 1), mlp_ratio=2.0, decoder_channels=16)
    base.update(kw)
    return ModelConfig(**base)


def tiny_config(**train_kw) -> Config:
    train = dict(input_size=(64, 64), iterations=4, batch_size=2, lr=1e-3, warmup_iters=2,
                 scale_range=(1.0, 1.0))
    train.update(train_kw)
    return Config(model=tiny_model_config(), train=TrainConfig(**train))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
