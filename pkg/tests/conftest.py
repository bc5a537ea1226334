import os
import sys

import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.use_deterministic_algorithms(True)


@pytest.fixture(scope="session")
def tiny_dataset():
    from litecodec.data import make_synthetic

    return make_synthetic("mixed", 8, 32, seed=3)


@pytest.fixture(scope="session")
def tiny_stage1(tiny_dataset):
    from litecodec.backbone import BackboneConfig
    from litecodec.codec import CodecConfig
    from litecodec.flow import pretrain_stage1
    from litecodec.training import Schedule

    bb = BackboneConfig(block_type="global_attention", width=32, depth=2, heads=2, timestep_conditioning=True,
                        pixel_head_width=16)
    return pretrain_stage1(tiny_dataset, "compression", CodecConfig(16, 4, decoder_width=32), bb,
                           Schedule(steps=4, batch=4, lr=1e-3))


@pytest.fixture(scope="session")
def tiny_stage2(tiny_stage1, tiny_dataset):
    from litecodec.one_step import LossWeights, finetune_stage2
    from litecodec.training import Schedule

    return finetune_stage2(tiny_stage1, tiny_dataset, LossWeights(),
                           Schedule(steps=4, batch=4, lr=1e-3, phase1_steps=2))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
