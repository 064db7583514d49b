from __future__ import annotations

import pytest
import torch

from mmslt.config import toy_config
from mmslt.data import make_toy_dataset
from mmslt.models import ModelProfile

# acceptance tests append (criterion, passed, detail); printed once at the end
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def toy_ds():
    return make_toy_dataset(200, 20, 6, seed=0)


@pytest.fixture(scope="session")
def small_ds():
    return make_toy_dataset(40, 8, 4, seed=3)


@pytest.fixture
def tiny_profile():
    return ModelProfile.toy(visual_dim=16, desc_dim=8, model_dim=16, enc_layers=1, dec_layers=1,
                            text_layers=1, desc_layers=1, heads=2, ffn_dim=32, desc_heads=2,
                            desc_ffn_dim=16, lora_rank=4, lora_alpha=8.0)


@pytest.fixture
def fast_cfg():
    cfg = toy_config()
    cfg.mmlp.epochs = 1
    cfg.slt.epochs = 1
    cfg.decode.beam_size = 2
    return cfg
