import numpy as np
import pytest

from diep.data import RedundancyEntry, RedundancySpec, TaskSpec, gen_task, init_model, plant_redundancy, pretrain_toy
from diep.moe import ModelConfig, MoEModel


def tiny_model(n_layers=2, n_experts=4, top_k=2, d_model=4, vocab=8, classes=3, seed=0, **kw) -> MoEModel:
    cfg = ModelConfig(n_layers, n_experts, top_k, d_model, vocab, classes, **kw)
    return MoEModel.init(cfg, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_task():
    spec = TaskSpec(n_domains=2, vocab=16, classes=3, seq_len=6, n_train=96, n_eval=48, n_calibration=24)
    return spec, gen_task(spec, 0)


@pytest.fixture(scope="session")
def planted_small(small_task):
    """3-layer, 4-expert model with one exact clone in layer 1, briefly pretrained."""
    spec, (train, evaluation, calib) = small_task
    cfg = ModelConfig(3, 4, 2, 8, spec.vocab, spec.classes)
    model = plant_redundancy(init_model(cfg, spec, 0), RedundancySpec((RedundancyEntry(1, 0, 1),)), 0)
    result = pretrain_toy(model, train, epochs=8, seed=0)
    return result.model, train, evaluation, calib


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, passed, detail):
    """Log one acceptance line (also shown in the terminal summary)."""
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    line = f"criterion {number:>4}: {status:4}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
