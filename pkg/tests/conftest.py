
import time

import pytest
import torch

from dbaf.data import synthetic_faces
from dbaf.training import TrainConfig, train_stage1, train_stage2

# Desk-scale schedule shared by the toy training checks. The backbone trains
# from scratch here, so the step size is larger than the fine-tuning default.
TOY = dict(batch_size=4, lr=1e-3, steps=300, seed=0)

_ACCEPTANCE: list[tuple[str, str, float]] = []

# wall time of each session training run, read by the runtime-budget check
TRAIN_SECONDS: dict[str, float] = {}


@pytest.fixture(scope="session")
def faces():
    return synthetic_faces(16, size=64, seed=0)


@pytest.fixture(scope="session")
def stage1_ckpt(faces):
    t0 = time.perf_counter()
    ckpt = train_stage1(faces, TrainConfig(stage=1, **TOY))
    TRAIN_SECONDS["stage1"] = time.perf_counter() - t0
    return ckpt


@pytest.fixture(scope="session")
def stage2_ckpt(faces, stage1_ckpt):
    t0 = time.perf_counter()
    ckpt = train_stage2(faces, TrainConfig(stage=2, **TOY), stage1_ckpt)
    TRAIN_SECONDS["stage2"] = time.perf_counter() - t0
    return ckpt


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.module.__name__.endswith("test_acceptance"):
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        _ACCEPTANCE.append(("PASS" if report.passed else "FAIL", doc, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, doc, duration in _ACCEPTANCE:
        terminalreporter.write_line(f"[{status}] {doc} ({duration:.1f}s)")
