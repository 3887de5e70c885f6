import pytest
import torch
from hypothesis import settings

from camib.synthetic import BiasSpec, generate
from camib.train import TrainConfig

settings.register_profile("camib", max_examples=50, deadline=None, derandomize=True)
settings.load_profile("camib")

torch.set_default_dtype(torch.float64)


TINY_SPEC = BiasSpec(n_samples=64, n_eval=32, M=2, L=2, d_in=6, seed=3)
TINY_CONFIG = TrainConfig(epochs=2, batch_size=16, d=4, hidden=8, seed=5)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_regression():
    return generate(BiasSpec(n_samples=48, n_eval=24, M=2, L=3, d_in=4, task_kind="regression", seed=2))


@pytest.fixture
def tiny_config():
    return TINY_CONFIG


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> bool:
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
