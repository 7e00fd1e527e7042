import pytest

from epikv.toymodel import ModelConfig, init_model


@pytest.fixture(scope="session")
def model():
    """Default desk model (L=4, H_q=4, H_kv=2, d_head=16)."""
    return init_model(ModelConfig())


@pytest.fixture(scope="session")
def tiny_model():
    """One layer, one head: small enough for the scalar-loop oracle."""
    return init_model(ModelConfig(n_layers=1, n_q_heads=1, n_kv_heads=1, d_head=8, vocab=64, seed=3, max_positions=256))


@pytest.fixture(scope="session")
def gqa_model():
    return init_model(ModelConfig(n_layers=2, n_q_heads=4, n_kv_heads=2, d_head=4, vocab=64, seed=5, max_positions=256))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
