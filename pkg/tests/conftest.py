import pytest

from tarac import ModelConfig, SequenceLayout, build_prompt, init_weights

REFERENCE = ModelConfig(n_layers=8, n_heads=8, d_model=256, vocab_size=1024, max_seq_len=256, seed=0)
REFERENCE_LAYOUT = SequenceLayout(n_image=64, n_prompt=16, image_offset=1)

_acceptance: list[tuple[str, str]] = []


@pytest.fixture(scope="session")
def reference_weights():
    return init_weights(REFERENCE)


@pytest.fixture(scope="session")
def reference_prompt():
    return build_prompt(REFERENCE, REFERENCE_LAYOUT, seed=0)


@pytest.fixture(scope="session")
def small_weights():
    return init_weights(ModelConfig(n_layers=4, n_heads=4, d_model=32, vocab_size=96, max_seq_len=64, image_vocab=32, seed=7))


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome.upper()))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        terminalreporter.write_line(f"{outcome:7s} {name}")
