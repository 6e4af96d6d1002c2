import pytest

from segloc.corpus import gen_toy_corpus


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """Four-class 64x64 toy corpus shared by the whole session."""
    root = tmp_path_factory.mktemp("toy")
    fores, backs = gen_toy_corpus(root, C=4, n_fore=6, n_back=40, seed=11)
    return root, fores, backs


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
