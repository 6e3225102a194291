import importlib.util
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """(images, labels) IDX paths for the 5000 MNIST digits shipped with mlxtend."""
    pytest.importorskip("mlxtend")
    spec = importlib.util.spec_from_file_location("mnist5k_to_idx", ROOT / "scripts" / "mnist5k_to_idx.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod.convert(tmp_path_factory.mktemp("mnist"))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
