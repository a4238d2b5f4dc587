import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shellmg.mesh import generate_shell_mesh, two_element_mesh  # noqa: E402


@pytest.fixture(scope="session")
def shell60():
    return generate_shell_mesh(0.5, 1.0, 0, 1)


@pytest.fixture(scope="session")
def shell480():
    return generate_shell_mesh(0.5, 1.0, 1, 2)


@pytest.fixture(scope="session")
def two_tets():
    return two_element_mesh()


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and asserts ``ok``."""
    def record(n, ok, detail):
        _ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[n])
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
