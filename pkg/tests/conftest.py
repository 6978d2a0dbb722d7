import sys

import pytest

from lorenzcg.precision import make_context


@pytest.fixture
def ctx16():
    return make_context(16)


@pytest.fixture
def ctx32():
    return make_context(32)


@pytest.fixture
def ctx64():
    return make_context(64)


@pytest.fixture
def cache_dir(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv("LORENZCG_CACHE", str(d))
    return d


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.VERDICTS:
            terminalreporter.write_line(line)
