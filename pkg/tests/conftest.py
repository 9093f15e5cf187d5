import json

import pytest

from udg.config import config_tasks, load_config
from udg.experiment import run_all

_CRITERIA: list[tuple[int, bool, str]] = []


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    """One default-config run-all shared by every pipeline-scale test."""
    out = tmp_path_factory.mktemp("full_run")
    cfg, raw = load_config(None)
    report = run_all(cfg, config_tasks(raw), out)
    timings = json.loads((out / "timings.json").read_text())
    return {"report": report, "timings": timings, "out": out, "cfg": cfg}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        _CRITERIA.append((number, bool(ok), detail))
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
