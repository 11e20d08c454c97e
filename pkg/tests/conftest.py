import json
from pathlib import Path

import pytest

from emocap.data import SynthSpec

_CRITERIA: list[tuple[str, str, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome for the terminal summary."""
    def record(label: str, detail: str = "") -> None:
        request.node._criterion = (label, detail)
    yield record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    crit = getattr(item, "_criterion", None)
    if crit is None and "criterion" in getattr(item, "fixturenames", ()):
        crit = (item.name, "")
    if crit is not None and rep.when == "call":
        _CRITERIA.append(("PASS" if rep.passed else "FAIL", crit[0], crit[1]))
    elif crit is not None and rep.when == "setup" and rep.failed:
        _CRITERIA.append(("FAIL", crit[0], "setup error"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for status, label, detail in _CRITERIA:
        terminalreporter.write_line(f"[{status}] {label}" + (f"  ({detail})" if detail else ""))


DESK_CONFIG = Path(__file__).resolve().parents[1] / "src" / "emocap" / "data" / "desk_scale.json"


@pytest.fixture(scope="session")
def desk_config() -> dict:
    return json.loads(DESK_CONFIG.read_text())


@pytest.fixture(scope="session")
def default_spec() -> SynthSpec:
    return SynthSpec.default()
