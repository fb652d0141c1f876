import sys
from pathlib import Path

import pytest

from cfdprompt.gateway import Gateway, ScriptedBackend, ScriptedFixture
from cfdprompt.graph import FIG_COT, FIG_DIRECT, FIG_KNOWLEDGE

sys.path.insert(0, str(Path(__file__).parent))

REPO = Path(__file__).resolve().parents[1]
GRAPHS = REPO / "graphs"


@pytest.fixture
def direct_dag():
    return FIG_DIRECT


@pytest.fixture
def cot_dag():
    return FIG_COT


@pytest.fixture
def knowledge_dag():
    return FIG_KNOWLEDGE


@pytest.fixture
def scripted():
    """Factory: scripted gateway over a fresh fixture, no real sleeping."""

    def make(fixture: ScriptedFixture | None = None, **kwargs) -> Gateway:
        fixture = fixture or ScriptedFixture()
        kwargs.setdefault("sleep", lambda s: None)
        return Gateway(ScriptedBackend(fixture), **kwargs)

    return make


@pytest.fixture(scope="session")
def contrast_dir(tmp_path_factory):
    """Contrast world written once: dataset.jsonl, fixture.json, config.json."""
    import contrast_world

    return contrast_world.write(tmp_path_factory.mktemp("contrast"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
