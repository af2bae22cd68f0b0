import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rlvlm.gateway import Gateway  # noqa: E402
from rlvlm.prompts import load_catalog  # noqa: E402
from rlvlm.rag import build_index, load_knowledge_base  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
DATA = resources.files("rlvlm") / "data"

_acceptance: list[tuple[str, str, float]] = []


@pytest.fixture(scope="session")
def golden():
    return json.loads((FIXTURES / "golden.json").read_text())


@pytest.fixture(scope="session")
def image_dir():
    return FIXTURES / "images"


@pytest.fixture(scope="session")
def images(image_dir):
    return [p.read_bytes() for p in sorted(image_dir.iterdir())]


@pytest.fixture(scope="session")
def prompts_path():
    return Path(str(DATA / "prompts.jsonl"))


@pytest.fixture(scope="session")
def kb_path():
    return Path(str(DATA / "knowledge.jsonl"))


@pytest.fixture(scope="session")
def catalog(prompts_path):
    return load_catalog(prompts_path)


@pytest.fixture
def gateway():
    return Gateway()


@pytest.fixture(scope="session")
def index(kb_path):
    return build_index(load_knowledge_base(kb_path), Gateway().embed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for name, _ in getattr(report, "user_properties", []):
        if name == "acceptance":
            break
    else:
        return
    criterion = dict(report.user_properties)["acceptance"]
    _acceptance.append((criterion, report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, outcome, duration in _acceptance:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {criterion}  ({duration:.2f}s)")
