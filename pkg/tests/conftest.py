from __future__ import annotations

from pathlib import Path

import pytest

from bioqa.core import QType, Question, RunConfig
from bioqa.llm import Gateway, Rule, ScriptedBackend

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


def scripted(*rules: tuple[str, str], responses: dict[str, str] | None = None) -> ScriptedBackend:
    return ScriptedBackend(responses, [Rule(c, r) for c, r in rules])


def gateway_for(backend, **kw) -> Gateway:
    kw.setdefault("sleep", lambda s: None)
    return Gateway(backend, **kw)


def question(qid: str = "q1", body: str = "Which protein is targeted by Herceptin?", qtype=QType.FACTOID, **kw) -> Question:
    return Question(qid, body, qtype, **kw)


@pytest.fixture
def config() -> RunConfig:
    return RunConfig(retry_base_delay=0.0)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
