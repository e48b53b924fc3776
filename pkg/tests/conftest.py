from __future__ import annotations

from pathlib import Path

import pytest

from gmnerkit.metrics import load_gold_corpus
from gmnerkit.policy import ScriptedPolicy
from gmnerkit.toolgw import CachingSearchTool, LocalIndexBackend

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures" / "synthetic"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def gold_corpus():
    return load_gold_corpus(FIXTURES / "gold.jsonl")


@pytest.fixture()
def local_tool(tmp_path) -> CachingSearchTool:
    return CachingSearchTool(
        LocalIndexBackend.from_file(FIXTURES / "index.jsonl"),
        cache_path=tmp_path / "cache.jsonl",
    )


@pytest.fixture()
def tagger_policy() -> ScriptedPolicy:
    return ScriptedPolicy.from_file(FIXTURES / "policy_tagger.jsonl")


@pytest.fixture()
def teacher_policy() -> ScriptedPolicy:
    return ScriptedPolicy.from_file(FIXTURES / "policy_teacher.jsonl")


@pytest.fixture()
def rollout_policy() -> ScriptedPolicy:
    return ScriptedPolicy.from_file(FIXTURES / "policy_rollout.jsonl")


class CountingBackend:
    """Wraps a search engine and counts backend invocations (thread-safe)."""

    def __init__(self, inner, delay: float = 0.0):
        import threading
        import time

        self._inner = inner
        self._delay = delay
        self._time = time
        self.calls = 0
        self._lock = threading.Lock()

    def search(self, query, modality, k):
        with self._lock:
            self.calls += 1
        if self._delay:
            self._time.sleep(self._delay)
        return self._inner.search(query, modality, k)


@pytest.fixture()
def counting_backend_factory():
    return CountingBackend
