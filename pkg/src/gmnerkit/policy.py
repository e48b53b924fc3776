"""Generation backends behind one interface.

The rollout engine only ever sees `generate(history, stop_tags, ...)`
returning (segment_text, token_count); which backend produced the text must
be unobservable. Backends:

  ScriptedPolicy  — fixture JSONL of {trajectory_id, turn_index, text},
                    consumed in order via a cursor per trajectory id.
                    Entries under trajectory_id "*" act as a shared script:
                    every id gets its own cursor over them.
  ReplayPolicy    — replays the segments of stored trajectories.
  RemotePolicy    — minimal chat-style JSON-over-HTTP endpoint.

Remote endpoints may ignore stop sequences, so every backend applies the
same client-side fallback: truncate at the first closing tag in stop_tags.
"""

from __future__ import annotations

import json
import os
import random
import threading
from pathlib import Path
from typing import Iterable, Protocol, Sequence, runtime_checkable

import requests

ENDPOINT_ENV = "GMNERKIT_POLICY_ENDPOINT"
TOKEN_ENV = "GMNERKIT_POLICY_TOKEN"


class PolicyUnavailable(RuntimeError):
    """The backend cannot produce a segment."""


class FixtureExhausted(PolicyUnavailable):
    """A scripted/replay cursor ran past its last entry."""


class EndpointTimeout(PolicyUnavailable):
    """A remote endpoint did not answer in time."""


def approx_token_count(text: str) -> int:
    """Whitespace-token approximation used when no backend count is available."""
    return len(text.split())


def truncate_at_stop_tag(text: str, stop_tags: Sequence[str]) -> str:
    """Cut `text` just past the earliest occurrence of any stop tag."""
    best_start = -1
    best_end = -1
    for tag in stop_tags:
        i = text.find(tag)
        if i >= 0 and (best_start < 0 or i < best_start):
            best_start = i
            best_end = i + len(tag)
    return text if best_start < 0 else text[:best_end]


@runtime_checkable
class PolicyHandle(Protocol):
    def generate(
        self,
        history: str,
        stop_tags: Sequence[str],
        *,
        trajectory_id: str = "0",
        rng: random.Random | None = None,
    ) -> tuple[str, int]: ...

    def sample_n(
        self,
        prompt: str,
        n: int,
        seed: int | str = 0,
        *,
        trajectory_id: str = "0",
    ) -> list[str]: ...


class BasePolicy:
    """Default sample_n: n independent generate calls with derived RNG streams."""

    def generate(
        self,
        history: str,
        stop_tags: Sequence[str],
        *,
        trajectory_id: str = "0",
        rng: random.Random | None = None,
    ) -> tuple[str, int]:
        raise NotImplementedError

    def sample_n(
        self,
        prompt: str,
        n: int,
        seed: int | str = 0,
        *,
        trajectory_id: str = "0",
    ) -> list[str]:
        if n < 1:
            raise ValueError("n must be >= 1")
        samples = []
        for i in range(n):
            text, _ = self.generate(
                prompt,
                ("</answer>",),
                trajectory_id=trajectory_id,
                rng=random.Random(f"{seed}:{i}"),
            )
            samples.append(text)
        return samples


class ScriptedPolicy(BasePolicy):
    """Serves fixture entries in order, one cursor per trajectory id."""

    def __init__(self, entries: Iterable[dict]):
        self._scripts: dict[str, list[str]] = {}
        staged: dict[str, list[tuple[int, str]]] = {}
        for entry in entries:
            staged.setdefault(str(entry["trajectory_id"]), []).append(
                (int(entry.get("turn_index", 0)), entry["text"])
            )
        for tid, items in staged.items():
            items.sort(key=lambda it: it[0])
            self._scripts[tid] = [text for _, text in items]
        self._cursors: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedPolicy":
        entries = []
        with Path(path).open(encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
        return cls(entries)

    def _next(self, trajectory_id: str) -> str:
        with self._lock:
            script = self._scripts.get(trajectory_id)
            if script is None:
                script = self._scripts.get("*")
            if script is None:
                raise FixtureExhausted(f"no fixture entries for trajectory {trajectory_id!r}")
            cursor = self._cursors.get(trajectory_id, 0)
            if cursor >= len(script):
                raise FixtureExhausted(
                    f"fixture for trajectory {trajectory_id!r} exhausted after {cursor} entries"
                )
            self._cursors[trajectory_id] = cursor + 1
            return script[cursor]

    def generate(self, history, stop_tags, *, trajectory_id="0", rng=None):
        text = truncate_at_stop_tag(self._next(trajectory_id), stop_tags)
        return text, approx_token_count(text)


class ReplayPolicy(ScriptedPolicy):
    """Replays the agent segments of stored trajectories, keyed by trajectory id."""

    def __init__(self, segments_by_id: dict[str, list[str]]):
        entries = [
            {"trajectory_id": tid, "turn_index": i, "text": text}
            for tid, texts in segments_by_id.items()
            for i, text in enumerate(texts)
        ]
        super().__init__(entries)

    @classmethod
    def from_trajectory_records(cls, records: Iterable[dict]) -> "ReplayPolicy":
        segments: dict[str, list[str]] = {}
        for rec in records:
            segments[str(rec["trajectory_id"])] = [
                part["text"] for part in rec["parts"] if part["kind"] == "agent"
            ]
        return cls(segments)

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayPolicy":
        with Path(path).open(encoding="utf-8") as f:
            records = [json.loads(line) for line in f if line.strip()]
        return cls.from_trajectory_records(records)


class RemotePolicy(BasePolicy):
    """Chat-style JSON endpoint client.

    Request:  {"history", "images", "stop", "max_tokens", "temperature",
               "model", "trajectory_id", "seed"?}
    Response: {"text": str, "token_count"?: int}

    Auth token read from GMNERKIT_POLICY_TOKEN when not passed explicitly.
    """

    def __init__(
        self,
        endpoint: str,
        model_id: str = "default",
        temperature: float = 1.0,
        max_tokens: int = 18432,
        timeout: float = 30.0,
        auth_token: str | None = None,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.model_id = model_id
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout
        self._token = auth_token if auth_token is not None else os.environ.get(TOKEN_ENV)
        self._session = session or requests.Session()

    def _post(self, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        try:
            resp = self._session.post(
                self.endpoint, json=payload, headers=headers, timeout=self.timeout
            )
        except requests.Timeout as exc:
            raise EndpointTimeout(f"no response from {self.endpoint} within {self.timeout}s") from exc
        except requests.RequestException as exc:
            raise PolicyUnavailable(f"endpoint {self.endpoint} unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise PolicyUnavailable(f"endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise PolicyUnavailable(f"endpoint returned non-JSON body: {exc}") from exc

    def generate(self, history, stop_tags, *, trajectory_id="0", rng=None, seed=None):
        body = self._post(
            {
                "history": history,
                "images": [],
                "stop": list(stop_tags),
                "max_tokens": self.max_tokens,
                "temperature": self.temperature,
                "model": self.model_id,
                "trajectory_id": trajectory_id,
                **({"seed": seed} if seed is not None else {}),
            }
        )
        if not isinstance(body, dict) or not isinstance(body.get("text"), str):
            raise PolicyUnavailable("endpoint response missing 'text'")
        text = truncate_at_stop_tag(body["text"], stop_tags)
        if text != body["text"] or "token_count" not in body:
            token_count = approx_token_count(text)
        else:
            token_count = int(body["token_count"])
        return text, token_count

    def sample_n(self, prompt, n, seed=0, *, trajectory_id="0"):
        if n < 1:
            raise ValueError("n must be >= 1")
        return [
            self.generate(
                prompt, ("</answer>",), trajectory_id=trajectory_id, seed=f"{seed}:{i}"
            )[0]
            for i in range(n)
        ]


def make_policy(spec: str) -> BasePolicy:
    """Build a backend from a CLI spec: scripted:PATH | replay:PATH | remote:URL."""
    kind, sep, arg = spec.partition(":")
    if not sep:
        raise ValueError(f"policy spec {spec!r} must look like kind:argument")
    if kind == "scripted":
        return ScriptedPolicy.from_file(arg)
    if kind == "replay":
        return ReplayPolicy.from_file(arg)
    if kind == "remote":
        return RemotePolicy(arg or os.environ.get(ENDPOINT_ENV, ""))
    raise ValueError(f"unknown policy backend {kind!r}")
