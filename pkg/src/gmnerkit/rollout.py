"""Multi-turn reason-then-act rollout with action budget and tool dispatch.

One rollout alternates: generate a segment, parse it, then either
  - execute the search action, wrap the tool output in <information> tags,
    append it to the history, and count the tool call;
  - terminate on an answer action;
  - or, on an unparseable segment, append the literal feedback
    "Invalid Action. Please retry." and let the policy retry.

Termination is guaranteed: at most `max_actions` tool calls, at most
`max_invalid_retries` retried invalid segments (one further invalid segment
ends the trajectory as Invalid), plus one final answer attempt.

The transcript is accumulated as typed parts (prompt / agent / observation /
feedback); each turn's generation context is the concatenation so far, so
contexts grow strictly append-only.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from . import protocol
from .errors import GroupTooSmall
from .policy import PolicyHandle
from .protocol import (
    ActionKind,
    AnswerPayload,
    Observation,
    ProtocolError,
    SearchQuerySet,
    TurnSegment,
)
from .toolgw import SearchResult

INVALID_ACTION_FEEDBACK = "Invalid Action. Please retry."


class ToolHandle(Protocol):
    def search_batch(self, queries: SearchQuerySet) -> list[list[SearchResult]]: ...


class PartKind(str, Enum):
    PROMPT = "prompt"
    AGENT = "agent"
    OBSERVATION = "observation"
    FEEDBACK = "feedback"


class TrajectoryStatus(str, Enum):
    ANSWERED = "answered"
    BUDGET_EXHAUSTED = "budget_exhausted"
    INVALID = "invalid"


@dataclass(frozen=True)
class RolloutConfig:
    max_actions: int = 3
    max_invalid_retries: int = 3
    max_response_tokens: int = 18432

    def __post_init__(self) -> None:
        if self.max_actions < 1:
            raise ValueError("max_actions must be >= 1")
        if self.max_invalid_retries < 0:
            raise ValueError("max_invalid_retries must be >= 0")
        if self.max_response_tokens < 1:
            raise ValueError("max_response_tokens must be >= 1")


@dataclass(frozen=True)
class RolloutInput:
    text: str
    image_ref: str | None = None


@dataclass(frozen=True)
class TranscriptPart:
    kind: PartKind
    text: str


@dataclass
class Turn:
    segment: TurnSegment
    observation: Observation | None = None


@dataclass
class Trajectory:
    input: RolloutInput
    turns: list[Turn]
    final: AnswerPayload | None
    status: TrajectoryStatus
    n_tool_calls: int
    n_invalid: int
    parts: list[TranscriptPart]
    trajectory_id: str = "0"

    @property
    def transcript(self) -> str:
        return "".join(part.text for part in self.parts)

    def to_record(self) -> dict:
        return {
            "trajectory_id": self.trajectory_id,
            "input": {"text": self.input.text, "image_ref": self.input.image_ref},
            "status": self.status.value,
            "n_tool_calls": self.n_tool_calls,
            "n_invalid": self.n_invalid,
            "turns": [
                {
                    "raw": turn.segment.raw,
                    "observation": (
                        {
                            "body": turn.observation.body,
                            "modality": turn.observation.source_modality,
                        }
                        if turn.observation is not None
                        else None
                    ),
                }
                for turn in self.turns
            ],
            "final": (
                {"entities": [protocol.entity_to_dict(e) for e in self.final.entities]}
                if self.final is not None
                else None
            ),
            "parts": [{"kind": part.kind.value, "text": part.text} for part in self.parts],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        turns = []
        for t in rec["turns"]:
            obs = t.get("observation")
            turns.append(
                Turn(
                    segment=protocol.parse_segment(t["raw"]),
                    observation=(
                        Observation(body=obs["body"], source_modality=obs["modality"])
                        if obs is not None
                        else None
                    ),
                )
            )
        final_doc = rec.get("final")
        final = (
            AnswerPayload(
                entities=tuple(protocol.entity_from_dict(e) for e in final_doc["entities"])
            )
            if final_doc is not None
            else None
        )
        return cls(
            input=RolloutInput(
                text=rec["input"]["text"], image_ref=rec["input"].get("image_ref")
            ),
            turns=turns,
            final=final,
            status=TrajectoryStatus(rec["status"]),
            n_tool_calls=int(rec["n_tool_calls"]),
            n_invalid=int(rec["n_invalid"]),
            parts=[
                TranscriptPart(kind=PartKind(p["kind"]), text=p["text"])
                for p in rec["parts"]
            ],
            trajectory_id=str(rec["trajectory_id"]),
        )


def format_observation(queries: SearchQuerySet, per_query: Sequence[Sequence[SearchResult]]) -> Observation:
    """Render one observation body covering every query of a batch action."""
    doc = [
        {
            "entity": entry.entity,
            "q": entry.q,
            "hits": [r.to_dict() for r in hits],
        }
        for entry, hits in zip(queries.entries, per_query)
    ]
    body = protocol.escape_angles(json.dumps(doc, separators=(",", ":")))
    return Observation(body=body, source_modality=queries.modality)


def run_rollout(
    rollout_input: RolloutInput,
    policy: PolicyHandle,
    tools: ToolHandle,
    cfg: RolloutConfig,
    trajectory_id: str = "0",
    rng: random.Random | None = None,
) -> Trajectory:
    """Run one trajectory to completion.

    Policy and tool failures propagate; such trajectories are aborted and
    must be excluded from downstream use.
    """
    parts: list[TranscriptPart] = [TranscriptPart(PartKind.PROMPT, rollout_input.text)]
    turns: list[Turn] = []
    history_chunks = [rollout_input.text]
    final: AnswerPayload | None = None
    n_invalid = 0
    m = 0
    status: TrajectoryStatus

    def append(kind: PartKind, text: str) -> None:
        parts.append(TranscriptPart(kind, text))
        history_chunks.append(text)

    while m < cfg.max_actions:
        text, token_count = policy.generate(
            "".join(history_chunks),
            protocol.STOP_TAGS,
            trajectory_id=trajectory_id,
            rng=rng,
        )
        segment: TurnSegment | None
        if token_count > cfg.max_response_tokens:
            segment = None  # over-length turn aborted; handled as invalid
        else:
            try:
                segment = protocol.parse_segment(text)
            except ProtocolError:
                segment = None

        append(PartKind.AGENT, text)
        if segment is None:
            n_invalid += 1
            if n_invalid > cfg.max_invalid_retries:
                status = TrajectoryStatus.INVALID
                break
            append(PartKind.FEEDBACK, f"\n{INVALID_ACTION_FEEDBACK}\n")
            continue

        if segment.action is ActionKind.ANSWER:
            assert isinstance(segment.payload, AnswerPayload)
            turns.append(Turn(segment))
            final = segment.payload
            status = TrajectoryStatus.ANSWERED
            break

        assert isinstance(segment.payload, SearchQuerySet)
        per_query = tools.search_batch(segment.payload)
        observation = format_observation(segment.payload, per_query)
        append(PartKind.OBSERVATION, f"\n{protocol.serialize_observation(observation)}\n")
        turns.append(Turn(segment, observation))
        m += 1
    else:
        status = TrajectoryStatus.BUDGET_EXHAUSTED

    return Trajectory(
        input=rollout_input,
        turns=turns,
        final=final,
        status=status,
        n_tool_calls=m,
        n_invalid=n_invalid,
        parts=parts,
        trajectory_id=trajectory_id,
    )


def run_group(
    rollout_input: RolloutInput,
    policy: PolicyHandle,
    tools: ToolHandle,
    cfg: RolloutConfig,
    group_size: int,
    seed: int | str = 0,
    base_id: str = "0",
) -> list[Trajectory]:
    """Sample a group of trajectories for one input.

    Member i runs with trajectory id "{base_id}/{i}" and its own RNG stream
    derived from (seed, i), so a rerun with the same seed and deterministic
    policy/tool pair reproduces the group byte for byte. Members execute
    sequentially to keep shared-cache side effects in a fixed order.
    """
    if group_size < 2:
        raise GroupTooSmall(f"group_size must be >= 2, got {group_size}")
    return [
        run_rollout(
            rollout_input,
            policy,
            tools,
            cfg,
            trajectory_id=f"{base_id}/{i}",
            rng=random.Random(f"{seed}:{i}"),
        )
        for i in range(group_size)
    ]


def save_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for traj in trajectories:
            f.write(json.dumps(traj.to_record(), separators=(",", ":")) + "\n")


def load_trajectories(path: str | Path) -> list[Trajectory]:
    with Path(path).open(encoding="utf-8") as f:
        return [Trajectory.from_record(json.loads(line)) for line in f if line.strip()]
