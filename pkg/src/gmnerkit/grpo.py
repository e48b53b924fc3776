"""Group-relative advantages, environment-token masking, clipped surrogate value.

Gradient steps live in an external trainer; this module computes the exact
quantities the trainer consumes and ships them as batch files.

Advantages standardize each trajectory's reward against its group:
A_i = (r_i - mean) / std, with the sample (n-1) standard deviation; a
zero-spread group has all-zero advantages.

The per-token surrogate over unmasked tokens t:

    mean_t[ min(rho_t * A, clip(rho_t, 1-eps, 1+eps) * A) - beta * k3_t ]

with rho_t = exp(logp_new - logp_old) and the non-negative KL estimator
k3 = exp(d) - d - 1, d = logp_ref - logp_new. Tokens inside <information>
blocks, prompts, and injected feedback carry mask 0 and contribute nothing,
to either term.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import GroupTooSmall
from .reward import RewardBreakdown
from .rollout import PartKind, Trajectory


class AllMasked(ValueError):
    """The surrogate is undefined when no token is unmasked."""


class SpanMapMismatch(ValueError):
    """The span map does not describe the trajectory's token stream."""


@dataclass
class AdvantageGroup:
    rewards: tuple[float, ...]
    mean: float
    std: float
    advantages: tuple[float, ...]


def group_advantages(rewards: Sequence[float]) -> AdvantageGroup:
    """Standardize rewards within a group of size >= 2."""
    if len(rewards) < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {len(rewards)}")
    arr = np.asarray(rewards, dtype=float)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1))
    if std == 0.0:
        advantages = tuple(0.0 for _ in rewards)
    else:
        advantages = tuple(float(a) for a in (arr - mean) / std)
    return AdvantageGroup(
        rewards=tuple(float(r) for r in rewards), mean=mean, std=std, advantages=advantages
    )


@dataclass(frozen=True)
class TokenSpan:
    kind: PartKind
    start: int
    end: int


def char_span_map(traj: Trajectory) -> list[TokenSpan]:
    """Reference tokenization: one token per transcript character."""
    spans = []
    offset = 0
    for part in traj.parts:
        end = offset + len(part.text)
        spans.append(TokenSpan(kind=part.kind, start=offset, end=end))
        offset = end
    return spans


def mask_trajectory(traj: Trajectory, spans: Sequence[TokenSpan]) -> np.ndarray:
    """Binary mask over the token stream: 1 exactly on agent-generated spans.

    The span map must tile the stream contiguously from 0 and describe this
    trajectory: its observation-span count must equal the trajectory's
    observation count.
    """
    offset = 0
    for span in spans:
        if span.start != offset or span.end < span.start:
            raise SpanMapMismatch(
                f"spans must tile contiguously; got [{span.start},{span.end}) at offset {offset}"
            )
        offset = span.end
    n_obs_spans = sum(1 for s in spans if s.kind is PartKind.OBSERVATION)
    n_obs = sum(1 for turn in traj.turns if turn.observation is not None)
    if n_obs_spans != n_obs:
        raise SpanMapMismatch(
            f"span map has {n_obs_spans} observation spans, trajectory has {n_obs}"
        )
    mask = np.zeros(offset, dtype=np.int8)
    for span in spans:
        if span.kind is PartKind.AGENT:
            mask[span.start: span.end] = 1
    return mask


@dataclass
class TokenBatch:
    logp_new: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    mask: np.ndarray
    advantage: float
    clip_eps: float = 0.2
    kl_beta: float = 0.001

    def __post_init__(self) -> None:
        self.logp_new = np.asarray(self.logp_new, dtype=float)
        self.logp_old = np.asarray(self.logp_old, dtype=float)
        self.logp_ref = np.asarray(self.logp_ref, dtype=float)
        self.mask = np.asarray(self.mask)
        lengths = {
            len(self.logp_new),
            len(self.logp_old),
            len(self.logp_ref),
            len(self.mask),
        }
        if len(lengths) != 1:
            raise ValueError(f"per-token arrays must align, got lengths {sorted(lengths)}")


def surrogate_objective(batch: TokenBatch) -> float:
    """Mean clipped policy term minus beta * k3 over unmasked tokens."""
    sel = np.asarray(batch.mask) == 1
    if not sel.any():
        raise AllMasked("no unmasked tokens in batch")
    rho = np.exp(batch.logp_new[sel] - batch.logp_old[sel])
    adv = batch.advantage
    clipped = np.clip(rho, 1.0 - batch.clip_eps, 1.0 + batch.clip_eps)
    policy_term = np.minimum(rho * adv, clipped * adv)
    delta = batch.logp_ref[sel] - batch.logp_new[sel]
    k3 = np.exp(delta) - delta - 1.0
    return float(np.mean(policy_term - batch.kl_beta * k3))


def k3_estimate(logp_ref: float, logp_new: float) -> float:
    """Pointwise KL estimator; non-negative for any log-prob pair."""
    delta = logp_ref - logp_new
    return math.exp(delta) - delta - 1.0


# --- batch emission ---------------------------------------------------------

def _span_to_dict(span: TokenSpan) -> dict:
    return {"kind": span.kind.value, "start": span.start, "end": span.end}


def _span_from_dict(d: dict) -> TokenSpan:
    return TokenSpan(kind=PartKind(d["kind"]), start=int(d["start"]), end=int(d["end"]))


def build_batch_records(
    trajectories: Sequence[Trajectory],
    breakdowns: Sequence[RewardBreakdown],
    span_maps: Sequence[Sequence[TokenSpan]] | None = None,
    clip_eps: float = 0.2,
    kl_beta: float = 0.001,
) -> list[dict]:
    """One record per trajectory: spans, mask, broadcast advantage, reward.

    The trainer fills in logp_new/logp_old/logp_ref per token and sends the
    records back through read_training_batch + token_batch_from_record.
    """
    if len(trajectories) < 2:
        raise GroupTooSmall(f"need at least 2 trajectories, got {len(trajectories)}")
    if len(breakdowns) != len(trajectories):
        raise ValueError("one reward breakdown per trajectory required")
    if span_maps is None:
        span_maps = [char_span_map(t) for t in trajectories]
    advantages = group_advantages([b.total for b in breakdowns]).advantages
    records = []
    for traj, breakdown, spans, advantage in zip(
        trajectories, breakdowns, span_maps, advantages
    ):
        mask = mask_trajectory(traj, spans)
        records.append(
            {
                "trajectory_id": traj.trajectory_id,
                "advantage": advantage,
                "reward": breakdown.to_dict(),
                "spans": [_span_to_dict(s) for s in spans],
                "mask": [int(v) for v in mask],
                "clip_eps": clip_eps,
                "kl_beta": kl_beta,
            }
        )
    return records


def emit_training_batch(
    path: str | Path,
    trajectories: Sequence[Trajectory],
    breakdowns: Sequence[RewardBreakdown],
    span_maps: Sequence[Sequence[TokenSpan]] | None = None,
    clip_eps: float = 0.2,
    kl_beta: float = 0.001,
) -> list[dict]:
    records = build_batch_records(trajectories, breakdowns, span_maps, clip_eps, kl_beta)
    with Path(path).open("w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, separators=(",", ":")) + "\n")
    return records


def read_training_batch(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def token_batch_from_record(record: dict) -> TokenBatch:
    """Build a TokenBatch from a record the trainer has filled with log-probs."""
    for key in ("logp_new", "logp_old", "logp_ref"):
        if key not in record:
            raise KeyError(f"record is missing per-token array {key!r}")
    return TokenBatch(
        logp_new=np.asarray(record["logp_new"], dtype=float),
        logp_old=np.asarray(record["logp_old"], dtype=float),
        logp_ref=np.asarray(record["logp_ref"], dtype=float),
        mask=np.asarray(record["mask"]),
        advantage=float(record["advantage"]),
        clip_eps=float(record.get("clip_eps", 0.2)),
        kl_beta=float(record.get("kl_beta", 0.001)),
    )
