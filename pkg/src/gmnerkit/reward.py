"""Hybrid trajectory reward: accuracy, format compliance, gated search penalty.

    total = lf1 * r_f1 + lfmt * r_fmt - lsearch * [r_f1 >= gamma] * n_search

r_f1 is the strict grounded-NER F1 of the final answer (0 with no answer),
r_fmt is 1 only when every generated segment parsed validly AND a final
answer was produced, and n_search is the tool-call count averaged per gold
entity (floor of 1 entity, so searching on entity-free posts still costs).
The penalty activates only once accuracy reaches the gamma threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

from .metrics import DEFAULT_IOU_THRESHOLD, GoldEntity, Task, score
from .rollout import Trajectory, TrajectoryStatus


@dataclass(frozen=True)
class RewardConfig:
    lambda_f1: float = 0.9
    lambda_fmt: float = 0.1
    lambda_search: float = 0.01
    gamma: float = 0.8

    def __post_init__(self) -> None:
        for name in ("lambda_f1", "lambda_fmt", "lambda_search"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    r_f1: float
    r_fmt: int
    n_search: float
    penalty_active: bool
    total: float

    def to_dict(self) -> dict:
        return {
            "r_f1": self.r_f1,
            "r_fmt": self.r_fmt,
            "n_search": self.n_search,
            "penalty_active": self.penalty_active,
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewardBreakdown":
        return cls(
            r_f1=float(d["r_f1"]),
            r_fmt=int(d["r_fmt"]),
            n_search=float(d["n_search"]),
            penalty_active=bool(d["penalty_active"]),
            total=float(d["total"]),
        )


def combine_reward(
    r_f1: float, r_fmt: int, n_tool_calls: int, n_gold: int, cfg: RewardConfig
) -> RewardBreakdown:
    """Assemble the gated total from its components."""
    n_search = n_tool_calls / max(1, n_gold)
    penalty_active = r_f1 >= cfg.gamma
    total = (
        cfg.lambda_f1 * r_f1
        + cfg.lambda_fmt * r_fmt
        - cfg.lambda_search * (n_search if penalty_active else 0.0)
    )
    return RewardBreakdown(
        r_f1=r_f1,
        r_fmt=r_fmt,
        n_search=n_search,
        penalty_active=penalty_active,
        total=total,
    )


def compute_reward(
    traj: Trajectory,
    gold: list[GoldEntity],
    cfg: RewardConfig,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> RewardBreakdown:
    """Score a completed trajectory of any status against its gold entities."""
    if traj.final is not None:
        r_f1 = score(list(traj.final.entities), gold, Task.GMNER, iou_threshold).f1
    else:
        r_f1 = 0.0
    answered = traj.status is TrajectoryStatus.ANSWERED
    r_fmt = 1 if answered and traj.n_invalid == 0 else 0
    return combine_reward(r_f1, r_fmt, traj.n_tool_calls, len(gold), cfg)
