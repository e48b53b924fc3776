"""Agentic grounded-multimodal-NER toolkit.

Model-agnostic building blocks for the reason-then-act entity-grounding
loop: the tag-based action protocol, multi-turn rollouts with on-demand
tool invocation, a caching multimodal search gateway, difficulty-aware
search tags, strict triplet evaluation, the gated hybrid reward, and
group-relative advantage batches for an external trainer.
"""

__version__ = "0.1.0"

from .metrics import BBox, EntityTriplet, GoldEntity, Task, iou, score  # noqa: F401
from .protocol import ActionKind, TurnSegment, parse_segment, serialize_segment  # noqa: F401
from .rollout import RolloutConfig, Trajectory, run_group, run_rollout  # noqa: F401
