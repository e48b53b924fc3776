"""Strict evaluation for grounded multimodal NER.

Correctness of a predicted (span, type, region) triplet is judged by three
indicators: span equality, type equality, and region correctness (both sides
ungrounded, or max IoU over the gold boxes strictly above a threshold).
Task variants combine the indicators:

    GMNER = span AND type AND region
    MNER  = span AND type
    EEG   = span AND region

Span comparison is exact string equality after trimming outer whitespace;
case is preserved. Scores are micro-averaged counts: Pre = correct/predict,
Rec = correct/gold, F1 = 2PR/(P+R) with F1 = 0 when P + R = 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_IOU_THRESHOLD = 0.5


class MissingTrainCorpus(ValueError):
    """Seen/unseen splitting requires a training corpus."""


class Task(str, Enum):
    GMNER = "gmner"
    MNER = "mner"
    EEG = "eeg"


def normalize_span(span: str) -> str:
    """Trim outer whitespace only; case and inner whitespace are preserved."""
    return span.strip()


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box given by top-left and bottom-right pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite: {coords}")
        if any(c < 0 for c in coords):
            raise ValueError(f"box coordinates must be >= 0: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"box must satisfy x1 < x2 and y1 < y2: {coords}")

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class EntityTriplet:
    """Predicted entity: span, type label, and optional grounded region."""

    span: str
    type_label: str
    region: BBox | None = None


@dataclass(frozen=True)
class GoldEntity:
    """Gold entity: span, type label, and zero or more gold boxes.

    An empty box tuple means the entity is ungroundable (the prediction must
    also leave the region unset to be region-correct).
    """

    span: str
    type_label: str
    boxes: tuple[BBox, ...] = ()


def region_correct(
    pred_region: BBox | None,
    gold_boxes: Sequence[BBox],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> bool:
    """Region indicator: both sides ungrounded, or max IoU strictly above threshold."""
    if not gold_boxes:
        return pred_region is None
    if pred_region is None:
        return False
    return max(iou(pred_region, g) for g in gold_boxes) > iou_threshold


def triplet_correct(
    pred: EntityTriplet,
    gold: GoldEntity,
    task: Task,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> bool:
    """Strict correctness of one prediction against one gold entity for a task."""
    c_e = normalize_span(pred.span) == normalize_span(gold.span)
    if not c_e:
        return False
    if task in (Task.GMNER, Task.MNER):
        if pred.type_label.strip() != gold.type_label.strip():
            return False
    if task in (Task.GMNER, Task.EEG):
        if not region_correct(pred.region, gold.boxes, iou_threshold):
            return False
    return True


@dataclass
class ScoreReport:
    precision: float
    recall: float
    f1: float
    n_correct: int
    n_predict: int
    n_gold: int
    task: Task

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "n_correct": self.n_correct,
            "n_predict": self.n_predict,
            "n_gold": self.n_gold,
        }


def _report_from_counts(n_correct: int, n_predict: int, n_gold: int, task: Task) -> ScoreReport:
    precision = n_correct / n_predict if n_predict else 0.0
    recall = n_correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ScoreReport(precision, recall, f1, n_correct, n_predict, n_gold, task)


def _match_count(
    preds: Sequence[EntityTriplet],
    golds: Sequence[GoldEntity],
    task: Task,
    iou_threshold: float,
) -> int:
    # One-to-one matching: each gold is consumable once. Seeded in prediction
    # order, then augmented so the count equals the maximum bipartite matching
    # (plain greedy undercounts when duplicate spans have nested box-match sets).
    adjacency = [
        [g for g, gold in enumerate(golds) if triplet_correct(pred, gold, task, iou_threshold)]
        for pred in preds
    ]
    owner = [-1] * len(golds)

    def assign(p: int, visited: list[bool]) -> bool:
        for g in adjacency[p]:
            if visited[g]:
                continue
            visited[g] = True
            if owner[g] == -1 or assign(owner[g], visited):
                owner[g] = p
                return True
        return False

    count = 0
    for p in range(len(preds)):
        if assign(p, [False] * len(golds)):
            count += 1
    return count


def score(
    preds: Sequence[EntityTriplet],
    golds: Sequence[GoldEntity],
    task: Task,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> ScoreReport:
    """Score one instance's predictions against its gold entities."""
    n_correct = _match_count(preds, golds, task, iou_threshold)
    return _report_from_counts(n_correct, len(preds), len(golds), task)


def score_corpus(
    pairs: Iterable[tuple[Sequence[EntityTriplet], Sequence[GoldEntity]]],
    task: Task,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> ScoreReport:
    """Micro-averaged score over per-instance (predictions, golds) pairs.

    Matching is per instance; counts aggregate additively.
    """
    n_correct = n_predict = n_gold = 0
    for preds, golds in pairs:
        n_correct += _match_count(preds, golds, task, iou_threshold)
        n_predict += len(preds)
        n_gold += len(golds)
    return _report_from_counts(n_correct, n_predict, n_gold, task)


# --- corpus records -------------------------------------------------------

@dataclass
class GoldSample:
    """One annotated post: text, optional image reference, gold entities."""

    sample_id: str
    text: str
    image_ref: str | None
    entities: list[GoldEntity] = field(default_factory=list)


def gold_entity_to_dict(e: GoldEntity) -> dict:
    return {
        "span": e.span,
        "type": e.type_label,
        "boxes": [b.as_list() for b in e.boxes],
    }


def gold_entity_from_dict(d: dict) -> GoldEntity:
    boxes = tuple(BBox(*map(float, b)) for b in d.get("boxes", []))
    return GoldEntity(span=d["span"], type_label=d["type"], boxes=boxes)


def load_gold_corpus(path: str | Path) -> list[GoldSample]:
    """Load a gold corpus: JSONL of {text, image_ref, entities:[{span,type,boxes}]}.

    Sample ids are the zero-based line positions as strings.
    """
    samples = []
    with Path(path).open(encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                sample = GoldSample(
                    sample_id=str(rec.get("id", len(samples))),
                    text=rec["text"],
                    image_ref=rec.get("image_ref"),
                    entities=[gold_entity_from_dict(e) for e in rec.get("entities", [])],
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{i + 1}: bad gold record: {exc}") from exc
            samples.append(sample)
    return samples


# --- seen/unseen splitting ------------------------------------------------

@dataclass
class SampleEval:
    """Per-sample evaluation bundle: gold entities, predictions, tool usage."""

    sample_id: str
    golds: list[GoldEntity]
    preds: list[EntityTriplet]
    n_tool_calls: int = 0


@dataclass
class GroupScores:
    report: ScoreReport
    search_ratio: float
    n_samples: int


@dataclass
class SplitScores:
    seen: GroupScores
    unseen: GroupScores
    all: GroupScores


def search_ratio(tool_call_counts: Sequence[int]) -> float:
    """Fraction of trajectories that invoked at least one search tool."""
    if not tool_call_counts:
        return 0.0
    return sum(1 for n in tool_call_counts if n >= 1) / len(tool_call_counts)


def _is_unseen(
    golds: Sequence[GoldEntity],
    train_mentions: set[str],
    train_pairs: set[tuple[str, str]],
    train_grounding: set[tuple[str, bool]],
    by_type: bool,
    by_region: bool,
) -> bool:
    for g in golds:
        mention = normalize_span(g.span)
        if mention not in train_mentions:
            return True
        if by_type and (mention, g.type_label.strip()) not in train_pairs:
            return True
        if by_region and (mention, bool(g.boxes)) not in train_grounding:
            return True
    return False


def seen_unseen_split(
    samples: Sequence[SampleEval],
    train_corpus: Sequence[GoldSample] | None,
    task: Task = Task.GMNER,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    by_type: bool = False,
    by_region: bool = False,
) -> SplitScores:
    """Split test samples by whether all gold mentions appeared in training.

    A sample is Unseen if any gold entity's mention is absent from the
    training mentions. Optional stricter flags additionally require the
    (mention, type) pair (`by_type`) or the (mention, groundable) signature
    (`by_region`) to have appeared in training.
    """
    if train_corpus is None:
        raise MissingTrainCorpus("a training corpus is required for the seen/unseen split")
    train_mentions: set[str] = set()
    train_pairs: set[tuple[str, str]] = set()
    train_grounding: set[tuple[str, bool]] = set()
    for sample in train_corpus:
        for g in sample.entities:
            mention = normalize_span(g.span)
            train_mentions.add(mention)
            train_pairs.add((mention, g.type_label.strip()))
            train_grounding.add((mention, bool(g.boxes)))

    groups: dict[str, list[SampleEval]] = {"seen": [], "unseen": []}
    for sample in samples:
        unseen = _is_unseen(
            sample.golds, train_mentions, train_pairs, train_grounding, by_type, by_region
        )
        groups["unseen" if unseen else "seen"].append(sample)

    def group_scores(members: list[SampleEval]) -> GroupScores:
        report = score_corpus(((m.preds, m.golds) for m in members), task, iou_threshold)
        return GroupScores(
            report=report,
            search_ratio=search_ratio([m.n_tool_calls for m in members]),
            n_samples=len(members),
        )

    return SplitScores(
        seen=group_scores(groups["seen"]),
        unseen=group_scores(groups["unseen"]),
        all=group_scores(list(samples)),
    )
