"""Difficulty-aware search tags from repeated forward sampling.

For each gold entity, N direct predictions are sampled and two hit counts
are taken over them:

    hit_text   — samples containing a prediction whose (span, type) equals
                 the gold pair exactly;
    hit_region — samples containing a prediction whose span equals the gold
                 span AND whose region is correct (max IoU over gold boxes
                 strictly above the threshold; both-ungrounded also counts).

Note the asymmetry is deliberate: the region hit conditions on span equality
only, not type. At most one hit per sample per count.

Tag assignment, in branch order:

    hit_text = 0 or hit_region = 0  ->  the zero counts name the modality:
        hit_text = 0 contributes TEXT_SEARCH, hit_region = 0 contributes
        IMAGE_SEARCH (both zero yields both tags)
    hit_text = N and hit_region = N ->  NO_SEARCH
    otherwise                       ->  ADAPTIVE
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from . import protocol
from .metrics import (
    DEFAULT_IOU_THRESHOLD,
    EntityTriplet,
    GoldEntity,
    GoldSample,
    normalize_span,
    region_correct,
)
from .policy import PolicyHandle


class EmptySamples(ValueError):
    """Hit counting needs at least one forward sample."""


class SearchTag(str, Enum):
    TEXT_SEARCH = "TEXT_SEARCH"
    IMAGE_SEARCH = "IMAGE_SEARCH"
    NO_SEARCH = "NO_SEARCH"
    ADAPTIVE = "ADAPTIVE"


SEARCH_TAGS = frozenset({SearchTag.TEXT_SEARCH, SearchTag.IMAGE_SEARCH})


@dataclass(frozen=True)
class HitCounts:
    hit_text: int
    hit_region: int
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not (0 <= self.hit_text <= self.n and 0 <= self.hit_region <= self.n):
            raise ValueError(f"hit counts must lie in [0, {self.n}]")


@dataclass
class SearchTagReport:
    sample_id: str
    entity: GoldEntity
    counts: HitCounts
    tags: frozenset[SearchTag]

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "entity": {
                "span": self.entity.span,
                "type": self.entity.type_label,
                "boxes": [b.as_list() for b in self.entity.boxes],
            },
            "counts": {
                "hit_text": self.counts.hit_text,
                "hit_region": self.counts.hit_region,
                "n": self.counts.n,
            },
            "tags": sorted(tag.value for tag in self.tags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchTagReport":
        from .metrics import gold_entity_from_dict

        return cls(
            sample_id=str(d["sample_id"]),
            entity=gold_entity_from_dict(d["entity"]),
            counts=HitCounts(**d["counts"]),
            tags=frozenset(SearchTag(t) for t in d["tags"]),
        )


def hit_counts(
    gold: GoldEntity,
    samples: Sequence[Sequence[EntityTriplet]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> HitCounts:
    """Count text and region hits for one gold entity over N prediction sets."""
    if not samples:
        raise EmptySamples("samples must contain at least one prediction set")
    gold_span = normalize_span(gold.span)
    gold_type = gold.type_label.strip()
    hit_text = 0
    hit_region = 0
    for preds in samples:
        span_matches = [p for p in preds if normalize_span(p.span) == gold_span]
        if any(p.type_label.strip() == gold_type for p in span_matches):
            hit_text += 1
        if any(region_correct(p.region, gold.boxes, iou_threshold) for p in span_matches):
            hit_region += 1
    return HitCounts(hit_text=hit_text, hit_region=hit_region, n=len(samples))


def assign_tag(counts: HitCounts) -> frozenset[SearchTag]:
    """Assign the difficulty-aware tag set; the search branch takes precedence."""
    if counts.hit_text == 0 or counts.hit_region == 0:
        tags = set()
        if counts.hit_text == 0:
            tags.add(SearchTag.TEXT_SEARCH)
        if counts.hit_region == 0:
            tags.add(SearchTag.IMAGE_SEARCH)
        return frozenset(tags)
    if counts.hit_text == counts.n and counts.hit_region == counts.n:
        return frozenset({SearchTag.NO_SEARCH})
    return frozenset({SearchTag.ADAPTIVE})


def decode_prediction(text: str) -> tuple[EntityTriplet, ...]:
    """Decode one forward sample into predicted triplets.

    Accepts a full turn segment, a bare <answer> block, or a bare answer
    JSON document. Anything undecodable counts as an empty prediction set
    (a miss for every gold entity).
    """
    seg = protocol.try_parse_segment(text)
    if seg is not None:
        if seg.action is protocol.ActionKind.ANSWER:
            assert isinstance(seg.payload, protocol.AnswerPayload)
            return seg.payload.entities
        return ()
    block = protocol.first_block(text, "<answer>", "</answer>")
    candidate = block[0] if block is not None else text
    try:
        return protocol.parse_answer_payload(candidate).entities
    except protocol.MalformedPayload:
        return ()


@dataclass
class TagDatasetResult:
    reports: list[SearchTagReport]
    cold_start_ids: list[str]
    rl_ids: list[str]


def tag_dataset(
    corpus: Sequence[GoldSample],
    policy: PolicyHandle,
    n: int = 4,
    seed: int | str = 0,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> TagDatasetResult:
    """Tag every gold entity of a corpus from N forward samples per post.

    Emits per-entity reports plus two manifests: the cold-start pool (posts
    with at least one TEXT_SEARCH/IMAGE_SEARCH/NO_SEARCH entity) and the RL
    pool (posts with at least one ADAPTIVE entity). A post may be in both.
    """
    if n < 1:
        raise ValueError("difficulty level n must be >= 1")
    reports: list[SearchTagReport] = []
    cold_ids: list[str] = []
    rl_ids: list[str] = []
    for sample in corpus:
        texts = policy.sample_n(
            sample.text, n, seed=f"{seed}/{sample.sample_id}", trajectory_id=sample.sample_id
        )
        prediction_sets = [decode_prediction(t) for t in texts]
        sample_tags: set[SearchTag] = set()
        for gold in sample.entities:
            counts = hit_counts(gold, prediction_sets, iou_threshold)
            tags = assign_tag(counts)
            sample_tags |= tags
            reports.append(
                SearchTagReport(
                    sample_id=sample.sample_id, entity=gold, counts=counts, tags=tags
                )
            )
        if sample_tags & (SEARCH_TAGS | {SearchTag.NO_SEARCH}):
            cold_ids.append(sample.sample_id)
        if SearchTag.ADAPTIVE in sample_tags:
            rl_ids.append(sample.sample_id)
    return TagDatasetResult(reports=reports, cold_start_ids=cold_ids, rl_ids=rl_ids)


def save_reports(path: str | Path, reports: Iterable[SearchTagReport]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for report in reports:
            f.write(json.dumps(report.to_dict(), separators=(",", ":")) + "\n")


def load_reports(path: str | Path) -> list[SearchTagReport]:
    with Path(path).open(encoding="utf-8") as f:
        return [SearchTagReport.from_dict(json.loads(line)) for line in f if line.strip()]


def save_manifest(path: str | Path, sample_ids: Iterable[str]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for sid in sample_ids:
            f.write(json.dumps({"sample_id": sid}) + "\n")


def load_manifest(path: str | Path) -> list[str]:
    with Path(path).open(encoding="utf-8") as f:
        return [str(json.loads(line)["sample_id"]) for line in f if line.strip()]
