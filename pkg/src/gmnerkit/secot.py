"""Cold-start trajectory construction: tag-filtered sampling, tag-conditioned
teacher synthesis through the rollout engine, and rule-based validation.

A record is accepted only when it passes every rule check:

    format               — answered, zero invalid segments, every segment
                           re-parses under the strict grammar
    turn budget          — at most 3 dialogue turns (assistant segments)
    tag coverage         — every TEXT_SEARCH/IMAGE_SEARCH-tagged entity is
                           covered by a matching query of that modality, and
                           no NO_SEARCH-tagged entity is queried at all
    erroneous prediction — final answer must score F1 = 1.0 against gold
    logical consistency  — every answered entity is mentioned in the final
                           reason, evidenced by an observation, or in gold

An optional model judge runs after the rules; the rules are the
deterministic acceptance floor.

loss_mask carries one flag per transcript part: 1 on teacher-generated
parts, 0 on prompts, tool output, and injected feedback — the supervised
objective must skip everything the teacher did not write.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .metrics import GoldEntity, GoldSample, Task, normalize_span, score
from .policy import PolicyHandle, PolicyUnavailable
from .protocol import ActionKind, SearchQuerySet
from .rollout import (
    PartKind,
    RolloutConfig,
    RolloutInput,
    ToolHandle,
    Trajectory,
    TrajectoryStatus,
    run_rollout,
)
from .tagger import SearchTag, SearchTagReport
from .toolgw import ToolUnavailable

logger = logging.getLogger(__name__)

MAX_DIALOGUE_TURNS = 3

DEFAULT_INSTRUCTION_TEMPLATE = "{text}\n\nSearch directives:\n{directives}\n"

_TAG_MODALITY = {SearchTag.TEXT_SEARCH: "text", SearchTag.IMAGE_SEARCH: "image"}


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "reason": self.reason}


Judge = Callable[["SeCoTRecord"], Verdict]


@dataclass
class SeCoTRecord:
    sample_id: str
    teacher_id: str
    tags: dict[str, tuple[str, ...]]  # gold span -> sorted tag names
    trajectory: Trajectory | None
    verdict: Verdict | None
    loss_mask: tuple[int, ...]

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "teacher_id": self.teacher_id,
            "tags": {span: list(tags) for span, tags in self.tags.items()},
            "trajectory": self.trajectory.to_record() if self.trajectory else None,
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "loss_mask": list(self.loss_mask),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SeCoTRecord":
        verdict = rec.get("verdict")
        trajectory = rec.get("trajectory")
        return cls(
            sample_id=str(rec["sample_id"]),
            teacher_id=str(rec["teacher_id"]),
            tags={span: tuple(tags) for span, tags in rec["tags"].items()},
            trajectory=Trajectory.from_record(trajectory) if trajectory else None,
            verdict=Verdict(accepted=verdict["accepted"], reason=verdict.get("reason"))
            if verdict
            else None,
            loss_mask=tuple(int(v) for v in rec["loss_mask"]),
        )


def filter_pool(reports: Iterable[SearchTagReport]) -> list[str]:
    """Cold-start candidate sample ids: posts with any non-ADAPTIVE tag.

    Order follows first appearance in the reports; ADAPTIVE-only posts are
    excluded (they are reserved for the RL pool).
    """
    pool: list[str] = []
    seen: set[str] = set()
    for report in reports:
        if report.sample_id in seen:
            continue
        if report.tags != frozenset({SearchTag.ADAPTIVE}):
            pool.append(report.sample_id)
            seen.add(report.sample_id)
    return pool


def render_instruction(
    sample: GoldSample,
    reports: Sequence[SearchTagReport],
    template: str = DEFAULT_INSTRUCTION_TEMPLATE,
) -> str:
    """Render the tag-conditioned teacher prompt for one post."""
    lines = []
    for report in reports:
        tags = ", ".join(sorted(tag.value for tag in report.tags))
        lines.append(f"- {report.entity.span} ({report.entity.type_label}): {tags}")
    return template.format(text=sample.text, directives="\n".join(lines))


def _part_loss_mask(traj: Trajectory) -> tuple[int, ...]:
    return tuple(1 if part.kind is PartKind.AGENT else 0 for part in traj.parts)


def synthesize(
    sample: GoldSample,
    reports: Sequence[SearchTagReport],
    teacher: PolicyHandle,
    tools: ToolHandle,
    cfg: RolloutConfig | None = None,
    teacher_id: str = "teacher",
    template: str = DEFAULT_INSTRUCTION_TEMPLATE,
) -> SeCoTRecord:
    """Run the teacher through the rollout engine under a tag-conditioned prompt.

    Returns an unvalidated record, except that infrastructure failures and
    turn-budget overruns are rejected immediately.
    """
    tags = {
        r.entity.span: tuple(sorted(t.value for t in r.tags)) for r in reports
    }
    prompt = render_instruction(sample, reports, template)
    try:
        trajectory = run_rollout(
            RolloutInput(text=prompt, image_ref=sample.image_ref),
            teacher,
            tools,
            cfg or RolloutConfig(),
            trajectory_id=sample.sample_id,
        )
    except (PolicyUnavailable, ToolUnavailable) as exc:
        logger.warning("synthesis failed for sample %s: %s", sample.sample_id, exc)
        return SeCoTRecord(
            sample_id=sample.sample_id,
            teacher_id=teacher_id,
            tags=tags,
            trajectory=None,
            verdict=Verdict(False, "infrastructure"),
            loss_mask=(),
        )
    verdict = None
    if len(trajectory.turns) > MAX_DIALOGUE_TURNS:
        verdict = Verdict(False, "turn budget")
    return SeCoTRecord(
        sample_id=sample.sample_id,
        teacher_id=teacher_id,
        tags=tags,
        trajectory=trajectory,
        verdict=verdict,
        loss_mask=_part_loss_mask(trajectory),
    )


def _query_matches_entity(queries: SearchQuerySet, span: str) -> bool:
    target = normalize_span(span).lower()
    for entry in queries.entries:
        if normalize_span(entry.entity).lower() == target:
            return True
        if target and target in entry.q.lower():
            return True
    return False


def _entity_evidenced(span: str, traj: Trajectory, gold_spans: set[str]) -> bool:
    target = normalize_span(span)
    if target in gold_spans:
        return True
    lowered = target.lower()
    final_reason = traj.turns[-1].segment.reason if traj.turns else ""
    if lowered in final_reason.lower():
        return True
    for turn in traj.turns:
        if turn.observation is not None and lowered in turn.observation.body.lower():
            return True
    return False


def validate(
    record: SeCoTRecord,
    gold: Sequence[GoldEntity],
    judge: Judge | None = None,
    iou_threshold: float = 0.5,
) -> Verdict:
    """Apply the rule checks (always) and the optional judge (after rules)."""
    if record.verdict is not None and not record.verdict.accepted:
        return record.verdict

    traj = record.trajectory
    if traj is None:
        return Verdict(False, "infrastructure")
    if len(traj.turns) > MAX_DIALOGUE_TURNS:
        return Verdict(False, "turn budget")
    if (
        traj.status is not TrajectoryStatus.ANSWERED
        or traj.final is None
        or traj.n_invalid > 0
    ):
        return Verdict(False, "format")

    search_turns = [
        t for t in traj.turns if t.segment.action is not ActionKind.ANSWER
    ]
    for span, tag_names in record.tags.items():
        tags = {SearchTag(t) for t in tag_names}
        for tag in tags & set(_TAG_MODALITY):
            modality = _TAG_MODALITY[tag]
            covered = any(
                t.segment.payload.modality == modality
                and _query_matches_entity(t.segment.payload, span)
                for t in search_turns
                if isinstance(t.segment.payload, SearchQuerySet)
            )
            if not covered:
                return Verdict(False, "tag coverage")
        if SearchTag.NO_SEARCH in tags:
            queried = any(
                _query_matches_entity(t.segment.payload, span)
                for t in search_turns
                if isinstance(t.segment.payload, SearchQuerySet)
            )
            if queried:
                return Verdict(False, "tag coverage")

    answer_score = score(list(traj.final.entities), list(gold), Task.GMNER, iou_threshold)
    if answer_score.f1 != 1.0:
        return Verdict(False, "erroneous prediction")

    gold_spans = {normalize_span(g.span) for g in gold}
    for entity in traj.final.entities:
        if not _entity_evidenced(entity.span, traj, gold_spans):
            return Verdict(False, "logical consistency")

    if judge is not None:
        judged = judge(record)
        if not judged.accepted:
            return Verdict(False, f"judge: {judged.reason}")

    return Verdict(True)


def build_dataset(
    corpus: Sequence[GoldSample],
    reports: Sequence[SearchTagReport],
    teacher: PolicyHandle,
    tools: ToolHandle,
    cfg: RolloutConfig | None = None,
    teacher_id: str = "teacher",
    template: str = DEFAULT_INSTRUCTION_TEMPLATE,
    judge: Judge | None = None,
    max_resamples: int = 0,
    iou_threshold: float = 0.5,
) -> list[SeCoTRecord]:
    """Synthesize and validate records for every cold-start-pool sample."""
    by_sample: dict[str, list[SearchTagReport]] = {}
    for report in reports:
        by_sample.setdefault(report.sample_id, []).append(report)
    pool = set(filter_pool(reports))
    samples = {s.sample_id: s for s in corpus}

    records = []
    for sample_id in (sid for sid in samples if sid in pool):
        sample = samples[sample_id]
        gold = sample.entities
        record: SeCoTRecord | None = None
        for _ in range(max_resamples + 1):
            record = synthesize(
                sample, by_sample[sample_id], teacher, tools, cfg, teacher_id, template
            )
            record.verdict = validate(record, gold, judge, iou_threshold)
            if record.verdict.accepted:
                break
        assert record is not None
        records.append(record)
    return records


def stats_markdown(records: Sequence[SeCoTRecord]) -> str:
    """Acceptance, turn-count, and tag-distribution statistics as markdown."""
    accepted = [r for r in records if r.verdict is not None and r.verdict.accepted]
    reasons = Counter(
        r.verdict.reason for r in records if r.verdict is not None and not r.verdict.accepted
    )
    turn_hist = Counter(
        len(r.trajectory.turns) for r in accepted if r.trajectory is not None
    )
    tag_dist: Counter[str] = Counter()
    for r in accepted:
        for tags in r.tags.values():
            tag_dist.update(tags)

    lines = [
        "# Cold-start dataset statistics",
        "",
        f"- records synthesized: {len(records)}",
        f"- accepted: {len(accepted)}",
        f"- rejected: {len(records) - len(accepted)}",
        "",
        "## Rejection reasons",
        "",
    ]
    for reason, count in sorted(reasons.items(), key=lambda kv: (-kv[1], str(kv[0]))):
        lines.append(f"- {reason}: {count}")
    lines += ["", "## Dialogue turns (accepted)", ""]
    for turns, count in sorted(turn_hist.items()):
        lines.append(f"- {turns} turn(s): {count}")
    lines += ["", "## Entity tag distribution (accepted)", ""]
    for tag, count in sorted(tag_dist.items()):
        lines.append(f"- {tag}: {count}")
    lines.append("")
    return "\n".join(lines)


def save_records(path: str | Path, records: Iterable[SeCoTRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_record(), separators=(",", ":")) + "\n")


def load_records(path: str | Path) -> list[SeCoTRecord]:
    with Path(path).open(encoding="utf-8") as f:
        return [SeCoTRecord.from_record(json.loads(line)) for line in f if line.strip()]
