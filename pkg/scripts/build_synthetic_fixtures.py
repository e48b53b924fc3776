#!/usr/bin/env python3
"""Regenerate the bundled synthetic corpus and scripted-policy fixtures.

The synthetic world is 20 posts with 2 gold entities each. Every entity has
a scripted competence class that fixes its hit pattern over N=4 forward
samples, so the tag generator produces a known pool split:

    known           -> hits (4,4)  NO_SEARCH
    unknown_text    -> hits (0,4)  TEXT_SEARCH
    unknown_region  -> hits (4,0)  IMAGE_SEARCH
    unknown_both    -> hits (0,0)  TEXT_SEARCH + IMAGE_SEARCH
    adaptive(h,r)   -> intermediate counts, ADAPTIVE

Outputs (under fixtures/synthetic/): gold.jsonl, train_gold.jsonl,
index.jsonl, policy_tagger.jsonl, policy_teacher.jsonl, policy_rollout.jsonl.

Deterministic: rerunning reproduces the files byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

from gmnerkit.protocol import (
    ActionKind,
    AnswerPayload,
    SearchQuery,
    SearchQuerySet,
    TurnSegment,
    serialize_segment,
)
from gmnerkit.metrics import BBox, EntityTriplet

OUT_DIR = Path(__file__).resolve().parents[1] / "fixtures" / "synthetic"
N_SAMPLES = 4
GROUP_SIZE = 8
WRONG_TYPE = "OTHER"

# span, type, groundable, class (class fixes the (hit_text, hit_region) pattern)
POSTS: list[tuple[str, list[tuple[str, str, bool, str]]]] = [
    ("Matchday! {0} fans fill the stands as {1} warms up", [
        ("Arcadia FC", "ORG", True, "known"),
        ("Lena Brook", "PER", True, "unknown_text"),
    ]),
    ("Sunset over {0} while {1} plays the encore", [
        ("Vesna Harbor", "LOC", True, "known"),
        ("Marco Veld", "PER", True, "unknown_region"),
    ]),
    ("{0} just unveiled the {1} prototype on stage", [
        ("Nimbus Labs", "ORG", False, "unknown_text"),
        ("Zephyr One", "OTHER", True, "unknown_both"),
    ]),
    ("Coffee with {0} near {1} this morning", [
        ("Ayana Holt", "PER", True, "known"),
        ("Kalda Bridge", "LOC", True, "known"),
    ]),
    ("{0} banners everywhere, {1} signing shirts", [
        ("Redpine United", "ORG", True, "unknown_region"),
        ("Jonas Pike", "PER", True, "unknown_text"),
    ]),
    ("Tasting the new {0} flavor at the {1} booth", [
        ("Nova Cola", "OTHER", True, "unknown_both"),
        ("Quorvo Collective", "ORG", True, "known"),
    ]),
    ("{0} and {1} share the keynote stage tonight", [
        ("Rika Sund", "PER", True, "unknown_text"),
        ("Tomas Ridge", "PER", False, "unknown_text"),
    ]),
    ("Hiking {0} before the {1} office opens", [
        ("Mount Tolm", "LOC", True, "known"),
        ("Helio Works", "ORG", True, "unknown_region"),
    ]),
    ("{0} crowd surfing while {1} drums on", [
        ("Lumen Fest", "OTHER", True, "adaptive_1_4"),
        ("Petra Voss", "PER", True, "adaptive_4_1"),
    ]),
    ("Scrimmage day: {0} against {1} at the old pitch", [
        ("Bryn Rovers", "ORG", True, "adaptive_2_3"),
        ("Salt Quay", "LOC", True, "adaptive_3_2"),
    ]),
    ("{0} reviews the {1} headset live", [
        ("Dario Lenz", "PER", True, "adaptive_2_2"),
        ("Aurora Visor", "OTHER", True, "adaptive_3_3"),
    ]),
    ("Street art by {0} covering the {1} facade", [
        ("Mirela Cala", "PER", False, "adaptive_1_2"),
        ("Granite Row", "LOC", True, "adaptive_2_1"),
    ]),
    ("{0} rally winds past {1} downtown", [
        ("Cobalt Riders", "ORG", True, "adaptive_3_1"),
        ("Fennel Square", "LOC", True, "adaptive_1_3"),
    ]),
    ("Podcast night: {0} interviews {1}", [
        ("Noor Atlan", "PER", True, "adaptive_2_4"),
        ("Iver Stone", "PER", True, "adaptive_4_2"),
    ]),
    ("{0} opens the meetup, {1} closes it", [
        ("Tess Marlow", "PER", True, "known"),
        ("Orin Dale", "PER", True, "adaptive_2_3"),
    ]),
    ("New mural of {0} beside the {1} studio", [
        ("Wren Falco", "PER", True, "unknown_text"),
        ("Cedar Loft", "ORG", True, "adaptive_3_2"),
    ]),
    ("{0} tournament finals streamed from {1}", [
        ("Ember Cup", "OTHER", True, "unknown_both"),
        ("Juniper Hall", "LOC", True, "adaptive_2_2"),
    ]),
    ("Morning run with {0} along {1}", [
        ("Skye Tarun", "PER", True, "known"),
        ("Willow Strand", "LOC", True, "adaptive_1_1"),
    ]),
    ("{0} drone show above {1} tonight", [
        ("Vanta Crew", "ORG", True, "unknown_region"),
        ("Miro Basin", "LOC", True, "adaptive_3_3"),
    ]),
    ("Signed copies of {0} handed out by {1}", [
        ("Paper Comet", "OTHER", True, "unknown_text"),
        ("Edda Lune", "PER", True, "adaptive_2_1"),
    ]),
]

HIT_PATTERNS = {
    "known": (4, 4),
    "unknown_text": (0, 4),
    "unknown_region": (4, 0),
    "unknown_both": (0, 0),
}

# Posts whose teacher answer is deliberately wrong, to exercise rejection.
TEACHER_WRONG_POSTS = {3, 7}


def hit_pattern(klass: str) -> tuple[int, int]:
    if klass in HIT_PATTERNS:
        return HIT_PATTERNS[klass]
    _, ht, hr = klass.split("_")
    return int(ht), int(hr)


def gold_box(post_idx: int, ent_idx: int) -> list[float]:
    x = 10.0 * (post_idx + 1) + 100.0 * ent_idx
    y = 5.0 * (ent_idx + 1)
    return [x, y, x + 48.0, y + 64.0]


def far_box(box: list[float]) -> list[float]:
    return [box[0] + 500.0, box[1] + 500.0, box[2] + 500.0, box[3] + 500.0]


def bbox(values: list[float] | None) -> BBox | None:
    return BBox(*values) if values is not None else None


def entity_records(post_idx: int, entities) -> list[dict]:
    records = []
    for ent_idx, (span, type_label, groundable, _klass) in enumerate(entities):
        boxes = [gold_box(post_idx, ent_idx)] if groundable else []
        records.append({"span": span, "type": type_label, "boxes": boxes})
    return records


def answer_segment(reason: str, triplets: list[EntityTriplet]) -> str:
    return serialize_segment(
        TurnSegment(reason=reason, action=ActionKind.ANSWER, payload=AnswerPayload(tuple(triplets)))
    )


def search_segment(reason: str, modality: str, queries: list[tuple[str, str]]) -> str:
    action = ActionKind.TEXT_SEARCH if modality == "text" else ActionKind.IMAGE_SEARCH
    payload = SearchQuerySet(
        entries=tuple(SearchQuery(entity=e, q=q) for e, q in queries), modality=modality
    )
    return serialize_segment(TurnSegment(reason=reason, action=action, payload=payload))


def gold_triplets(post_idx: int, entities) -> list[EntityTriplet]:
    triplets = []
    for ent_idx, (span, type_label, groundable, _klass) in enumerate(entities):
        region = bbox(gold_box(post_idx, ent_idx)) if groundable else None
        triplets.append(EntityTriplet(span=span, type_label=type_label, region=region))
    return triplets


def doc_answer(triplets: list[EntityTriplet]) -> str:
    return json.dumps(
        {
            "entities": [
                {
                    "span": t.span,
                    "type": t.type_label,
                    "box": t.region.as_list() if t.region else None,
                }
                for t in triplets
            ]
        },
        separators=(",", ":"),
    )


def build_gold() -> list[dict]:
    records = []
    for post_idx, (template, entities) in enumerate(POSTS):
        spans = [e[0] for e in entities]
        records.append(
            {
                "text": template.format(*spans),
                "image_ref": f"img://post/{post_idx:02d}",
                "entities": entity_records(post_idx, entities),
            }
        )
    return records


def build_train_gold() -> list[dict]:
    # Training mentions cover posts 0-9 only, so posts 10-19 are Unseen.
    records = []
    for post_idx, (template, entities) in enumerate(POSTS[:10]):
        spans = [e[0] for e in entities]
        records.append(
            {
                "text": "train set: " + template.format(*spans),
                "image_ref": f"img://train/{post_idx:02d}",
                "entities": entity_records(post_idx, entities),
            }
        )
    return records


def build_index() -> list[dict]:
    docs = []
    for post_idx, (_template, entities) in enumerate(POSTS):
        for span, type_label, _groundable, klass in entities:
            ht, hr = hit_pattern(klass)
            slug = span.lower().replace(" ", "-")
            if ht == 0:
                docs.append(
                    {
                        "modality": "text",
                        "title": span,
                        "body": f"{span} is a widely covered {type_label} profile page",
                        "url": f"local://text/{slug}",
                        "image_ref": None,
                    }
                )
            if hr == 0:
                docs.append(
                    {
                        "modality": "image",
                        "title": f"{span} photo",
                        "body": f"reference photo of {span}",
                        "url": f"local://image/{slug}",
                        "image_ref": f"img://ref/{slug}",
                    }
                )
    docs.append(
        {
            "modality": "text",
            "title": "Community noticeboard",
            "body": "weekly roundup of neighborhood events",
            "url": "local://text/noticeboard",
            "image_ref": None,
        }
    )
    return docs


def build_tagger_fixture() -> list[dict]:
    # Four direct-prediction samples per post, realizing each entity's
    # (hit_text, hit_region) pattern: type correct in the first ht samples,
    # region correct in the first hr samples, span always present.
    entries = []
    for post_idx, (_template, entities) in enumerate(POSTS):
        for k in range(N_SAMPLES):
            triplets = []
            for ent_idx, (span, type_label, groundable, klass) in enumerate(entities):
                ht, hr = hit_pattern(klass)
                pred_type = type_label if k < ht else (
                    WRONG_TYPE if type_label != WRONG_TYPE else "LOC"
                )
                gold = gold_box(post_idx, ent_idx) if groundable else None
                if k < hr:
                    pred_box = gold
                else:
                    pred_box = far_box(gold) if gold is not None else gold_box(post_idx, ent_idx)
                triplets.append(
                    EntityTriplet(span=span, type_label=pred_type, region=bbox(pred_box))
                )
            entries.append(
                {
                    "trajectory_id": str(post_idx),
                    "turn_index": k,
                    "text": doc_answer(triplets),
                }
            )
    return entries


def teacher_turns(post_idx: int, entities) -> list[str]:
    text_targets = [
        (span, f"{span} profile")
        for span, _t, _g, klass in entities
        if hit_pattern(klass)[0] == 0
    ]
    image_targets = [
        (span, f"{span} photo")
        for span, _t, _g, klass in entities
        if hit_pattern(klass)[1] == 0
    ]
    turns = []
    if text_targets:
        names = " and ".join(e for e, _ in text_targets)
        turns.append(
            search_segment(
                f"I am not sure about {names}, I need to search for background.",
                "text",
                text_targets,
            )
        )
    if image_targets:
        names = " and ".join(e for e, _ in image_targets)
        turns.append(
            search_segment(
                f"I am not sure how {names} looks, I need to search for reference images.",
                "image",
                image_targets,
            )
        )
    triplets = gold_triplets(post_idx, entities)
    if post_idx in TEACHER_WRONG_POSTS:
        wrong = EntityTriplet(
            span=triplets[1].span,
            type_label=WRONG_TYPE if triplets[1].type_label != WRONG_TYPE else "LOC",
            region=triplets[1].region,
        )
        triplets = [triplets[0], wrong]
    known = [span for span, _t, _g, klass in entities if hit_pattern(klass) == (4, 4)]
    closing = (
        f"I know {' and '.join(known)}, here is the grounded prediction."
        if known
        else "Evidence gathered, here is the grounded prediction."
    )
    turns.append(answer_segment(closing, triplets))
    return turns


def build_teacher_fixture() -> list[dict]:
    entries = []
    for post_idx, (_template, entities) in enumerate(POSTS):
        # Teacher only runs on cold-start-pool posts (any non-ADAPTIVE tag).
        if all(klass.startswith("adaptive") for _s, _t, _g, klass in entities):
            continue
        for turn_index, text in enumerate(teacher_turns(post_idx, entities)):
            entries.append(
                {"trajectory_id": str(post_idx), "turn_index": turn_index, "text": text}
            )
    return entries


def student_turns(post_idx: int, entities, member: int) -> list[str]:
    triplets = gold_triplets(post_idx, entities)
    first_span = entities[0][0]
    correct = answer_segment("Confident in the grounded entities now.", triplets)
    if member <= 2:
        return [answer_segment("I know these concepts, answering directly.", triplets)]
    if member in (3, 4):
        seg = search_segment(
            f"I am not sure about {first_span}, searching text.",
            "text",
            [(first_span, f"{first_span} profile")],
        )
        return [seg, correct]
    if member == 5:
        seg = search_segment(
            f"I am not sure how {first_span} looks, searching images.",
            "image",
            [(first_span, f"{first_span} photo")],
        )
        return [seg, correct]
    if member == 6:
        seg = search_segment(
            f"Checking {first_span} before answering.",
            "text",
            [(first_span, f"{first_span} profile")],
        )
        wrong = answer_segment("Going with a partial reading.", triplets[:1])
        return [seg, wrong]
    # member 7: one malformed segment, then a direct correct answer
    return ["thinking out loud without any action tags", correct]


def build_rollout_fixture() -> list[dict]:
    entries = []
    for post_idx, (_template, entities) in enumerate(POSTS):
        for member in range(GROUP_SIZE):
            for turn_index, text in enumerate(student_turns(post_idx, entities, member)):
                entries.append(
                    {
                        "trajectory_id": f"{post_idx}/{member}",
                        "turn_index": turn_index,
                        "text": text,
                    }
                )
    return entries


def write_jsonl(path: Path, records: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, separators=(",", ":")) + "\n")
    print(f"wrote {len(records):4d} records -> {path}")


def main() -> None:
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    write_jsonl(OUT_DIR / "gold.jsonl", build_gold())
    write_jsonl(OUT_DIR / "train_gold.jsonl", build_train_gold())
    write_jsonl(OUT_DIR / "index.jsonl", build_index())
    write_jsonl(OUT_DIR / "policy_tagger.jsonl", build_tagger_fixture())
    write_jsonl(OUT_DIR / "policy_teacher.jsonl", build_teacher_fixture())
    write_jsonl(OUT_DIR / "policy_rollout.jsonl", build_rollout_fixture())


if __name__ == "__main__":
    main()
