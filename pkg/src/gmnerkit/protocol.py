"""Tag grammar for reason-then-act turns: strict parsing and canonical serialization.

A well-formed turn segment is exactly one reason block followed by exactly
one action block, with nothing but whitespace before, between, or after:

    <reason>...</reason>
    <text_search>{"queries":[{"entity":...,"q":...}]}</text_search>
  | <image_search>{"queries":[...]}</image_search>
  | <answer>{"entities":[{"span":...,"type":...,"box":[x1,y1,x2,y2]|null}]}</answer>

Scanning is flat and left-to-right: a block runs to the first occurrence of
its closing tag. Canonical serialization escapes '<' and '>' inside JSON
payloads as \\u003c/\\u003e, so a serialized payload never contains a literal
tag delimiter and the flat scan is unambiguous. Reason content is preserved
verbatim; a serializable reason must not contain the literal "</reason>".

Tool output is injected wrapped in <information>...</information>.

Parsing never repairs: any violation raises a ProtocolError subclass
carrying the byte offset of the first violation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .metrics import BBox, EntityTriplet

REASON_OPEN = "<reason>"
REASON_CLOSE = "</reason>"
INFORMATION_OPEN = "<information>"
INFORMATION_CLOSE = "</information>"


class ActionKind(str, Enum):
    TEXT_SEARCH = "text_search"
    IMAGE_SEARCH = "image_search"
    ANSWER = "answer"


ACTION_OPEN = {
    ActionKind.TEXT_SEARCH: "<text_search>",
    ActionKind.IMAGE_SEARCH: "<image_search>",
    ActionKind.ANSWER: "<answer>",
}
ACTION_CLOSE = {
    ActionKind.TEXT_SEARCH: "</text_search>",
    ActionKind.IMAGE_SEARCH: "</image_search>",
    ActionKind.ANSWER: "</answer>",
}
# Closing tags that terminate generation of one segment.
STOP_TAGS = tuple(ACTION_CLOSE.values())


class ProtocolError(ValueError):
    """Segment rejected; `offset` is the byte offset of the first violation."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(message)
        self.offset = offset


class MissingReason(ProtocolError):
    pass


class MultipleActions(ProtocolError):
    pass


class NoAction(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class UnbalancedTags(ProtocolError):
    pass


@dataclass(frozen=True)
class SearchQuery:
    entity: str
    q: str


@dataclass(frozen=True)
class SearchQuerySet:
    entries: tuple[SearchQuery, ...]
    modality: str  # "text" | "image"


@dataclass(frozen=True)
class AnswerPayload:
    entities: tuple[EntityTriplet, ...]


@dataclass(frozen=True)
class Observation:
    body: str
    source_modality: str  # "text" | "image"


@dataclass(frozen=True)
class TurnSegment:
    reason: str
    action: ActionKind
    payload: SearchQuerySet | AnswerPayload
    raw: str = field(default="", compare=False)


def _byte_offset(raw: str, char_index: int) -> int:
    return len(raw[:char_index].encode("utf-8"))


def escape_angles(text: str) -> str:
    """Escape tag delimiters inside a JSON document as unicode escapes.

    JSON never uses '<' or '>' structurally, so a global replace only touches
    string contents and json.loads inverts it exactly.
    """
    return text.replace("<", "\\u003c").replace(">", "\\u003e")


def _modality_of(kind: ActionKind) -> str:
    return "text" if kind is ActionKind.TEXT_SEARCH else "image"


# --- payload decoding -------------------------------------------------------

def entity_to_dict(e: EntityTriplet) -> dict:
    return {
        "span": e.span,
        "type": e.type_label,
        "box": e.region.as_list() if e.region is not None else None,
    }


def entity_from_dict(d: dict) -> EntityTriplet:
    box = d.get("box")
    region = BBox(*map(float, box)) if box is not None else None
    return EntityTriplet(span=d["span"], type_label=d["type"], region=region)


def _decode_box(value: Any) -> BBox:
    if (
        not isinstance(value, list)
        or len(value) != 4
        or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in value)
        or not all(math.isfinite(float(c)) for c in value)
    ):
        raise ValueError(f"box must be a list of 4 finite numbers: {value!r}")
    return BBox(*(float(c) for c in value))


def parse_answer_payload(text: str) -> AnswerPayload:
    """Decode an answer document: {"entities":[{"span","type","box"}]}.

    "box" may be null or absent (ungrounded). Unknown keys are rejected so
    a parsed payload carries everything the document said.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedPayload(f"answer payload is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) != {"entities"}:
        raise MalformedPayload("answer payload must be an object with exactly key 'entities'")
    if not isinstance(doc["entities"], list):
        raise MalformedPayload("'entities' must be a list")
    entities = []
    for i, item in enumerate(doc["entities"]):
        if not isinstance(item, dict) or not set(item) <= {"span", "type", "box"}:
            raise MalformedPayload(f"entity {i} must have keys within {{span,type,box}}")
        if not isinstance(item.get("span"), str) or not item["span"].strip():
            raise MalformedPayload(f"entity {i}: 'span' must be a non-empty string")
        if not isinstance(item.get("type"), str) or not item["type"].strip():
            raise MalformedPayload(f"entity {i}: 'type' must be a non-empty string")
        box = item.get("box")
        if box is None:
            region = None
        else:
            try:
                region = _decode_box(box)
            except ValueError as exc:
                raise MalformedPayload(f"entity {i}: {exc}") from exc
        entities.append(EntityTriplet(span=item["span"], type_label=item["type"], region=region))
    return AnswerPayload(entities=tuple(entities))


def parse_search_payload(text_or_doc: str | dict, modality: str) -> SearchQuerySet:
    """Decode a search document: {"queries":[{"entity","q"}]}, q non-empty after trim."""
    if isinstance(text_or_doc, str):
        try:
            doc = json.loads(text_or_doc)
        except json.JSONDecodeError as exc:
            raise MalformedPayload(f"search payload is not valid JSON: {exc}") from exc
    else:
        doc = text_or_doc
    if not isinstance(doc, dict) or set(doc) != {"queries"}:
        raise MalformedPayload("search payload must be an object with exactly key 'queries'")
    if not isinstance(doc["queries"], list) or not doc["queries"]:
        raise MalformedPayload("'queries' must be a non-empty list")
    entries = []
    for i, item in enumerate(doc["queries"]):
        if not isinstance(item, dict) or set(item) != {"entity", "q"}:
            raise MalformedPayload(f"query {i} must have exactly keys {{entity,q}}")
        if not isinstance(item["entity"], str) or not isinstance(item["q"], str):
            raise MalformedPayload(f"query {i}: 'entity' and 'q' must be strings")
        if not item["q"].strip():
            raise MalformedPayload(f"query {i}: 'q' must be non-empty after trimming")
        entries.append(SearchQuery(entity=item["entity"], q=item["q"]))
    return SearchQuerySet(entries=tuple(entries), modality=modality)


# --- segment parsing ---------------------------------------------------------

def _skip_ws(raw: str, i: int) -> int:
    while i < len(raw) and raw[i].isspace():
        i += 1
    return i


def first_block(raw: str, open_tag: str, close_tag: str, start: int = 0) -> tuple[str, int, int] | None:
    """First flat block: (content, open index, index just past close tag), or None."""
    i = raw.find(open_tag, start)
    if i < 0:
        return None
    j = raw.find(close_tag, i + len(open_tag))
    if j < 0:
        return None
    return raw[i + len(open_tag): j], i, j + len(close_tag)


def parse_segment(raw: str) -> TurnSegment:
    """Parse one generated segment or raise a ProtocolError.

    Accepts iff the text is exactly one reason block followed by exactly one
    action block with a decodable payload (whitespace around/between blocks
    ignored, reason content verbatim).
    """
    i = _skip_ws(raw, 0)
    if not raw.startswith(REASON_OPEN, i):
        raise MissingReason(
            "segment must begin with a <reason> block", _byte_offset(raw, i)
        )
    body_start = i + len(REASON_OPEN)
    close = raw.find(REASON_CLOSE, body_start)
    if close < 0:
        raise UnbalancedTags("<reason> is never closed", _byte_offset(raw, i))
    reason = raw[body_start:close]

    k = _skip_ws(raw, close + len(REASON_CLOSE))
    if k >= len(raw):
        raise NoAction("no action block after the reason", _byte_offset(raw, k))
    action = next(
        (kind for kind, tag in ACTION_OPEN.items() if raw.startswith(tag, k)), None
    )
    if action is None:
        raise NoAction(
            "expected an action block (<text_search>, <image_search>, or <answer>)",
            _byte_offset(raw, k),
        )
    payload_start = k + len(ACTION_OPEN[action])
    close_tag = ACTION_CLOSE[action]
    m = raw.find(close_tag, payload_start)
    if m < 0:
        raise UnbalancedTags(
            f"{ACTION_OPEN[action]} is never closed", _byte_offset(raw, k)
        )
    payload_text = raw[payload_start:m]

    try:
        if action is ActionKind.ANSWER:
            payload: SearchQuerySet | AnswerPayload = parse_answer_payload(payload_text)
        else:
            payload = parse_search_payload(payload_text, _modality_of(action))
    except MalformedPayload as exc:
        raise MalformedPayload(str(exc), _byte_offset(raw, payload_start)) from exc

    p = _skip_ws(raw, m + len(close_tag))
    if p < len(raw):
        if any(raw.startswith(tag, p) for tag in ACTION_OPEN.values()):
            raise MultipleActions(
                "more than one action block in the segment", _byte_offset(raw, p)
            )
        raise UnbalancedTags(
            "trailing content after the action block", _byte_offset(raw, p)
        )

    return TurnSegment(reason=reason, action=action, payload=payload, raw=raw)


def try_parse_segment(raw: str) -> TurnSegment | None:
    try:
        return parse_segment(raw)
    except ProtocolError:
        return None


# --- serialization -----------------------------------------------------------

def serialize_payload(payload: SearchQuerySet | AnswerPayload) -> str:
    if isinstance(payload, AnswerPayload):
        doc: dict = {"entities": [entity_to_dict(e) for e in payload.entities]}
    else:
        doc = {"queries": [{"entity": e.entity, "q": e.q} for e in payload.entries]}
    return escape_angles(json.dumps(doc, separators=(",", ":")))


def serialize_segment(seg: TurnSegment) -> str:
    """Canonical tag form; parse_segment inverts it exactly."""
    open_tag = ACTION_OPEN[seg.action]
    close_tag = ACTION_CLOSE[seg.action]
    return (
        f"{REASON_OPEN}{seg.reason}{REASON_CLOSE}\n"
        f"{open_tag}{serialize_payload(seg.payload)}{close_tag}"
    )


def serialize_observation(obs: Observation) -> str:
    return f"{INFORMATION_OPEN}{obs.body}{INFORMATION_CLOSE}"
