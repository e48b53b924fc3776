from __future__ import annotations

import math
import random

import numpy as np
import pytest

from gmnerkit.errors import GroupTooSmall
from gmnerkit.grpo import (
    AllMasked,
    SpanMapMismatch,
    TokenBatch,
    TokenSpan,
    build_batch_records,
    char_span_map,
    emit_training_batch,
    group_advantages,
    k3_estimate,
    mask_trajectory,
    read_training_batch,
    surrogate_objective,
    token_batch_from_record,
)
from gmnerkit.policy import ScriptedPolicy
from gmnerkit.reward import RewardConfig, compute_reward
from gmnerkit.rollout import (
    PartKind,
    RolloutConfig,
    RolloutInput,
    Trajectory,
    TranscriptPart,
    TrajectoryStatus,
    run_rollout,
)
from gmnerkit.toolgw import CachingSearchTool, LocalIndexBackend


def test_pinned_advantages_for_1100():
    group = group_advantages([1.0, 1.0, 0.0, 0.0])
    expected = 0.5 * math.sqrt(3)  # 0.5 / sample-std, sample std = 1/sqrt(3)
    assert group.mean == 0.5
    assert group.std == pytest.approx(1 / math.sqrt(3), abs=1e-15)
    assert group.advantages == pytest.approx(
        (expected, expected, -expected, -expected), abs=1e-12
    )


def test_degenerate_group_all_zero():
    group = group_advantages([0.7, 0.7, 0.7, 0.7])
    assert group.std == 0.0
    assert group.advantages == (0.0, 0.0, 0.0, 0.0)


def test_advantages_zero_mean_property():
    rng = random.Random(13)
    for _ in range(50):
        rewards = [rng.uniform(-2, 2) for _ in range(rng.randrange(2, 12))]
        group = group_advantages(rewards)
        assert abs(sum(group.advantages) / len(group.advantages)) < 1e-10
        if group.std > 0:
            assert np.std(group.advantages, ddof=1) == pytest.approx(1.0, abs=1e-9)


def test_group_too_small():
    with pytest.raises(GroupTooSmall):
        group_advantages([1.0])
    with pytest.raises(GroupTooSmall):
        group_advantages([])


# --- masks ---------------------------------------------------------------------

ANSWER = '<reason>r</reason><answer>{"entities":[]}</answer>'
SEARCH = '<reason>r</reason><text_search>{"queries":[{"entity":"e","q":"bayern"}]}</text_search>'


def make_trajectory(entries):
    pol = ScriptedPolicy(
        [{"trajectory_id": "0", "turn_index": i, "text": t} for i, t in enumerate(entries)]
    )
    tool = CachingSearchTool(
        LocalIndexBackend(
            [{"modality": "text", "title": "bayern", "body": "b", "url": "u", "image_ref": None}]
        )
    )
    return run_rollout(RolloutInput("the prompt"), pol, tool, RolloutConfig())


def test_mask_no_tool_calls_all_generated_tokens_one():
    traj = make_trajectory([ANSWER])
    mask = mask_trajectory(traj, char_span_map(traj))
    assert mask.sum() == len(ANSWER)
    assert len(mask) == len(traj.transcript)
    assert mask[: len("the prompt")].sum() == 0


def test_mask_span_arithmetic_fixture():
    # One 50-token observation inside a 200-token completion: 150 ones.
    traj = Trajectory(
        input=RolloutInput(""),
        turns=[],
        final=None,
        status=TrajectoryStatus.BUDGET_EXHAUSTED,
        n_tool_calls=0,
        n_invalid=0,
        parts=[],
    )
    spans = [
        TokenSpan(PartKind.PROMPT, 0, 0),
        TokenSpan(PartKind.AGENT, 0, 100),
        TokenSpan(PartKind.OBSERVATION, 100, 150),
        TokenSpan(PartKind.AGENT, 150, 200),
    ]
    traj.turns = []  # no recorded observations -> mismatch below
    with pytest.raises(SpanMapMismatch):
        mask_trajectory(traj, spans)

    from gmnerkit.protocol import Observation, parse_segment
    from gmnerkit.rollout import Turn

    traj.turns = [Turn(parse_segment(SEARCH), Observation("body", "text"))]
    mask = mask_trajectory(traj, spans)
    assert len(mask) == 200
    assert mask.sum() == 150
    assert mask[100:150].sum() == 0


def test_masked_count_equals_observation_token_count():
    traj = make_trajectory([SEARCH, SEARCH, ANSWER])
    spans = char_span_map(traj)
    mask = mask_trajectory(traj, spans)
    non_agent = sum(
        len(p.text) for p in traj.parts if p.kind is not PartKind.AGENT
    )
    assert (mask == 0).sum() == non_agent
    obs_chars = sum(len(p.text) for p in traj.parts if p.kind is PartKind.OBSERVATION)
    assert obs_chars > 0
    obs_span_zeros = sum(
        s.end - s.start for s in spans if s.kind is PartKind.OBSERVATION
    )
    assert obs_span_zeros == obs_chars


def test_span_map_must_tile_contiguously():
    traj = make_trajectory([ANSWER])
    spans = char_span_map(traj)
    broken = [TokenSpan(spans[0].kind, spans[0].start, spans[0].end - 1)] + spans[1:]
    with pytest.raises(SpanMapMismatch):
        mask_trajectory(traj, broken)


# --- surrogate objective ---------------------------------------------------------

def make_batch(n=8, advantage=1.0, mask=None, **overrides):
    base = np.zeros(n)
    return TokenBatch(
        logp_new=overrides.get("logp_new", base.copy()),
        logp_old=overrides.get("logp_old", base.copy()),
        logp_ref=overrides.get("logp_ref", base.copy()),
        mask=np.ones(n, dtype=int) if mask is None else np.asarray(mask),
        advantage=advantage,
        clip_eps=overrides.get("clip_eps", 0.2),
        kl_beta=overrides.get("kl_beta", 0.001),
    )


def test_identity_policy_objective_equals_advantage():
    for adv in (-1.5, 0.0, 0.7):
        assert surrogate_objective(make_batch(advantage=adv)) == pytest.approx(adv, abs=1e-15)


def test_clip_arithmetic_positive_advantage():
    # rho = 2 everywhere, A = 1, eps = 0.2 -> min(2, 1.2) = 1.2
    batch = make_batch(advantage=1.0, logp_new=np.full(4, math.log(2.0)), kl_beta=0.0)
    assert surrogate_objective(batch) == pytest.approx(1.2, abs=1e-12)


def test_clip_arithmetic_negative_advantage():
    # rho = 0.5, A = -1 -> min(-0.5, -0.8) = -0.8
    batch = make_batch(advantage=-1.0, logp_new=np.full(4, math.log(0.5)), kl_beta=0.0)
    assert surrogate_objective(batch) == pytest.approx(-0.8, abs=1e-12)


def test_masked_tokens_contribute_exactly_zero():
    rng = np.random.default_rng(21)
    mask = np.array([1, 0, 1, 0, 0, 1, 1, 0])
    base = make_batch(mask=mask, logp_new=rng.normal(size=8), logp_old=rng.normal(size=8),
                      logp_ref=rng.normal(size=8), advantage=0.8)
    reference = surrogate_objective(base)
    perturbed = TokenBatch(
        logp_new=base.logp_new + np.where(mask == 0, rng.normal(size=8) * 100, 0.0),
        logp_old=base.logp_old + np.where(mask == 0, rng.normal(size=8) * 100, 0.0),
        logp_ref=base.logp_ref + np.where(mask == 0, rng.normal(size=8) * 100, 0.0),
        mask=mask,
        advantage=0.8,
    )
    assert surrogate_objective(perturbed) == reference  # bitwise identical


def test_all_masked_rejected():
    with pytest.raises(AllMasked):
        surrogate_objective(make_batch(mask=np.zeros(4, dtype=int)))


def test_k3_nonnegative_property():
    rng = random.Random(31)
    for _ in range(500):
        ref = rng.uniform(-30, 5)
        new = rng.uniform(-30, 5)
        assert k3_estimate(ref, new) >= 0.0
    assert k3_estimate(-1.0, -1.0) == 0.0


def test_huge_epsilon_zero_beta_reduces_to_plain_ratio_mean():
    rng = np.random.default_rng(3)
    logp_new = rng.normal(size=16)
    logp_old = rng.normal(size=16)
    adv = -0.4
    batch = make_batch(
        n=16, advantage=adv, logp_new=logp_new, logp_old=logp_old,
        clip_eps=1e9, kl_beta=0.0,
    )
    rho = np.exp(logp_new - logp_old)
    assert surrogate_objective(batch) == pytest.approx(float(np.mean(rho * adv)), rel=1e-12)


def test_clipping_bound_property():
    rng = np.random.default_rng(17)
    for _ in range(50):
        n = 12
        adv = float(rng.normal())
        eps = 0.2
        logp_new = rng.normal(size=n)
        logp_old = rng.normal(size=n)
        rho = np.exp(logp_new - logp_old)
        terms = np.minimum(rho * adv, np.clip(rho, 1 - eps, 1 + eps) * adv)
        lo = np.minimum.reduce([rho * adv, np.full(n, (1 - eps) * adv), np.full(n, (1 + eps) * adv)])
        hi = np.maximum.reduce([rho * adv, np.full(n, (1 - eps) * adv), np.full(n, (1 + eps) * adv)])
        assert (terms >= lo - 1e-12).all() and (terms <= hi + 1e-12).all()
        if adv > 0:
            assert (terms <= (1 + eps) * adv + 1e-12).all()


def test_misaligned_arrays_rejected():
    with pytest.raises(ValueError):
        TokenBatch(
            logp_new=np.zeros(4), logp_old=np.zeros(3), logp_ref=np.zeros(4),
            mask=np.ones(4, dtype=int), advantage=0.0,
        )


# --- batch emission --------------------------------------------------------------

def rewarded_group(n=8):
    trajectories = []
    cfg = RewardConfig()
    gold = []
    breakdowns = []
    for i in range(n):
        entries = [SEARCH, ANSWER] if i % 2 == 0 else [ANSWER]
        traj = make_trajectory(entries)
        traj.trajectory_id = f"g/{i}"
        trajectories.append(traj)
        breakdowns.append(compute_reward(traj, gold, cfg))
    return trajectories, breakdowns


def test_emit_and_read_round_trip(tmp_path):
    trajectories, breakdowns = rewarded_group()
    path = tmp_path / "batch.jsonl"
    records = emit_training_batch(path, trajectories, breakdowns)
    assert read_training_batch(path) == records
    assert len(records) == 8

    advantages = [r["advantage"] for r in records]
    assert abs(sum(advantages) / len(advantages)) < 1e-10
    for record, traj in zip(records, trajectories):
        assert record["trajectory_id"] == traj.trajectory_id
        assert len(record["mask"]) == len(traj.transcript)


def test_empty_group_rejected(tmp_path):
    with pytest.raises(GroupTooSmall):
        build_batch_records([], [])


def test_token_batch_from_filled_record(tmp_path):
    trajectories, breakdowns = rewarded_group(2)
    records = build_batch_records(trajectories, breakdowns)
    record = records[0]
    n = len(record["mask"])
    record["logp_new"] = [0.0] * n
    record["logp_old"] = [0.0] * n
    record["logp_ref"] = [0.0] * n
    batch = token_batch_from_record(record)
    assert surrogate_objective(batch) == pytest.approx(record["advantage"], abs=1e-12)

    with pytest.raises(KeyError):
        token_batch_from_record(records[1])
