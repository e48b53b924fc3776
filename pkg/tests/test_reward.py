from __future__ import annotations

import pytest

from gmnerkit.metrics import BBox, EntityTriplet, GoldEntity
from gmnerkit.policy import ScriptedPolicy
from gmnerkit.reward import RewardConfig, RewardBreakdown, combine_reward, compute_reward
from gmnerkit.rollout import RolloutConfig, RolloutInput, TrajectoryStatus, run_rollout
from gmnerkit.toolgw import CachingSearchTool, LocalIndexBackend

DEFAULTS = RewardConfig()  # 0.9 / 0.1 / 0.01, gamma 0.8


def test_default_weights():
    assert (DEFAULTS.lambda_f1, DEFAULTS.lambda_fmt, DEFAULTS.lambda_search) == (0.9, 0.1, 0.01)
    assert DEFAULTS.gamma == 0.8


def test_perfect_answer_two_searches_one_gold():
    b = combine_reward(1.0, 1, n_tool_calls=2, n_gold=1, cfg=DEFAULTS)
    assert b.penalty_active
    assert b.n_search == 2.0
    assert b.total == pytest.approx(0.98, abs=1e-12)


def test_gate_inactive_below_gamma():
    b = combine_reward(0.79, 1, n_tool_calls=10, n_gold=1, cfg=DEFAULTS)
    assert not b.penalty_active
    assert b.total == pytest.approx(0.811, abs=1e-12)


def test_gate_uses_greater_or_equal():
    b = combine_reward(0.8, 1, n_tool_calls=1, n_gold=1, cfg=DEFAULTS)
    assert b.penalty_active
    assert b.total == pytest.approx(0.9 * 0.8 + 0.1 - 0.01, abs=1e-12)


def test_zero_search_perfect_answer_is_exactly_one():
    b = combine_reward(1.0, 1, n_tool_calls=0, n_gold=3, cfg=DEFAULTS)
    assert b.total == 1.0


def test_denominator_floors_at_one_gold():
    b = combine_reward(1.0, 1, n_tool_calls=3, n_gold=0, cfg=DEFAULTS)
    assert b.n_search == 3.0


def test_gate_monotonicity():
    # At or above gamma: strictly decreasing in the search count.
    totals = [
        combine_reward(0.9, 1, n, 1, DEFAULTS).total for n in range(6)
    ]
    assert all(a > b for a, b in zip(totals, totals[1:]))
    # Below gamma: constant in the search count.
    flat = {combine_reward(0.5, 1, n, 1, DEFAULTS).total for n in range(6)}
    assert len(flat) == 1


def test_total_bounded_by_weight_sum():
    for r_f1 in (0.0, 0.5, 0.8, 1.0):
        for fmt in (0, 1):
            for calls in (0, 1, 5):
                b = combine_reward(r_f1, fmt, calls, 2, DEFAULTS)
                assert b.total <= DEFAULTS.lambda_f1 + DEFAULTS.lambda_fmt + 1e-12
    top = combine_reward(1.0, 1, 0, 2, DEFAULTS)
    assert top.total == DEFAULTS.lambda_f1 + DEFAULTS.lambda_fmt


def test_zero_search_weight_removes_penalty_entirely():
    cfg = RewardConfig(lambda_search=0.0)
    for calls in range(6):
        b = combine_reward(1.0, 1, calls, 1, cfg)
        assert b.total == 1.0
        assert b.penalty_active  # the gate flag still reports, the term is zero


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        RewardConfig(lambda_f1=-0.1)


def test_breakdown_round_trip():
    b = combine_reward(0.9, 1, 2, 2, DEFAULTS)
    assert RewardBreakdown.from_dict(b.to_dict()) == b


# --- on real trajectories -------------------------------------------------------

GOLD = [GoldEntity("Bayern", "ORG", (BBox(0, 0, 10, 10),))]
ANSWER = '<reason>r</reason><answer>{"entities":[{"span":"Bayern","type":"ORG","box":[0,0,10,10]}]}</answer>'
SEARCH = '<reason>r</reason><text_search>{"queries":[{"entity":"Bayern","q":"bayern"}]}</text_search>'


def make_tool():
    return CachingSearchTool(
        LocalIndexBackend(
            [{"modality": "text", "title": "bayern", "body": "b", "url": "u", "image_ref": None}]
        )
    )


def run(entries, cfg=None):
    pol = ScriptedPolicy(
        [{"trajectory_id": "0", "turn_index": i, "text": t} for i, t in enumerate(entries)]
    )
    return run_rollout(RolloutInput("post"), pol, make_tool(), cfg or RolloutConfig())


def test_compute_reward_two_searches_then_perfect_answer():
    traj = run([SEARCH, SEARCH, ANSWER])
    b = compute_reward(traj, GOLD, DEFAULTS)
    assert (b.r_f1, b.r_fmt, b.n_search) == (1.0, 1, 2.0)
    assert b.total == pytest.approx(0.98, abs=1e-12)


def test_compute_reward_budget_exhausted():
    traj = run([SEARCH, SEARCH, SEARCH, SEARCH])
    assert traj.status is TrajectoryStatus.BUDGET_EXHAUSTED
    b = compute_reward(traj, GOLD, DEFAULTS)
    assert b.r_f1 == 0.0
    assert b.r_fmt == 0
    assert not b.penalty_active


def test_compute_reward_invalid_segment_kills_format_reward():
    traj = run(["not a segment", ANSWER])
    assert traj.status is TrajectoryStatus.ANSWERED
    b = compute_reward(traj, GOLD, DEFAULTS)
    assert b.r_fmt == 0
    assert b.r_f1 == 1.0
    assert b.total == pytest.approx(0.9, abs=1e-12)


def test_compute_reward_wrong_answer():
    wrong = ANSWER.replace('"ORG"', '"LOC"')
    traj = run([wrong])
    b = compute_reward(traj, GOLD, DEFAULTS)
    assert b.r_f1 == 0.0
    assert b.r_fmt == 1
    assert b.total == pytest.approx(0.1, abs=1e-12)
