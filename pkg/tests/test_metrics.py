from __future__ import annotations

import random

import pytest

from gmnerkit.metrics import (
    BBox,
    EntityTriplet,
    GoldEntity,
    GoldSample,
    MissingTrainCorpus,
    SampleEval,
    Task,
    iou,
    load_gold_corpus,
    normalize_span,
    score,
    score_corpus,
    search_ratio,
    seen_unseen_split,
    triplet_correct,
)

B = BBox(0, 0, 10, 10)


def test_iou_spot_values():
    assert iou(B, B) == 1.0
    assert iou(B, BBox(20, 20, 30, 30)) == 0.0
    assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_symmetric_and_bounded():
    rng = random.Random(3)
    for _ in range(200):
        a = random_box(rng)
        b = random_box(rng)
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)
        assert iou(a, a) == 1.0


def test_bbox_validation():
    with pytest.raises(ValueError):
        BBox(5, 0, 5, 10)
    with pytest.raises(ValueError):
        BBox(-1, 0, 5, 10)
    with pytest.raises(ValueError):
        BBox(0, 0, float("inf"), 10)


def test_both_ungrounded_is_correct_for_all_tasks():
    pred = EntityTriplet("Bayern", "ORG", None)
    gold = GoldEntity("Bayern", "ORG", ())
    for task in Task:
        assert triplet_correct(pred, gold, task)


def test_wrong_type_correct_region_indicator_table():
    pred = EntityTriplet("Bayern", "LOC", B)
    gold = GoldEntity("Bayern", "ORG", (B,))
    assert not triplet_correct(pred, gold, Task.GMNER)
    assert not triplet_correct(pred, gold, Task.MNER)
    assert triplet_correct(pred, gold, Task.EEG)


def test_iou_exactly_half_fails_region_indicator():
    pred = EntityTriplet("Bayern", "ORG", BBox(0, 0, 5, 10))  # IoU 0.5 vs gold
    gold = GoldEntity("Bayern", "ORG", (B,))
    assert not triplet_correct(pred, gold, Task.GMNER)
    assert triplet_correct(pred, gold, Task.MNER)


def test_span_normalization_trims_outer_whitespace_only():
    pred = EntityTriplet("  Bayern ", "ORG", None)
    gold = GoldEntity("Bayern", "ORG", ())
    assert triplet_correct(pred, gold, Task.MNER)
    assert not triplet_correct(EntityTriplet("bayern", "ORG", None), gold, Task.MNER)
    assert normalize_span(" a  b ") == "a  b"


def test_score_two_correct_of_three_gold():
    preds = [EntityTriplet("a", "T", None), EntityTriplet("b", "T", None)]
    golds = [GoldEntity("a", "T", ()), GoldEntity("b", "T", ()), GoldEntity("c", "T", ())]
    report = score(preds, golds, Task.GMNER)
    assert report.precision == 1.0
    assert report.recall == pytest.approx(2 / 3, abs=1e-15)
    assert report.f1 == pytest.approx(0.8, abs=1e-12)
    assert (report.n_correct, report.n_predict, report.n_gold) == (2, 2, 3)


def test_empty_predictions_scores_zero():
    report = score([], [GoldEntity("a", "T", ())], Task.GMNER)
    assert (report.precision, report.recall, report.f1) == (0.0, 0.0, 0.0)


def test_duplicate_predictions_count_per_occurrence():
    preds = [EntityTriplet("a", "T", None), EntityTriplet("a", "T", None)]
    golds = [GoldEntity("a", "T", ())]
    report = score(preds, golds, Task.GMNER)
    assert report.n_correct == 1
    assert report.n_predict == 2
    assert report.precision == 0.5


# --- maximum-matching oracle ---------------------------------------------------

def random_box(rng: random.Random) -> BBox:
    x1 = rng.randrange(0, 40, 5)
    y1 = rng.randrange(0, 40, 5)
    return BBox(x1, y1, x1 + rng.randrange(5, 30, 5), y1 + rng.randrange(5, 30, 5))


def random_instance(rng: random.Random):
    spans = ["a", "b", "c"]
    types = ["T", "U"]

    def maybe_box():
        return None if rng.random() < 0.3 else random_box(rng)

    preds = [
        EntityTriplet(rng.choice(spans), rng.choice(types), maybe_box())
        for _ in range(rng.randrange(0, 6))
    ]
    golds = [
        GoldEntity(
            rng.choice(spans),
            rng.choice(types),
            tuple(random_box(rng) for _ in range(rng.randrange(0, 3))),
        )
        for _ in range(rng.randrange(0, 6))
    ]
    return preds, golds


def max_matching_oracle(preds, golds, task) -> int:
    """Exhaustive recursion over which gold each prediction consumes."""
    compatible = [
        [g for g in range(len(golds)) if triplet_correct(p, golds[g], task)] for p in preds
    ]

    def best(i: int, used: frozenset[int]) -> int:
        if i == len(preds):
            return 0
        top = best(i + 1, used)  # leave prediction i unmatched
        for g in compatible[i]:
            if g not in used:
                top = max(top, 1 + best(i + 1, used | {g}))
        return top

    return best(0, frozenset())


@pytest.mark.parametrize("task", list(Task))
def test_match_count_equals_max_matching_oracle(task):
    rng = random.Random(42)
    for _ in range(300):
        preds, golds = random_instance(rng)
        report = score(preds, golds, task)
        assert report.n_correct == max_matching_oracle(preds, golds, task)
        assert report.n_correct <= min(report.n_predict, report.n_gold)


def test_known_greedy_trap_is_handled():
    # pred0 matches gold0 and gold1; pred1 matches gold0 only. A greedy
    # matcher that hands gold0 to pred0 finds 1; the maximum is 2.
    box_a, box_b = BBox(0, 0, 10, 10), BBox(100, 100, 110, 110)
    preds = [EntityTriplet("x", "T", box_a), EntityTriplet("x", "T", box_b)]
    golds = [
        GoldEntity("x", "T", (box_a, box_b)),
        GoldEntity("x", "T", (box_a,)),
    ]
    assert score(preds, golds, Task.GMNER).n_correct == 2


def test_reorder_invariance_when_unambiguous():
    rng = random.Random(5)
    preds = [EntityTriplet(s, "T", None) for s in ("a", "b", "c")]
    golds = [GoldEntity(s, "T", ()) for s in ("c", "a", "b")]
    base = score(preds, golds, Task.GMNER).f1
    for _ in range(5):
        shuffled = preds[:]
        rng.shuffle(shuffled)
        assert score(shuffled, golds, Task.GMNER).f1 == base


def test_score_corpus_aggregates_counts_additively():
    rng = random.Random(11)
    instances = [random_instance(rng) for _ in range(6)]
    merged = score_corpus(instances, Task.GMNER)
    first = score_corpus(instances[:3], Task.GMNER)
    second = score_corpus(instances[3:], Task.GMNER)
    assert merged.n_correct == first.n_correct + second.n_correct
    assert merged.n_predict == first.n_predict + second.n_predict
    assert merged.n_gold == first.n_gold + second.n_gold


# --- seen/unseen and search ratio ----------------------------------------------

def make_train(*spans):
    return [
        GoldSample("t0", "text", None, [GoldEntity(s, "T", ()) for s in spans])
    ]


def sample_eval(sid, spans, n_tool_calls=0):
    return SampleEval(
        sample_id=sid,
        golds=[GoldEntity(s, "T", ()) for s in spans],
        preds=[EntityTriplet(s, "T", None) for s in spans],
        n_tool_calls=n_tool_calls,
    )


def test_all_mentions_in_train_means_unseen_empty():
    split = seen_unseen_split(
        [sample_eval("0", ["a"]), sample_eval("1", ["b"])], make_train("a", "b"), Task.GMNER
    )
    assert split.unseen.n_samples == 0
    assert split.seen.n_samples == 2


def test_one_novel_mention_splits_one_one():
    split = seen_unseen_split(
        [sample_eval("0", ["a"]), sample_eval("1", ["novel"])], make_train("a"), Task.GMNER
    )
    assert split.seen.n_samples == 1
    assert split.unseen.n_samples == 1
    assert split.all.n_samples == 2


def test_search_ratio_counts_tool_using_trajectories():
    assert search_ratio([0, 1, 2, 0]) == 0.5
    assert search_ratio([]) == 0.0


def test_split_search_ratios_per_group():
    samples = [
        sample_eval("0", ["a"], n_tool_calls=0),
        sample_eval("1", ["novel"], n_tool_calls=2),
    ]
    split = seen_unseen_split(samples, make_train("a"), Task.GMNER)
    assert split.seen.search_ratio == 0.0
    assert split.unseen.search_ratio == 1.0
    assert split.all.search_ratio == 0.5


def test_missing_train_corpus():
    with pytest.raises(MissingTrainCorpus):
        seen_unseen_split([sample_eval("0", ["a"])], None, Task.GMNER)


def test_by_type_flag_is_stricter():
    train = [GoldSample("t", "x", None, [GoldEntity("a", "T", ())])]
    samples = [
        SampleEval("0", [GoldEntity("a", "U", ())], [EntityTriplet("a", "U", None)], 0)
    ]
    assert seen_unseen_split(samples, train, Task.MNER).unseen.n_samples == 0
    assert seen_unseen_split(samples, train, Task.MNER, by_type=True).unseen.n_samples == 1


def test_by_region_flag_tracks_groundability():
    train = [GoldSample("t", "x", None, [GoldEntity("a", "T", ())])]
    samples = [
        SampleEval("0", [GoldEntity("a", "T", (B,))], [EntityTriplet("a", "T", B)], 0)
    ]
    assert seen_unseen_split(samples, train, Task.GMNER).unseen.n_samples == 0
    assert seen_unseen_split(samples, train, Task.GMNER, by_region=True).unseen.n_samples == 1


def test_load_gold_corpus_schema(tmp_path):
    path = tmp_path / "gold.jsonl"
    path.write_text(
        '{"text":"hello a","image_ref":"img://0","entities":[{"span":"a","type":"T","boxes":[[0,0,5,5]]}]}\n'
        '{"text":"no entities","image_ref":null,"entities":[]}\n',
        encoding="utf-8",
    )
    corpus = load_gold_corpus(path)
    assert [s.sample_id for s in corpus] == ["0", "1"]
    assert corpus[0].entities[0].boxes == (BBox(0, 0, 5, 5),)

    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"entities":[]}\n', encoding="utf-8")
    with pytest.raises(ValueError):
        load_gold_corpus(bad)
