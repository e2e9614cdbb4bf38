from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from coevolve.consistency import (
    EmptyInput,
    FrontierBand,
    assign_terminal_rewards,
    consistency_record,
    filter_frontier,
    majority_vote,
)
from coevolve.types import Segment, Task, Trajectory

import oracles


@pytest.mark.parametrize("answers,expected", [
    (["4", "4", "5", "4", None], ("4", 0.6)),
    (["a", "a", "a"], ("a", 1.0)),
    (["x", "y"], ("x", 0.5)),
    ([None, None], (None, 0.0)),
    ([None, None, None, "3", "4", "4"], ("4", 2 / 6)),
    (["4.0", "4", "{4}", "5"], ("4.0", 0.75)),
])
def test_majority_examples(answers, expected):
    y, p = majority_vote(answers)
    assert y == expected[0]
    assert p == pytest.approx(expected[1], abs=1e-12)


def test_majority_empty():
    with pytest.raises(EmptyInput):
        majority_vote([])


_answers = st.lists(st.sampled_from(["a", "b", "c", None]), min_size=1, max_size=12)


@given(_answers)
def test_majority_matches_oracle(answers):
    y, p = majority_vote(answers)
    oy, op = oracles.vote(answers)
    assert y == oy
    assert Fraction(p).limit_denominator(100) == op
    k = len(answers)
    assert any(abs(p - m / k) < 1e-15 for m in range(k + 1))
    if y is not None:
        assert all(answers.count(y) >= answers.count(z) for z in set(answers) - {None})


def test_consistency_record_fields():
    rec = consistency_record("t", ["1", None, "1"])
    assert rec.answers == ("1", None, "1")
    assert rec.majority_answer == "1"
    assert rec.p_hat == pytest.approx(2 / 3)


def _task(i):
    return Task(f"t{i}", "", f"q{i}", str(i))


def test_filter_examples():
    pool = [(_task(i), p) for i, p in enumerate([0.1, 0.3, 0.55, 0.8, 0.9])]
    kept = filter_frontier(pool, FrontierBand(0.3, 0.8))
    assert [e.p_hat for e in kept.entries] == [0.3, 0.55, 0.8]
    assert filter_frontier([(_task(0), 0.5)], 0.01).entries
    assert not filter_frontier([(_task(0), 1.0)], 0.25).entries


def test_filter_uses_majority_label_and_drops_unlabelled():
    pool = [(_task(0), 0.5, "7"), (_task(1), 0.5, None), (Task("x", "", "q", None), 0.5)]
    kept = filter_frontier(pool)
    assert [(e.task.id, e.pseudo_label) for e in kept.entries] == [("t0", "7")]


@pytest.mark.parametrize("delta", [0.0, 0.6, -0.1])
def test_symmetric_band_domain(delta):
    with pytest.raises(ValueError):
        FrontierBand.symmetric(delta)


@given(st.lists(st.integers(0, 10), max_size=30), st.sampled_from([0.1, 0.25, 0.3, 0.5]))
def test_filter_partitions_pool(counts, delta):
    pool = [(_task(i), c / 10) for i, c in enumerate(counts)]
    kept = filter_frontier(pool, delta)
    ids = [e.task.id for e in kept.entries]
    rejected = [t.id for t, p in pool if t.id not in ids]
    assert sorted(ids + rejected) == sorted(t.id for t, _ in pool)
    assert ids == [t.id for t, p in pool if oracles.in_band(Fraction(round(p * 10), 10),
                                                           Fraction(1, 2) - Fraction(str(delta)),
                                                           Fraction(1, 2) + Fraction(str(delta)))]


def _traj(answer):
    seg = Segment("policy_text", "x", (0.0,))
    return Trajectory("t", (seg,), answer, answer is None, 0)


def test_terminal_rewards():
    assert assign_terminal_rewards([_traj("4"), _traj("5"), _traj("4")], "4") == [1, 0, 1]
    assert assign_terminal_rewards([_traj("4")] * 3, "4") == [1, 1, 1]
    assert assign_terminal_rewards([_traj(None)], "4") == [0]
    with pytest.raises(ValueError):
        assign_terminal_rewards([_traj("4")], None)


@given(st.lists(st.sampled_from(["1", "2", "3", None]), min_size=1, max_size=12))
def test_rewards_sum_to_votes(answers):
    y, p = majority_vote(answers)
    if y is None:
        return
    rewards = assign_terminal_rewards([_traj(a) for a in answers], y)
    assert sum(rewards) == pytest.approx(p * len(answers))
