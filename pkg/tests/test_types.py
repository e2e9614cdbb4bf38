import pytest
from hypothesis import given, strategies as st

from coevolve.types import (
    POLICY_TEXT,
    TOOL_CALL,
    TOOL_OUTPUT,
    FormatError,
    Segment,
    Task,
    Trajectory,
    answers_match,
    canonical_answer,
    dump_tasks,
    extract_final_answer,
    load_tasks,
    parse_curriculum_output,
    read_jsonl,
    render_curriculum_output,
    write_jsonl,
)


def test_parse_minimal():
    t = parse_curriculum_output("<question>What is 2+2?</question>\n\\boxed{4}")
    assert t.question == "What is 2+2?"
    assert t.declared_answer == "4"
    assert t.format_valid


@pytest.mark.parametrize("raw", [
    "What is 2+2? Answer: 4",
    "<question>Q</question>",
    "\\boxed{4}<question>Q</question>",
    "<question>Q</question>\n\\boxed{4} trailing",
    "<question></question>\\boxed{4}",
    "<question>Q</question>\\boxed{4",
])
def test_parse_rejects(raw):
    with pytest.raises(FormatError):
        parse_curriculum_output(raw)


def test_parse_allows_surrounding_whitespace():
    t = parse_curriculum_output("  \n<question>Q</question>  \n \\boxed{x}\n\n")
    assert (t.question, t.declared_answer) == ("Q", "x")


@pytest.mark.parametrize("text,expected", [
    ("so \\boxed{42}", "42"),
    ("\\boxed{\\frac{1}{2}}", "\\frac{1}{2}"),
    ("no answer given", None),
    ("first \\boxed{1} then \\boxed{2}", "2"),
    ("\\boxed{unbalanced", None),
])
def test_extract_final_answer(text, expected):
    assert extract_final_answer(text) == expected


_q = st.text(alphabet=st.characters(blacklist_characters="<>", blacklist_categories=("Cs", "Cc")),
             min_size=1).map(str.strip).filter(bool)
_a = st.text(alphabet="0123456789abcxyz+-*/ ^{}", min_size=1).filter(
    lambda s: s.strip() == s and s.count("{") == s.count("}") and "}{" not in s and _balanced(s))


def _balanced(s):
    d = 0
    for c in s:
        d += (c == "{") - (c == "}")
        if d < 0:
            return False
    return d == 0


@given(_q, _a)
def test_round_trip(question, answer):
    t = parse_curriculum_output(render_curriculum_output(question, answer))
    assert (t.question, t.declared_answer) == (question, answer)


@pytest.mark.parametrize("a,b,eq", [
    ("4", " 4 ", True),
    ("{4}", "4", True),
    ("4.0", "4", True),
    ("1/2", "0.5", True),
    ("\\frac{1}{2}", "0.5", True),
    ("x  +  1", "x + 1", True),
    ("4", "5", False),
    (None, "4", False),
    (None, None, False),
])
def test_answers_match(a, b, eq):
    assert answers_match(a, b) is eq


def test_canonical_answer_numeric_value():
    assert canonical_answer("007") == canonical_answer("7")


def _traj(segs, answer="5", truncated=False, n=None):
    return Trajectory("t", tuple(segs), answer, truncated, sum(s.kind == TOOL_OUTPUT for s in segs) if n is None else n)


def test_trajectory_invariants():
    call = Segment(TOOL_CALL, "print(5)", (0.0,))
    out = Segment(TOOL_OUTPUT, "5")
    text = Segment(POLICY_TEXT, "\\boxed{5}", (-1.0,))
    tr = _traj([call, out, text])
    assert tr.tool_call_count == 1
    assert tr.policy_logprobs() == [0.0, -1.0]
    with pytest.raises(ValueError):
        _traj([text, out])  # output not after a call
    with pytest.raises(ValueError):
        _traj([call, out, text], n=0)
    with pytest.raises(ValueError):
        _traj([text], answer=None, truncated=False)
    with pytest.raises(ValueError):
        Segment(TOOL_OUTPUT, "x", (0.0,))
    with pytest.raises(ValueError):
        Segment(TOOL_CALL, "", ())


def test_jsonl_round_trip(tmp_path):
    tasks = [Task("a", "raw", "q?", "1", 2), Task("b", "bad", "", None, 0)]
    dump_tasks(tmp_path / "t.jsonl", tasks)
    assert load_tasks(tmp_path / "t.jsonl") == tasks
    seg = Segment(POLICY_TEXT, "hi", (-0.5,), ("hi",))
    tr = Trajectory("a", (seg, Segment(TOOL_CALL, "print(1)", (0.0,)), Segment(TOOL_OUTPUT, "1")), None, True, 1)
    write_jsonl(tmp_path / "r.jsonl", [tr.to_record()])
    (rec,) = list(read_jsonl(tmp_path / "r.jsonl"))
    assert Trajectory.from_record(rec) == tr
    assert set(rec) == {"task_id", "segments", "final_answer", "truncated", "tool_call_count"}
