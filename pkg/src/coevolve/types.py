"""Shared data model: tasks, trajectories, vote records, reward breakdowns, batches.

Everything here is immutable once built so records can be handed between
rollout workers without copying.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

POLICY_TEXT = "policy_text"
TOOL_CALL = "tool_call"
TOOL_OUTPUT = "tool_output"
SEGMENT_KINDS = (POLICY_TEXT, TOOL_CALL, TOOL_OUTPUT)


class FormatError(ValueError):
    """Curriculum output does not follow the question/boxed template."""


class DomainError(ValueError):
    """A probability-like argument fell outside [0, 1]."""


@dataclass(frozen=True)
class Task:
    id: str
    prompt_text: str
    question: str = ""
    declared_answer: Optional[str] = None
    iteration: int = 0

    @property
    def format_valid(self) -> bool:
        return bool(self.question) and self.declared_answer is not None

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "prompt_text": self.prompt_text,
            "question": self.question,
            "declared_answer": self.declared_answer,
            "iteration": self.iteration,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Task":
        return cls(
            id=rec["id"],
            prompt_text=rec["prompt_text"],
            question=rec.get("question", ""),
            declared_answer=rec.get("declared_answer"),
            iteration=int(rec.get("iteration", 0)),
        )


@dataclass(frozen=True)
class Segment:
    kind: str
    text: str
    token_logprobs: Optional[tuple[float, ...]] = None
    # Token strings behind token_logprobs; needed to re-score under new params.
    tokens: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.kind == TOOL_OUTPUT:
            if self.token_logprobs is not None:
                raise ValueError("tool_output segments carry no log-probabilities")
        else:
            if self.token_logprobs is None:
                object.__setattr__(self, "token_logprobs", ())
            if self.tokens is not None and len(self.tokens) != len(self.token_logprobs):
                raise ValueError("tokens and token_logprobs differ in length")
        if self.kind == TOOL_CALL and not self.text:
            raise ValueError("tool_call text must be non-empty")

    @property
    def is_policy(self) -> bool:
        return self.kind != TOOL_OUTPUT

    def to_record(self) -> dict:
        rec = {"kind": self.kind, "text": self.text}
        if self.token_logprobs is not None:
            rec["token_logprobs"] = list(self.token_logprobs)
        if self.tokens is not None:
            rec["tokens"] = list(self.tokens)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Segment":
        lp = rec.get("token_logprobs")
        toks = rec.get("tokens")
        return cls(
            kind=rec["kind"],
            text=rec["text"],
            token_logprobs=None if lp is None else tuple(float(x) for x in lp),
            tokens=None if toks is None else tuple(toks),
        )


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    segments: tuple[Segment, ...]
    final_answer: Optional[str] = None
    truncated: bool = False
    tool_call_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        prev = None
        n_out = 0
        for seg in self.segments:
            if seg.kind == TOOL_OUTPUT:
                if prev is None or prev.kind != TOOL_CALL:
                    raise ValueError("tool_output must directly follow a tool_call")
                n_out += 1
            prev = seg
        if n_out != self.tool_call_count:
            raise ValueError("tool_call_count must equal the number of tool outputs")
        if not self.truncated and self.final_answer is None:
            raise ValueError("a finished trajectory needs a final answer")

    def policy_logprobs(self) -> list[float]:
        out: list[float] = []
        for seg in self.segments:
            if seg.is_policy:
                out.extend(seg.token_logprobs)
        return out

    @property
    def n_policy_tokens(self) -> int:
        return sum(len(s.token_logprobs) for s in self.segments if s.is_policy)

    def to_record(self) -> dict:
        return {
            "task_id": self.task_id,
            "segments": [s.to_record() for s in self.segments],
            "final_answer": self.final_answer,
            "truncated": self.truncated,
            "tool_call_count": self.tool_call_count,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        return cls(
            task_id=rec["task_id"],
            segments=tuple(Segment.from_record(s) for s in rec["segments"]),
            final_answer=rec.get("final_answer"),
            truncated=bool(rec.get("truncated", False)),
            tool_call_count=int(rec.get("tool_call_count", 0)),
        )


@dataclass(frozen=True)
class ConsistencyRecord:
    task_id: str
    answers: tuple[Optional[str], ...]
    majority_answer: Optional[str]
    p_hat: float

    def to_record(self) -> dict:
        return asdict(self) | {"answers": list(self.answers)}


@dataclass(frozen=True)
class RewardBreakdown:
    task_id: str
    r_unc: float
    r_tool: float
    r_rep: float
    format_ok: bool
    composite: float

    def to_record(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BatchEntry:
    trajectory: Trajectory
    reward: float
    advantage: float
    scaled_advantage: float
    eps_high: float
    eps_low: float
    p_hat: float = 1.0
    group: int = 0


@dataclass(frozen=True)
class UpdateBatch:
    entries: tuple[BatchEntry, ...]
    policy_version: str = ""

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# Curriculum output grammar and answer extraction

_QUESTION_RE = re.compile(r"\s*<question>(.*?)</question>\s*", re.S)
_BOXED = "\\boxed{"


def _boxed_spans(text: str) -> list[tuple[int, int, int]]:
    """(start, content_start, end) for every balanced ``\\boxed{...}``."""
    spans = []
    i = text.find(_BOXED)
    while i != -1:
        j = i + len(_BOXED)
        depth = 1
        k = j
        while k < len(text) and depth:
            c = text[k]
            if c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
            k += 1
        if depth:
            break  # unbalanced tail, nothing further can close
        spans.append((i, j, k))
        i = text.find(_BOXED, k)
    return spans


def extract_final_answer(text: str) -> Optional[str]:
    """Content of the last ``\\boxed{...}`` in ``text``, or None."""
    spans = _boxed_spans(text)
    if not spans:
        return None
    _, j, k = spans[-1]
    return text[j : k - 1]


def parse_curriculum_output(raw: str, task_id: str = "task-0", iteration: int = 0) -> Task:
    """Parse ``<question>...</question> \\boxed{...}`` into a Task.

    Raises FormatError unless the whole string is exactly one question block
    followed by one boxed block, with only whitespace around them.
    """
    m = _QUESTION_RE.match(raw)
    if not m:
        raise FormatError("missing <question> block")
    question = m.group(1).strip()
    if not question:
        raise FormatError("empty question")
    rest = raw[m.end():]
    if not rest.startswith(_BOXED):
        raise FormatError("missing boxed answer after question")
    spans = _boxed_spans(rest)
    if not spans or spans[0][0] != 0:
        raise FormatError("unbalanced boxed answer")
    _, j, k = spans[0]
    if rest[k:].strip():
        raise FormatError("trailing content after boxed answer")
    answer = rest[j : k - 1]
    if not answer.strip():
        raise FormatError("empty boxed answer")
    return Task(id=task_id, prompt_text=raw, question=question,
                declared_answer=answer, iteration=iteration)


def task_from_output(raw: str, task_id: str, iteration: int = 0) -> Task:
    """Like parse_curriculum_output but returns a format-invalid Task instead of raising."""
    try:
        return parse_curriculum_output(raw, task_id, iteration)
    except FormatError:
        return Task(id=task_id, prompt_text=raw, iteration=iteration)


def render_curriculum_output(question: str, answer: str) -> str:
    return f"<question>{question}</question>\n\\boxed{{{answer}}}"


# ---------------------------------------------------------------------------
# Canonical answer matching

_NUM_RE = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")
_FRAC_RE = re.compile(r"\\d?frac\{([^{}]+)\}\{([^{}]+)\}")
REL_TOL = 1e-9


def normalize_answer(ans: str) -> str:
    s = " ".join(ans.split())
    while len(s) >= 2 and s[0] == "{" and s[-1] == "}" and _balanced(s[1:-1]):
        s = s[1:-1].strip()
    return s


def _balanced(s: str) -> bool:
    depth = 0
    for c in s:
        depth += (c == "{") - (c == "}")
        if depth < 0:
            return False
    return depth == 0


def _as_number(s: str):
    s = s.replace(" ", "")
    m = _FRAC_RE.fullmatch(s)
    if m:
        s = f"{m.group(1)}/{m.group(2)}"
    if "/" in s:
        num, _, den = s.partition("/")
        a, b = _as_number(num), _as_number(den)
        if a is None or b is None or b == 0:
            return None
        if isinstance(a, float) or isinstance(b, float):
            return float(a) / float(b)
        return a / b
    if not _NUM_RE.fullmatch(s):
        return None
    if "e" in s or "E" in s:
        return float(s)
    return Fraction(s)


def canonical_answer(ans: Optional[str]) -> Optional[str]:
    """Canonical string form; numeric literals collapse to one spelling per value."""
    if ans is None:
        return None
    s = normalize_answer(ans)
    v = _as_number(s)
    if v is None:
        return s
    if isinstance(v, float):
        return repr(v)
    return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"


def answers_match(a: Optional[str], b: Optional[str]) -> bool:
    if a is None or b is None:
        return False
    sa, sb = normalize_answer(a), normalize_answer(b)
    va, vb = _as_number(sa), _as_number(sb)
    if va is not None and vb is not None:
        if va == vb:
            return True
        return math.isclose(float(va), float(vb), rel_tol=REL_TOL, abs_tol=0.0)
    if va is not None or vb is not None:
        return False
    return sa == sb


# ---------------------------------------------------------------------------
# Line-delimited persistence


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def append_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def dump_tasks(path, tasks: Sequence[Task]) -> None:
    write_jsonl(path, (t.to_record() for t in tasks))


def load_tasks(path) -> list[Task]:
    return [Task.from_record(r) for r in read_jsonl(path)]
