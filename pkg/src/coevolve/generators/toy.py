"""Trainable toy policy over a synthetic arithmetic task grammar.

Both agents are tabular softmax policies over a handful of decision points.
The curriculum role picks an expression depth, operators and operands and
writes a ``<question>`` block with the exact answer boxed. The executor role
reads the question and works through it one operator at a time, either in
its head (each intermediate result may be off by a small offset) or with one
code call per operator, feeding each printed result into the next call (each
call may mistype an operand). Mistakes compound with depth on both paths, but
far less on the code path.

Every decision emits exactly one token carrying the decision's
log-probability. All other tokens are fixed text with log-probability 0, so
the sequence log-probability is a sum of categorical log-probabilities and
its gradient is (one-hot - softmax) per decision.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..prompts import load_prompt
from ..types import TOOL_OUTPUT, Trajectory
from .base import (
    Capabilities,
    Generation,
    Generator,
    UnknownContext,
    UnreachableSequence,
)

OPS = ("+", "-", "*")
DIGITS = tuple(range(1, 10))
OFFSETS = (0, 1, -1, 2, -2, 3, -3)
MAGNITUDE_EDGES = (10, 100, 1000)

QUESTION_PREFIX = "Compute the value of"
ACTION_TEXTS = ("I will work this out directly.", "I will evaluate it step by step with code.\n")
ANSWER_PREFIX = " The answer is \\boxed{"
FALLBACK_TEXT = "The code did not run, so I will work it out directly."
NEXT_STEP = "Next step.\n"
FINAL_PREFIX = "So the answer is \\boxed{"
CODE_OPEN = "```python\n"
CODE_CLOSE = "\n```\n"

_PROBLEM_RE = re.compile(re.escape(QUESTION_PREFIX) + r" (.+?) \.")
_OUTPUT_RE = re.compile(r"```output\n(.*?)\n```", re.S)


# ---------------------------------------------------------------------------
# Grammar


@dataclass(frozen=True)
class ToyProblem:
    ops: tuple[str, ...]
    operands: tuple[int, ...]

    @property
    def depth(self) -> int:
        return len(self.ops)

    def value(self) -> int:
        v = self.operands[0]
        for op, a in zip(self.ops, self.operands[1:]):
            v = v + a if op == "+" else v - a if op == "-" else v * a
        return v

    def expression(self) -> str:
        parts = ["( " * (self.depth - 1) + str(self.operands[0])]
        for i, (op, a) in enumerate(zip(self.ops, self.operands[1:]), start=1):
            parts.append(f" {op} {a}" + (" )" if i < self.depth else ""))
        return "".join(parts)

    def question(self) -> str:
        return f"{QUESTION_PREFIX} {self.expression()} ."


@dataclass(frozen=True)
class ToyTaskGrammar:
    """Left-nested arithmetic chains ``( ( a op b ) op c ) op d`` of depth 1..max_depth."""

    max_depth: int = 4

    def parse(self, question: str) -> Optional[ToyProblem]:
        m = _PROBLEM_RE.search(question)
        if not m:
            return None
        return self.parse_expression(m.group(1))

    def parse_expression(self, expr: str) -> Optional[ToyProblem]:
        toks = expr.split()
        n_open = 0
        while n_open < len(toks) and toks[n_open] == "(":
            n_open += 1
        rest = toks[n_open:]
        try:
            operands = [int(rest[0])]
            ops = []
            i = 1
            while i < len(rest):
                op = rest[i]
                if op not in OPS:
                    return None
                ops.append(op)
                operands.append(int(rest[i + 1]))
                i += 2
                if len(ops) <= n_open:
                    if i >= len(rest) or rest[i] != ")":
                        return None
                    i += 1
        except (IndexError, ValueError):
            return None
        if not ops or n_open != len(ops) - 1 or len(ops) > self.max_depth:
            return None
        return ToyProblem(tuple(ops), tuple(operands))

    def sample(self, rng: np.random.Generator, depth: Optional[int] = None) -> ToyProblem:
        """Uniform problem (used for held-out evaluation sets)."""
        d = int(rng.integers(1, self.max_depth + 1)) if depth is None else depth
        ops = tuple(OPS[i] for i in rng.integers(0, len(OPS), size=d))
        nums = tuple(int(x) for x in rng.integers(1, 10, size=d + 1))
        return ToyProblem(ops, nums)


def magnitude_bucket(value: int) -> int:
    a = abs(value)
    for i, edge in enumerate(MAGNITUDE_EDGES):
        if a < edge:
            return i
    return len(MAGNITUDE_EDGES)


N_MAG = len(MAGNITUDE_EDGES) + 1


def difficulty_row(problem: ToyProblem, max_depth: int) -> int:
    """Executor tables are conditioned on (depth, magnitude of the answer)."""
    return (min(problem.depth, max_depth) - 1) * N_MAG + magnitude_bucket(problem.value())


# ---------------------------------------------------------------------------
# Parameters


@dataclass(frozen=True)
class ToyConfig:
    """Shape of the base policy both agents start from.

    Accuracies are per arithmetic step, indexed by the problem's depth and
    answer magnitude, so both paths compound over the ``depth`` steps; the
    code path's per-step accuracy is higher. Wrong values spread over the
    offsets with ``error_weights``.
    """

    max_depth: int = 4
    depth_probs: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    op_probs: tuple[float, ...] = (0.4, 0.4, 0.2)
    # per-operator accuracies; a depth-d problem needs d correct steps
    direct_accuracy_by_depth: tuple[float, ...] = (0.97, 0.95, 0.93, 0.91)
    direct_accuracy_by_magnitude: tuple[float, ...] = (1.0, 0.95, 0.88, 0.82)
    code_accuracy_by_depth: tuple[float, ...] = (0.99, 0.99, 0.98, 0.98)
    code_accuracy_by_magnitude: tuple[float, ...] = (1.0, 0.99, 0.98, 0.97)
    tool_preference_by_depth: tuple[float, ...] = (0.05, 0.08, 0.12, 0.16)
    tool_preference_by_magnitude: tuple[float, ...] = (0.0, 0.02, 0.04, 0.06)
    error_weights: tuple[float, ...] = (0.2, 0.2, 0.15, 0.15, 0.15, 0.15)


TABLES = ("cur_depth", "cur_op", "cur_operand", "exec_action", "exec_direct", "exec_code")
CURRICULUM_TABLES = TABLES[:3]
EXECUTOR_TABLES = TABLES[3:]


def _offset_logits(p_exact: float, error_weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(error_weights, dtype=float)
    probs = np.concatenate([[p_exact], (1.0 - p_exact) * w / w.sum()])
    return np.log(probs)


def base_params(cfg: ToyConfig = ToyConfig()) -> dict[str, np.ndarray]:
    """Initial logit tables. Each row is a categorical distribution."""
    D = cfg.max_depth
    n_rows = D * N_MAG
    action = np.zeros((n_rows, 2))
    direct = np.zeros((n_rows, len(OFFSETS)))
    code = np.zeros((n_rows, len(OFFSETS)))
    for d in range(D):
        for m in range(N_MAG):
            r = d * N_MAG + m
            t = float(np.clip(cfg.tool_preference_by_depth[d] + cfg.tool_preference_by_magnitude[m], 0.01, 0.99))
            action[r] = np.log([1.0 - t, t])
            direct[r] = _offset_logits(cfg.direct_accuracy_by_depth[d] * cfg.direct_accuracy_by_magnitude[m],
                                       cfg.error_weights)
            code[r] = _offset_logits(cfg.code_accuracy_by_depth[d] * cfg.code_accuracy_by_magnitude[m],
                                     cfg.error_weights)
    return {
        "cur_depth": np.log(np.asarray(cfg.depth_probs, dtype=float))[None, :],
        "cur_op": np.log(np.asarray(cfg.op_probs, dtype=float))[None, :],
        "cur_operand": np.zeros((1, len(DIGITS))),
        "exec_action": action,
        "exec_direct": direct,
        "exec_code": code,
    }


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}


def params_to_record(params: dict[str, np.ndarray]) -> dict:
    return {k: v.tolist() for k, v in sorted(params.items())}


def params_from_record(rec: dict) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=float) for k, v in rec.items()}


# ---------------------------------------------------------------------------
# Turn programs, run either to sample or to decode given tokens


class _Budget(Exception):
    pass


class _SampleIO:
    def __init__(self, logp: Callable[[str, int], np.ndarray], rng: np.random.Generator, max_tokens: int):
        self.logp = logp
        self.rng = rng
        self.max_tokens = max_tokens
        self.tokens: list[str] = []
        self.logprobs: list[float] = []

    def _push(self, tok: str, lp: float):
        if len(self.tokens) >= self.max_tokens:
            raise _Budget
        self.tokens.append(tok)
        self.logprobs.append(lp)

    def emit(self, text: str) -> None:
        self._push(text, 0.0)

    def choose(self, table: str, row: int, options: Sequence[str]) -> int:
        if len(self.tokens) >= self.max_tokens:
            raise _Budget
        lp = self.logp(table, row)
        cdf = np.cumsum(np.exp(lp))
        idx = int(min(np.searchsorted(cdf, self.rng.random() * cdf[-1], side="right"), len(lp) - 1))
        self._push(options[idx], float(lp[idx]))
        return idx


class _DecodeIO:
    """Replays a turn program against given tokens, recording the choices."""

    def __init__(self, tokens: Sequence[str], logp: Optional[Callable[[str, int], np.ndarray]] = None):
        self.tokens = list(tokens)
        self.pos = 0
        self.logp = logp
        self.logprobs: list[float] = []
        self.choices: list[tuple[int, str, int, int]] = []

    def _next(self) -> str:
        if self.pos >= len(self.tokens):
            raise _Budget  # sequence was cut short by a token limit
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def emit(self, text: str) -> None:
        tok = self._next()
        if tok != text:
            raise UnreachableSequence(f"expected {text!r} at token {self.pos - 1}, got {tok!r}")
        self.logprobs.append(0.0)

    def choose(self, table: str, row: int, options: Sequence[str]) -> int:
        tok = self._next()
        try:
            idx = list(options).index(tok)
        except ValueError:
            raise UnreachableSequence(f"token {tok!r} is not an option of {table}[{row}]") from None
        self.choices.append((self.pos - 1, table, row, idx))
        self.logprobs.append(float(self.logp(table, row)[idx]) if self.logp else 0.0)
        return idx


class ToyPolicy(Generator):
    """Tabular softmax policy answering both curriculum and executor contexts."""

    capabilities = Capabilities(trainable=True, stop_sequences=True)

    def __init__(self, params: Optional[dict[str, np.ndarray]] = None,
                 grammar: ToyTaskGrammar = ToyTaskGrammar(), curriculum_prompt: Optional[str] = None):
        self.grammar = grammar
        self.curriculum_prompt = (curriculum_prompt if curriculum_prompt is not None
                                  else load_prompt("curriculum")).strip()
        self._lock = threading.Lock()
        self._set(copy_params(params if params is not None else base_params()))

    # -- parameters ---------------------------------------------------------

    def _set(self, params: dict[str, np.ndarray]) -> None:
        logp = {k: log_softmax(v) for k, v in params.items()}
        with self._lock:
            self._params = params
            self._logp = logp

    @property
    def params(self) -> dict[str, np.ndarray]:
        return copy_params(self._params)

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self._set(copy_params(params))

    def snapshot(self) -> dict[str, np.ndarray]:
        return self.params

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.set_params(snap)

    def table_logprobs(self) -> dict[str, np.ndarray]:
        return self._logp

    # -- context handling ---------------------------------------------------

    def _parse_context(self, context: str):
        matches = list(_PROBLEM_RE.finditer(context))
        if matches:
            m = matches[-1]
            problem = self.grammar.parse_expression(m.group(1))
            if problem is None:
                raise UnknownContext("question is not a toy arithmetic expression")
            return "executor", problem, context[m.end():]
        if context.strip() == self.curriculum_prompt:
            return "curriculum", None, ""
        raise UnknownContext("context matches neither the curriculum nor the executor template")

    def _run(self, io, context: str) -> None:
        role, problem, history = self._parse_context(context)
        if role == "curriculum":
            self._curriculum_turn(io)
        else:
            self._executor_turn(io, problem, history)

    def _curriculum_turn(self, io) -> None:
        D = self.grammar.max_depth
        d = 1 + io.choose("cur_depth", 0, [f"<question>{QUESTION_PREFIX} " + "( " * k for k in range(D)])
        digits = [str(x) for x in DIGITS]
        operands = [DIGITS[io.choose("cur_operand", 0, digits)]]
        ops = []
        for i in range(1, d + 1):
            ops.append(OPS[io.choose("cur_op", 0, [f" {o} " for o in OPS])])
            operands.append(DIGITS[io.choose("cur_operand", 0, digits)])
            if i < d:
                io.emit(" )")
        io.emit(" .</question>\n\\boxed{")
        io.emit(str(ToyProblem(tuple(ops), tuple(operands)).value()))
        io.emit("}")

    def _code_step(self, io, row: int, problem: ToyProblem, step: int, left) -> None:
        op, a = problem.ops[step - 1], problem.operands[step]
        io.emit(CODE_OPEN)
        io.choose("exec_code", row, [f"print({left} {op} {a + off})" for off in OFFSETS])
        io.emit(CODE_CLOSE)

    def _direct(self, io, row: int, problem: ToyProblem) -> None:
        left = problem.operands[0]
        for op, a in zip(problem.ops, problem.operands[1:]):
            io.emit(f" {left} {op} {a} =")
            step = ToyProblem((op,), (left, a)).value()
            left = step + OFFSETS[io.choose("exec_direct", row, [f" {step + off}." for off in OFFSETS])]
        io.emit(ANSWER_PREFIX)
        io.emit(str(left))
        io.emit("}")

    def _executor_turn(self, io, problem: ToyProblem, history: str) -> None:
        row = difficulty_row(problem, self.grammar.max_depth)
        if ACTION_TEXTS[1] not in history:
            if io.choose("exec_action", row, ACTION_TEXTS) == 0:
                self._direct(io, row, problem)
            else:
                self._code_step(io, row, problem, 1, problem.operands[0])
            return
        outputs = _OUTPUT_RE.findall(history)
        try:
            last = int(outputs[-1].strip())
        except (IndexError, ValueError):
            io.emit(FALLBACK_TEXT)
            self._direct(io, row, problem)
            return
        if len(outputs) < problem.depth:
            io.emit(NEXT_STEP)
            self._code_step(io, row, problem, len(outputs) + 1, last)
        else:
            io.emit(FINAL_PREFIX)
            io.emit(str(last))
            io.emit("}")

    # -- Generator interface ------------------------------------------------

    def generate(self, context: str, stop: Sequence[str] = (), max_tokens: int = 1 << 30,
                 seed: int = 0) -> Generation:
        logp = self._logp
        io = _SampleIO(lambda t, r: logp[t][r], np.random.default_rng(seed), max_tokens)
        finish = "stop"
        try:
            self._run(io, context)
        except _Budget:
            finish = "length"
        return Generation(tuple(io.tokens), tuple(io.logprobs), finish)

    def decode(self, context: str, tokens: Sequence[str], with_logprobs: bool = True) -> _DecodeIO:
        logp = self._logp
        io = _DecodeIO(tokens, (lambda t, r: logp[t][r]) if with_logprobs else None)
        try:
            self._run(io, context)
        except _Budget:
            pass
        if io.pos != len(io.tokens):
            raise UnreachableSequence(f"{len(io.tokens) - io.pos} trailing tokens after the turn ends")
        return io

    def logprob_of(self, context: str, tokens: Sequence[str]) -> np.ndarray:
        return np.asarray(self.decode(context, tokens).logprobs)

    def logprob_grad(self, context: str, tokens: Sequence[str]) -> dict[str, np.ndarray]:
        """Gradient of sum(logprob_of(context, tokens)) w.r.t. every logit table."""
        io = self.decode(context, tokens, with_logprobs=False)
        probs = {k: np.exp(v) for k, v in self._logp.items()}
        grad = {k: np.zeros_like(v) for k, v in self._params.items()}
        for _, table, row, idx in io.choices:
            grad[table][row] -= probs[table][row]
            grad[table][row, idx] += 1.0
        return grad


def toy_generate(params, context: str, seed: int, max_tokens: int = 1 << 30) -> Generation:
    return ToyPolicy(params).generate(context, (), max_tokens, seed)


def toy_logprob_grad(params, context: str, tokens: Sequence[str]) -> dict[str, np.ndarray]:
    return ToyPolicy(params).logprob_grad(context, tokens)


# ---------------------------------------------------------------------------
# Batched scoring for training


def _turns(trajectory: Trajectory, prompt: str, render) -> Iterable[tuple[str, list[str], int]]:
    """Yield (context, tokens, flat offset) for each generation turn of a trajectory.

    A turn is a maximal run of policy segments; the context is the prompt plus
    the rendering of every earlier segment.
    """
    context = prompt
    offset = 0
    turn_tokens: list[str] = []
    turn_ctx = context
    for seg in trajectory.segments:
        if seg.kind == TOOL_OUTPUT:
            if turn_tokens:
                yield turn_ctx, turn_tokens, offset - len(turn_tokens)
                turn_tokens = []
            context += render(seg)
            turn_ctx = context
            continue
        if seg.tokens is None:
            raise UnreachableSequence("segment has no token strings to re-score")
        turn_tokens.extend(seg.tokens)
        offset += len(seg.tokens)
        context += render(seg)
    if turn_tokens:
        yield turn_ctx, turn_tokens, offset - len(turn_tokens)


@dataclass
class ChoiceIndex:
    """Where the decisions sit among the flattened policy tokens of a batch."""

    n_tokens: int
    pos: dict[str, np.ndarray] = field(default_factory=dict)
    row: dict[str, np.ndarray] = field(default_factory=dict)
    col: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, policy: ToyPolicy, items: Sequence[tuple[str, Trajectory]], render) -> "ChoiceIndex":
        acc: dict[str, list] = {t: [] for t in TABLES}
        base = 0
        for prompt, traj in items:
            for ctx, toks, off in _turns(traj, prompt, render):
                io = policy.decode(ctx, toks, with_logprobs=False)
                for p, table, row, col in io.choices:
                    acc[table].append((base + off + p, row, col))
            base += traj.n_policy_tokens
        idx = cls(n_tokens=base)
        for t, rows in acc.items():
            arr = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
            idx.pos[t], idx.row[t], idx.col[t] = arr[:, 0], arr[:, 1], arr[:, 2]
        return idx

    def logprobs(self, params: dict[str, np.ndarray]) -> np.ndarray:
        out = np.zeros(self.n_tokens)
        for t in self.pos:
            if len(self.pos[t]):
                out[self.pos[t]] = log_softmax(params[t])[self.row[t], self.col[t]]
        return out

    def backprop(self, params: dict[str, np.ndarray], upstream: np.ndarray,
                 tables: Optional[Iterable[str]] = None) -> dict[str, np.ndarray]:
        """Chain d loss / d token-logprob through the softmax tables."""
        grads = {}
        for t in (tables if tables is not None else params.keys()):
            g = np.zeros_like(params[t])
            if t in self.pos and len(self.pos[t]):
                u = upstream[self.pos[t]]
                np.add.at(g, (self.row[t], self.col[t]), u)
                row_sum = np.bincount(self.row[t], weights=u, minlength=g.shape[0])
                g -= np.exp(log_softmax(params[t])) * row_sum[:, None]
            grads[t] = g
        return grads
