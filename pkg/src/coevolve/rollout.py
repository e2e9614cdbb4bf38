"""Multi-turn tool-integrated rollouts.

Generation pauses at each complete code block, the body runs in the sandbox,
the result goes back into the context inside an output fence, and generation
resumes. A trajectory ends at the first boxed answer outside code, or
truncated when a limit trips.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .generators.base import Generation, Generator, GeneratorFailure
from .prompts import executor_context
from .sandbox import OK, ExecutionRequest, ExecutionResult
from .seeding import derive_seed
from .types import POLICY_TEXT, TOOL_CALL, TOOL_OUTPUT, Segment, Task, Trajectory, extract_final_answer

log = logging.getLogger(__name__)

NO_OUTPUT = "(no output)"

POLICY_CHUNK = "policy_chunk"
TOOL_CALL_DETECTED = "tool_call_detected"
TOOL_RESULT_INJECTED = "tool_result_injected"
FINAL_ANSWER = "final_answer"
TRUNCATED = "truncated"


@dataclass(frozen=True)
class RolloutLimits:
    max_turns: int = 4
    max_total_tokens: int = 4096
    per_call_timeout_ms: int = 5000
    max_answer_wait_tokens: int = 1024  # token cap of a single generate call

    def __post_init__(self):
        for name in ("max_turns", "max_total_tokens", "per_call_timeout_ms", "max_answer_wait_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Fences:
    fence: str = "```"
    code_tag: str = "python"
    output_tag: str = "output"

    @property
    def code_open(self) -> str:
        return self.fence + self.code_tag

    @property
    def stop(self) -> str:
        # a bare fence on its own line; the opening fence carries a tag so never matches
        return "\n" + self.fence + "\n"

    def render_output(self, text: str) -> str:
        return f"{self.fence}{self.output_tag}\n{text}\n{self.fence}\n"

    def code_block_re(self) -> re.Pattern:
        f = re.escape(self.fence)
        return re.compile(f + re.escape(self.code_tag) + r"[ \t]*\n(.*?)\n?" + f + r"[ \t]*\n?", re.S)

    def any_block_re(self) -> re.Pattern:
        f = re.escape(self.fence)
        return re.compile(f + r".*?(?:" + f + r"|\Z)", re.S)


DEFAULT_FENCES = Fences()


@dataclass(frozen=True)
class RolloutEvent:
    kind: str
    payload: object = None


def detect_tool_call(buffer: str, start: int = 0, fences: Fences = DEFAULT_FENCES) -> Optional[tuple[str, tuple[int, int]]]:
    """First complete code-tagged block at or after ``start``: (body, (begin, end))."""
    m = fences.code_block_re().search(buffer, start)
    if m is None:
        return None
    return m.group(1), (m.start(), m.end())


def answer_outside_code(text: str, fences: Fences = DEFAULT_FENCES) -> Optional[str]:
    """Last boxed expression with every fenced region (closed or not) masked out."""
    masked = fences.any_block_re().sub(lambda m: " " * len(m.group(0)), text)
    return extract_final_answer(masked)


def render_segment(seg: Segment, fences: Fences = DEFAULT_FENCES) -> str:
    """The exact text a segment contributed to the context."""
    if seg.kind == TOOL_OUTPUT:
        return fences.render_output(seg.text)
    if seg.tokens is not None:
        return "".join(seg.tokens)
    if seg.kind == TOOL_CALL:
        return f"{fences.code_open}\n{seg.text}\n{fences.fence}\n"
    return seg.text


def _policy_segment(kind: str, tokens: Sequence[str], logprobs: Optional[Sequence[float]],
                    text: Optional[str] = None) -> Segment:
    # tool_call text is the code body; the fenced tokens stay on the segment
    lps = tuple(logprobs) if logprobs is not None else tuple(0.0 for _ in tokens)
    return Segment(kind, "".join(tokens) if text is None else text, lps, tuple(tokens))


def _split_at(gen: Generation, cut: int) -> int:
    """Index of the first token starting at or after character offset ``cut``."""
    pos = 0
    for i, tok in enumerate(gen.tokens):
        if pos >= cut:
            return i
        pos += len(tok)
    return len(gen.tokens)


def _execute(backend, code: str, timeout_ms: int, request_id: str) -> ExecutionResult:
    req = ExecutionRequest(code=code, timeout_ms=timeout_ms, request_id=request_id)
    try:
        if hasattr(backend, "dispatch"):
            return backend.dispatch(req)
        return backend.execute(req)
    except Exception as exc:  # surfaced to the policy as an observation
        return ExecutionResult("transport_failure", f"SandboxUnavailable: {exc}", 0, "")


def observation(result: ExecutionResult) -> str:
    if result.status == OK:
        return result.output if result.output.strip() else NO_OUTPUT
    return result.output or result.status


def rollout_one(prompt: str, generator: Generator, backend, limits: RolloutLimits = RolloutLimits(),
                seed: int = 0, task_id: str = "task", sample: int = 0,
                fences: Fences = DEFAULT_FENCES) -> tuple[Trajectory, list[RolloutEvent]]:
    """Run one trajectory from ``prompt``; returns it with its event trace."""
    context = prompt
    segments: list[Segment] = []
    events: list[RolloutEvent] = []
    n_tools = 0
    used = 0
    turn = 0

    def finish(answer: Optional[str]):
        if answer is None:
            events.append(RolloutEvent(TRUNCATED, None))
        else:
            events.append(RolloutEvent(FINAL_ANSWER, answer))
        return Trajectory(task_id, tuple(segments), answer, answer is None, n_tools), events

    while True:
        budget = min(limits.max_answer_wait_tokens, limits.max_total_tokens - used)
        if budget <= 0:
            return finish(None)
        try:
            gen = generator.generate(context, (fences.stop,), budget, derive_seed(seed, task_id, sample, turn))
        except GeneratorFailure as exc:
            log.error("generation failed for %s/%d: %s", task_id, sample, exc)
            return finish(None)
        turn += 1
        tokens = list(gen.tokens[:budget])
        logprobs = list(gen.logprobs[:budget]) if gen.logprobs is not None else None
        gen = Generation(tuple(tokens), None if logprobs is None else tuple(logprobs), gen.finish_reason)
        text = gen.text
        used += len(tokens)

        block = detect_tool_call(text, 0, fences)
        before = text if block is None else text[:block[1][0]]
        answer = answer_outside_code(before, fences)
        if answer is not None:
            # everything up to the token that closes the answer; later text is dropped
            end = _answer_end(before, fences)
            k = _split_at(gen, end)
            segments.append(_policy_segment(POLICY_TEXT, tokens[:k], None if logprobs is None else logprobs[:k]))
            events.append(RolloutEvent(POLICY_CHUNK, segments[-1]))
            return finish(answer)
        if block is None:
            if tokens:
                segments.append(_policy_segment(POLICY_TEXT, tokens, logprobs))
                events.append(RolloutEvent(POLICY_CHUNK, segments[-1]))
            return finish(None)

        code, (b0, b1) = block
        turn_start = len(segments)
        k0 = _split_at(gen, b0)
        k1 = _split_at(gen, b1)
        if k0 > 0:
            segments.append(_policy_segment(POLICY_TEXT, tokens[:k0], None if logprobs is None else logprobs[:k0]))
            events.append(RolloutEvent(POLICY_CHUNK, segments[-1]))
        call = _policy_segment(TOOL_CALL, tokens[k0:k1], None if logprobs is None else logprobs[k0:k1], code)
        segments.append(call)
        events.append(RolloutEvent(TOOL_CALL_DETECTED, call))
        if n_tools >= limits.max_turns:
            return finish(None)
        result = _execute(backend, code, limits.per_call_timeout_ms, f"{task_id}/{sample}/{n_tools}")
        out = Segment(TOOL_OUTPUT, observation(result))
        segments.append(out)
        n_tools += 1
        events.append(RolloutEvent(TOOL_RESULT_INJECTED, out))
        context += "".join(render_segment(s, fences) for s in segments[turn_start:])


def _answer_end(text: str, fences: Fences) -> int:
    masked = fences.any_block_re().sub(lambda m: " " * len(m.group(0)), text)
    i = masked.rfind("\\boxed{")
    depth = 0
    for j in range(i + len("\\boxed{") - 1, len(masked)):
        if masked[j] == "{":
            depth += 1
        elif masked[j] == "}":
            depth -= 1
            if depth == 0:
                return j + 1
    return len(text)


@dataclass
class RolloutRunner:
    """Samples k trajectories per task, optionally on a thread pool."""

    generator: Generator
    backend: object
    limits: RolloutLimits = field(default_factory=RolloutLimits)
    fences: Fences = DEFAULT_FENCES
    template: Optional[str] = None
    concurrency: int = 1
    counter: int = 0  # audit: rollouts performed

    def context(self, task: Task) -> str:
        return executor_context(task.question or task.prompt_text, self.template)

    def run(self, task: Task, k: int, seed: int, collect: Optional[list] = None) -> list[Trajectory]:
        if k < 1:
            raise ValueError("k must be >= 1")
        prompt = self.context(task)

        def one(i: int):
            return rollout_one(prompt, self.generator, self.backend, self.limits, seed, task.id, i, self.fences)

        if self.concurrency > 1 and k > 1:
            with ThreadPoolExecutor(min(self.concurrency, k)) as ex:
                results = list(ex.map(one, range(k)))
        else:
            results = [one(i) for i in range(k)]
        self.counter += k
        if collect is not None:
            collect.extend(ev for _, ev in results)
        return [t for t, _ in results]


def rollout_task(task: Task, generator: Generator, executor_backend, limits: RolloutLimits = RolloutLimits(),
                 k: int = 10, seed: int = 0, concurrency: int = 1, fences: Fences = DEFAULT_FENCES,
                 template: Optional[str] = None) -> list[Trajectory]:
    return RolloutRunner(generator, executor_backend, limits, fences, template, concurrency).run(task, k, seed)


def trajectory_context(prompt: str, trajectory: Trajectory, fences: Fences = DEFAULT_FENCES) -> str:
    return prompt + "".join(render_segment(s, fences) for s in trajectory.segments)


def render_fn(fences: Fences = DEFAULT_FENCES) -> Callable[[Segment], str]:
    return lambda seg: render_segment(seg, fences)
