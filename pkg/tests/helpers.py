from __future__ import annotations

import threading
import numpy as np

from coevolve.generators.base import Capabilities, Generation, Generator, GeneratorFailure
from coevolve.generators.toy import ToyPolicy, base_params
from coevolve.optim import OptimConfig, normalize_advantages
from coevolve.prompts import executor_context
from coevolve.rollout import RolloutRunner
from coevolve.sandbox import ExecutionResult, mock_pool
from coevolve.types import BatchEntry, Task, UpdateBatch


# acceptance criterion number -> (passed, detail), printed in the terminal summary
CRITERIA: dict[int, tuple[bool, str]] = {}


def report(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


class ScriptedGenerator(Generator):
    """Returns a fixed turn text per call; ``script`` is a list (last entry repeats) or a function of the turn."""

    capabilities = Capabilities(trainable=False, stop_sequences=True)

    def __init__(self, script, fail_on: int | None = None):
        self.script = script
        self.contexts: list[str] = []
        self.fail_on = fail_on
        self._lock = threading.Lock()

    def generate(self, context, stop, max_tokens, seed):
        with self._lock:
            turn = len(self.contexts)
            self.contexts.append(context)
        if self.fail_on is not None and turn == self.fail_on:
            raise GeneratorFailure("scripted failure")
        text = self.script(turn) if callable(self.script) else self.script[min(turn, len(self.script) - 1)]
        toks = tuple(text)  # one character per token keeps segment spans exact
        return Generation(toks[:max_tokens], tuple(-0.5 for _ in toks[:max_tokens]),
                          "stop" if len(toks) <= max_tokens else "length")


class FailingWorker:
    def __init__(self, status="transport_failure", output="connection refused"):
        self.status = status
        self.output = output
        self.calls = 0

    def execute(self, req):
        self.calls += 1
        return ExecutionResult(self.status, self.output, 0, "bad")


def random_params(rng: np.random.Generator, scale: float = 1.0) -> dict:
    base = base_params()
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in base.items()}


def toy_batch(rng: np.random.Generator, policy: ToyPolicy, n_tasks: int = 3, group: int = 4,
              cfg: OptimConfig = OptimConfig(), force_degenerate: bool = False):
    """Executor rollouts on random toy tasks, packaged as an UpdateBatch with prompts."""
    from coevolve.generators.toy import ToyTaskGrammar
    grammar = ToyTaskGrammar()
    runner = RolloutRunner(policy, mock_pool(2))
    entries, items = [], []
    for g in range(n_tasks):
        prob = grammar.sample(rng)
        task = Task(f"t{g}", "", prob.question(), str(prob.value()))
        trajs = runner.run(task, group, int(rng.integers(1 << 30)))
        rewards = [float(rng.integers(0, 2)) for _ in trajs]
        if force_degenerate and g == 0:
            rewards = [1.0] * len(trajs)
        adv = normalize_advantages(rewards, cfg.epsilon_norm)
        p_hat = float(rng.uniform())
        s = float(rng.uniform(0.2, 1.0))
        eh = float(rng.uniform(cfg.epsilon_high_min, cfg.epsilon_high_max))
        for tr, r, a in zip(trajs, rewards, adv):
            entries.append(BatchEntry(tr, r, float(a), float(s * a), eh, cfg.epsilon_low, p_hat, g))
            items.append((executor_context(task.question), tr))
    return UpdateBatch(tuple(entries)), items
