"""Co-evolution loop: alternate curriculum and executor training for T iterations.

Everything a run produces lands in one directory with no timestamps, so two
runs with the same config and seed are byte-identical (toy generator plus
mock sandbox). Layout::

    config.yaml                 resolved configuration
    state.json                  last completed iteration
    params/{curriculum,executor}_t{t}.json
    datasets/D_{t}.jsonl        frontier tasks with p_hat and pseudo-label
    rewards/curriculum_t{t}.jsonl
    clip/executor_t{t}.json     last executor batch, for clip statistics
    metrics.csv                 one row per optimizer epoch
    events.jsonl                phase audit trail
    heldout.csv                 executor accuracy against exact answers
    report.csv                  difficulty evolution under the iteration-1 executor
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from .consistency import FrontierBand, FrontierEntry, assign_terminal_rewards, filter_frontier, majority_vote
from .generators.remote import RemoteConfig, RemoteGenerator
from .generators.toy import (
    CURRICULUM_TABLES,
    EXECUTOR_TABLES,
    ChoiceIndex,
    ToyConfig,
    ToyPolicy,
    ToyTaskGrammar,
    base_params,
    params_from_record,
    params_to_record,
)
from .optim import (
    N_CLIP_BINS,
    MetricsWriter,
    OptimConfig,
    TokenLayout,
    adpo_loss,
    ambiguity_scale,
    clip_histogram,
    dynamic_epsilon_high,
    grpo_loss,
    normalize_advantages,
    sgd_step,
)
from .prompts import executor_context, load_prompt
from .rewards import CurriculumRewardConfig, score_batch
from .rollout import DEFAULT_FENCES, RolloutLimits, RolloutRunner, render_fn
from .sandbox import SubprocessConfig, SubprocessWorker, WorkerPool, MockWorker
from .seeding import derive_seed, stream
from .types import (
    POLICY_TEXT,
    BatchEntry,
    Segment,
    Task,
    Trajectory,
    UpdateBatch,
    answers_match,
    append_jsonl,
    read_jsonl,
    task_from_output,
    write_jsonl,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class EmptyFrontier(RuntimeError):
    pass


class CurriculumDegenerate(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class SandboxSettings:
    kind: str = "mock"  # mock | subprocess
    n_workers: int = 4
    failure_threshold: int = 3
    cooldown_s: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    iterations: int = 3
    samples_k: int = 10
    curriculum_group: int = 4
    executor_group: int = 16
    curriculum_batch: int = 128
    executor_batch: int = 128
    curriculum_steps: int = 5
    executor_steps: int = 40
    pool_size: Optional[int] = None  # default 4 x executor_batch
    ppo_epochs: int = 1  # optimizer passes over each sampled batch
    curriculum_learning_rate: float = 1e-6
    band_lower: float = 0.3
    band_upper: float = 0.8
    heldout_size: int = 400
    heldout_samples: int = 2
    concurrency: int = 1
    generator: str = "toy"  # toy | remote
    rewards: CurriculumRewardConfig = CurriculumRewardConfig()
    optim: OptimConfig = OptimConfig()
    limits: RolloutLimits = RolloutLimits()
    sandbox: SandboxSettings = SandboxSettings()
    toy: ToyConfig = ToyConfig()
    remote: RemoteConfig = RemoteConfig()

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.samples_k < 2:
            raise ConfigError("samples_k must be >= 2 so a majority is meaningful")
        for name in ("curriculum_steps", "executor_steps", "curriculum_group", "executor_group",
                     "curriculum_batch", "executor_batch", "ppo_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.curriculum_batch % self.curriculum_group:
            raise ConfigError("curriculum_batch must be a multiple of curriculum_group")
        FrontierBand(self.band_lower, self.band_upper)

    @property
    def pool(self) -> int:
        return self.pool_size if self.pool_size is not None else 4 * self.executor_batch

    @property
    def band(self) -> FrontierBand:
        return FrontierBand(self.band_lower, self.band_upper)


# Small enough to finish in seconds per iteration on one core, with step sizes
# large enough that the tabular toy visibly moves within a few steps.
DESK_OVERRIDES = {
    "curriculum_batch": 32,
    "executor_batch": 16,
    "executor_steps": 4,
    "ppo_epochs": 4,
    "curriculum_learning_rate": 2.0,
    "heldout_size": 300,
    "optim": {"learning_rate": 60.0},
}


def _build(cls, data: dict):
    kwargs = {}
    names = {f.name: f for f in fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {cls.__name__}.{key}")
        sub = names[key].default
        if is_dataclass(sub) and isinstance(value, dict):
            kwargs[key] = _build(type(sub), value)
        elif isinstance(sub, tuple) and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def config_to_dict(cfg: RunConfig) -> dict:
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, (tuple, list)):
            return [conv(v) for v in x]
        return x
    return conv(asdict(cfg))


def config_from_dict(data: dict, preset: Optional[str] = None) -> RunConfig:
    base = {}
    if preset == "desk":
        base = DESK_OVERRIDES
    elif preset not in (None, "full"):
        raise ConfigError(f"unknown preset {preset!r}")
    return _build(RunConfig, _merge(base, data or {}))


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (), preset: Optional[str] = None,
                **fixed) -> RunConfig:
    """Read YAML, apply ``key.sub=value`` overrides, then keyword fixes."""
    data = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        preset = data.pop("preset", preset) if preset is None else preset
        data.pop("preset", None)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    data.update({k: v for k, v in fixed.items() if v is not None})
    return config_from_dict(data, preset)


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


# ---------------------------------------------------------------------------
# Run state and persistence


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(path, records)


def _read_jsonl(path: Path) -> list[dict]:
    return list(read_jsonl(path))


@dataclass
class RunState:
    iteration: int
    curriculum: dict
    executor: dict
    run_dir: Path
    datasets: list[str] = field(default_factory=list)

    def save(self) -> None:
        _write_json(self.run_dir / "params" / f"curriculum_t{self.iteration}.json", params_to_record(self.curriculum))
        _write_json(self.run_dir / "params" / f"executor_t{self.iteration}.json", params_to_record(self.executor))
        _write_json(self.run_dir / "state.json", {"iteration": self.iteration, "datasets": self.datasets})

    @classmethod
    def load(cls, run_dir) -> "RunState":
        run_dir = Path(run_dir)
        st = json.loads((run_dir / "state.json").read_text(encoding="utf-8"))
        t = st["iteration"]

        def params(role):
            return params_from_record(json.loads((run_dir / "params" / f"{role}_t{t}.json").read_text()))

        return cls(t, params("curriculum"), params("executor"), run_dir, list(st.get("datasets", [])))


# ---------------------------------------------------------------------------
# Components


def make_backend(cfg: RunConfig) -> WorkerPool:
    s = cfg.sandbox
    if s.kind == "mock":
        workers = [MockWorker(f"mock-{i}") for i in range(s.n_workers)]
    elif s.kind == "subprocess":
        workers = [SubprocessWorker(SubprocessConfig(), f"proc-{i}") for i in range(s.n_workers)]
    else:
        raise ConfigError(f"unknown sandbox kind {s.kind!r}")
    return WorkerPool(workers, s.failure_threshold, s.cooldown_s, max_concurrency=max(cfg.concurrency, 1))


def make_generator(cfg: RunConfig, params: Optional[dict] = None):
    if cfg.generator == "toy":
        return ToyPolicy(params if params is not None else base_params(cfg.toy),
                         ToyTaskGrammar(cfg.toy.max_depth))
    if cfg.generator == "remote":
        return RemoteGenerator(cfg.remote)
    raise ConfigError(f"unknown generator {cfg.generator!r}")


def sample_curriculum(policy: ToyPolicy, n: int, seed: int, iteration: int, tag: str,
                      max_tokens: int = 1024) -> list[tuple[Task, Trajectory]]:
    """n curriculum generations, each parsed into a Task and kept as a one-segment trajectory."""
    prompt = load_prompt("curriculum")
    out = []
    for j in range(n):
        gen = policy.generate(prompt, (), max_tokens, derive_seed(seed, tag, j))
        task = task_from_output(gen.text, f"{tag}-{j}", iteration)
        seg = Segment(POLICY_TEXT, gen.text, gen.logprobs, gen.tokens)
        answer = task.declared_answer
        out.append((task, Trajectory(task.id, (seg,), answer, answer is None, 0)))
    return out


def _group_advantages(rewards: Sequence[float], group: int, eps: float) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    return np.concatenate([normalize_advantages(r[i:i + group], eps) for i in range(0, len(r), group)])


def _optimize(policy: ToyPolicy, batch: UpdateBatch, items, tables, cfg_optim: OptimConfig, lr: float,
              ref_params: dict, epochs: int, loss_fn, writer: MetricsWriter, phase: str, iteration: int,
              step: int) -> tuple[np.ndarray, dict]:
    """Several clipped-surrogate passes over one sampled batch; returns the up-clip histogram."""
    index = ChoiceIndex.build(policy, items, render_fn(DEFAULT_FENCES))
    layout = TokenLayout.from_batch(batch)
    old = np.concatenate([np.asarray(e.trajectory.policy_logprobs()) for e in batch.entries]) \
        if layout.n_tokens else np.zeros(0)
    ref = index.logprobs(ref_params)
    params = policy.params
    hist = np.zeros(N_CLIP_BINS, dtype=np.int64)
    last = {}
    for epoch in range(epochs):
        new = index.logprobs(params)
        res = loss_fn(batch, new, old, ref, cfg_optim, layout=layout)
        h = clip_histogram(old, res.up_clipped)
        hist += h
        writer.write(phase, iteration, step, epoch, res, h)
        grads = index.backprop(params, res.grad, tables)
        params = sgd_step(params, grads, lr, cfg_optim.weight_decay)
        last = {"new": new.tolist(), "loss": res.loss}
    policy.set_params(params)
    last["old"] = old.tolist()
    return hist, last


# ---------------------------------------------------------------------------
# Phases


@dataclass
class Phase:
    cfg: RunConfig
    run_dir: Path
    writer: MetricsWriter
    backend: Any

    def event(self, **rec) -> None:
        append_jsonl(self.run_dir / "events.jsonl", [rec])

    def runner(self, policy) -> RolloutRunner:
        return RolloutRunner(policy, self.backend, self.cfg.limits, DEFAULT_FENCES, None, self.cfg.concurrency)


def curriculum_phase(state: RunState, cfg: RunConfig, ph: Phase) -> RunState:
    """Train the curriculum policy against the frozen executor from the previous iteration."""
    t = state.iteration + 1
    curriculum = make_generator(cfg, state.curriculum)
    executor = make_generator(cfg, state.executor)
    ref = curriculum.params
    runner = ph.runner(executor)
    rewards_path = ph.run_dir / "rewards" / f"curriculum_t{t}.jsonl"
    _write_jsonl(rewards_path, [])
    bad_streak = 0
    for step in range(cfg.curriculum_steps):
        samples = sample_curriculum(curriculum, cfg.curriculum_batch, cfg.seed, t, f"cur-t{t}-s{step}")
        tasks = [s[0] for s in samples]
        rollouts = []
        before = runner.counter
        for task in tasks:
            rollouts.append(runner.run(task, cfg.samples_k, derive_seed(cfg.seed, "cur-rollout", t, step))
                            if task.format_valid else [])
        scored = score_batch(tasks, rollouts, cfg.rewards)
        n_bad = sum(not task.format_valid for task in tasks)
        bad_streak = bad_streak + 1 if n_bad > len(tasks) / 2 else 0
        if bad_streak >= 3:
            raise CurriculumDegenerate(f"over half of the curriculum batch failed the format check for 3 "
                                       f"consecutive steps (iteration {t}, step {step})")
        comp = [b.composite for _, b in scored]
        adv = _group_advantages(comp, cfg.curriculum_group, cfg.optim.epsilon_norm)
        entries = tuple(BatchEntry(traj, r, a, a, cfg.optim.epsilon_low, cfg.optim.epsilon_low, 1.0,
                                   i // cfg.curriculum_group)
                        for i, ((_, traj), r, a) in enumerate(zip(samples, comp, adv)))
        batch = UpdateBatch(entries, f"curriculum-t{t}-s{step}")
        prompt = load_prompt("curriculum")
        _optimize(curriculum, batch, [(prompt, s[1]) for s in samples], CURRICULUM_TABLES, cfg.optim,
                  cfg.curriculum_learning_rate, ref, cfg.ppo_epochs, grpo_loss, ph.writer, "curriculum", t, step)
        append_jsonl(rewards_path, [
            {"step": step, "task": task.to_record(), "consistency": rec.to_record(), "reward": br.to_record()}
            for task, (rec, br) in zip(tasks, scored)])
        ph.event(event="curriculum_step", iteration=t, step=step, tasks=len(tasks),
                 executor_rollouts=runner.counter - before, format_failures=n_bad,
                 mean_reward=float(np.mean(comp)),
                 mean_depth=float(np.mean([_depth(task) for task in tasks])))
    return replace(state, curriculum=curriculum.params)


def _depth(task: Task) -> int:
    p = ToyTaskGrammar(8).parse(task.question) if task.question else None
    return p.depth if p else 0


def build_frontier(state: RunState, cfg: RunConfig, ph: Phase, t: int, curriculum_params: dict):
    curriculum = make_generator(cfg, curriculum_params)
    executor = make_generator(cfg, state.executor)
    runner = ph.runner(executor)
    pool = []
    for task, _ in sample_curriculum(curriculum, cfg.pool, cfg.seed, t, f"pool-t{t}"):
        if not task.format_valid:
            continue
        trajs = runner.run(task, cfg.samples_k, derive_seed(cfg.seed, "pool-rollout", t))
        label, p_hat = majority_vote([tr.final_answer for tr in trajs])
        pool.append((task, p_hat, label))
    return filter_frontier(pool, cfg.band, iteration=t), len(pool), runner.counter


def executor_phase(state: RunState, cfg: RunConfig, ph: Phase, curriculum_params: dict) -> RunState:
    """Filter a fresh task pool to the frontier band and train the executor on it."""
    t = state.iteration + 1
    dataset, n_pool, pool_rollouts = build_frontier(state, cfg, ph, t, curriculum_params)
    name = f"datasets/D_{t}.jsonl"
    _write_jsonl(ph.run_dir / name, [e.to_record() for e in dataset.entries])
    ph.event(event="frontier", iteration=t, pool=n_pool, kept=len(dataset.entries), pool_rollouts=pool_rollouts)
    if not dataset.entries:
        raise EmptyFrontier(f"no pool task has p_hat in [{cfg.band_lower}, {cfg.band_upper}] at iteration {t}; "
                            f"widen the band")
    executor = make_generator(cfg, state.executor)
    ref = executor.params
    runner = ph.runner(executor)
    rng = stream(cfg.seed, "executor-batches", t)
    hist_total = np.zeros(N_CLIP_BINS, dtype=np.int64)
    last_batch = None
    for step in range(cfg.executor_steps):
        n = min(cfg.executor_batch, len(dataset.entries))
        picks = np.sort(rng.choice(len(dataset.entries), size=n, replace=False))
        entries, items = [], []
        before = runner.counter
        for gi, pi in enumerate(picks):
            fe = dataset.entries[int(pi)]
            trajs = runner.run(fe.task, cfg.executor_group, derive_seed(cfg.seed, "exec-rollout", t, step))
            rewards = assign_terminal_rewards(trajs, fe.pseudo_label)
            adv = normalize_advantages(rewards, cfg.optim.epsilon_norm)
            s = ambiguity_scale(fe.p_hat, cfg.optim)
            eh = dynamic_epsilon_high(fe.p_hat, cfg.optim)
            prompt = executor_context(fe.task.question)
            for tr, r, a in zip(trajs, rewards, adv):
                entries.append(BatchEntry(tr, r, float(a), float(s * a), eh, cfg.optim.epsilon_low, fe.p_hat, gi))
                items.append((prompt, tr))
        batch = UpdateBatch(tuple(entries), f"executor-t{t}-s{step}")
        hist, last = _optimize(executor, batch, items, EXECUTOR_TABLES, cfg.optim, cfg.optim.learning_rate, ref,
                               cfg.ppo_epochs, adpo_loss, ph.writer, "executor", t, step)
        hist_total += hist
        last_batch = (batch, last)
        ph.event(event="executor_step", iteration=t, step=step, tasks=n,
                 executor_rollouts=runner.counter - before,
                 mean_reward=float(np.mean([e.reward for e in entries])))
    batch, last = last_batch
    _write_json(ph.run_dir / "clip" / f"executor_t{t}.json", {
        "counts": [e.trajectory.n_policy_tokens for e in batch.entries],
        "scaled_advantage": [e.scaled_advantage for e in batch.entries],
        "eps_low": [e.eps_low for e in batch.entries],
        "eps_high": [e.eps_high for e in batch.entries],
        "old_logprobs": last["old"],
        "new_logprobs": last["new"],
        "kl_beta": cfg.optim.kl_beta,
        "run_histogram": hist_total.tolist(),
    })
    return replace(state, executor=executor.params, datasets=state.datasets + [name])


# ---------------------------------------------------------------------------
# Evaluation and reporting


def heldout_tasks(cfg: RunConfig) -> list[Task]:
    rng = stream(cfg.seed, "heldout")
    grammar = ToyTaskGrammar(cfg.toy.max_depth)
    out = []
    for i in range(cfg.heldout_size):
        p = grammar.sample(rng)
        out.append(Task(f"heldout-{i}", "", p.question(), str(p.value())))
    return out


def evaluate(executor_params: dict, tasks: Sequence[Task], cfg: RunConfig, backend, samples: int,
             seed_tag: str, reference: str = "declared") -> tuple[float, float]:
    """(pass rate, mean tool calls) of single samples scored against each task's reference answer."""
    runner = RolloutRunner(make_generator(cfg, executor_params), backend, cfg.limits, DEFAULT_FENCES, None,
                           cfg.concurrency)
    hits, tools, n = 0, 0, 0
    for task in tasks:
        for tr in runner.run(task, samples, derive_seed(cfg.seed, seed_tag)):
            hits += answers_match(tr.final_answer, task.declared_answer)
            tools += tr.tool_call_count
            n += 1
    return (hits / n, tools / n) if n else (float("nan"), float("nan"))


def difficulty_report(run_dir, cfg: RunConfig, backend=None, snapshot: int = 1) -> list[dict]:
    """Pass rate and mean tool calls of a fixed executor snapshot on every saved D^(t)."""
    run_dir = Path(run_dir)
    backend = backend or make_backend(cfg)
    params = params_from_record(json.loads((run_dir / "params" / f"executor_t{snapshot}.json").read_text()))
    rows = []
    for t in range(1, cfg.iterations + 1):
        path = run_dir / "datasets" / f"D_{t}.jsonl"
        if not path.exists():
            break
        tasks = [FrontierEntry.from_record(r).task for r in _read_jsonl(path)]
        pass_rate, tool_calls = evaluate(params, tasks, cfg, backend, cfg.samples_k, f"report-{t}")
        rows.append({"dataset": f"D_{t}", "tasks": len(tasks), "pass_rate": pass_rate,
                     "mean_tool_calls": tool_calls})
    return rows


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# Outer loop


def run(cfg: RunConfig, run_dir, resume: bool = False) -> RunState:
    """Run (or continue) the co-evolution loop and write every artifact under ``run_dir``."""
    run_dir = Path(run_dir)
    if cfg.generator != "toy":
        raise ConfigError("training needs a trainable generator; the remote client is for analysis only")
    backend = make_backend(cfg)
    try:
        if resume and (run_dir / "state.json").exists():
            state = RunState.load(run_dir)
            dump_config(cfg, run_dir / "config.yaml")
        else:
            run_dir.mkdir(parents=True, exist_ok=True)
            for stale in ("metrics.csv", "events.jsonl"):
                (run_dir / stale).unlink(missing_ok=True)
            dump_config(cfg, run_dir / "config.yaml")
            base = base_params(cfg.toy)
            state = RunState(0, {k: v.copy() for k, v in base.items()},
                             {k: v.copy() for k, v in base.items()}, run_dir)
            state.save()
            (run_dir / "events.jsonl").touch()
        _truncate_logs(run_dir, state.iteration)
        ph = Phase(cfg, run_dir, MetricsWriter(run_dir / "metrics.csv"), backend)
        heldout = heldout_tasks(cfg)
        if state.iteration == 0:
            _record_heldout(run_dir, 0, state.executor, heldout, cfg, backend, fresh=True)
        while state.iteration < cfg.iterations:
            t = state.iteration + 1
            after_cur = curriculum_phase(state, cfg, ph)
            after_exec = executor_phase(state, cfg, ph, after_cur.curriculum)
            state = RunState(t, after_cur.curriculum, after_exec.executor, run_dir, after_exec.datasets)
            state.save()
            _record_heldout(run_dir, t, state.executor, heldout, cfg, backend)
            ph.event(event="iteration_done", iteration=t)
        _write_csv(run_dir / "report.csv", difficulty_report(run_dir, cfg, backend))
        return state
    finally:
        backend.close()


def _record_heldout(run_dir: Path, t: int, params, tasks, cfg, backend, fresh: bool = False) -> None:
    acc, tools = evaluate(params, tasks, cfg, backend, cfg.heldout_samples, "heldout-eval")
    mode = "w" if fresh else "a"
    with open(run_dir / "heldout.csv", mode, newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(["iteration", "accuracy", "mean_tool_calls"])
        w.writerow([t, repr(acc), repr(tools)])


def _truncate_logs(run_dir: Path, iteration: int) -> None:
    """Drop log rows written after the last completed iteration, so a resume rewrites them identically."""
    metrics = run_dir / "metrics.csv"
    if metrics.exists():
        rows = metrics.read_text(encoding="utf-8").splitlines(keepends=True)
        keep = rows[:1] + [r for r in rows[1:] if int(r.split(",")[1]) <= iteration]
        metrics.write_text("".join(keep), encoding="utf-8")
    events = run_dir / "events.jsonl"
    if events.exists():
        keep = [r for r in _read_jsonl(events) if r.get("iteration", 0) <= iteration]
        _write_jsonl(events, keep)
    held = run_dir / "heldout.csv"
    if held.exists():
        rows = held.read_text(encoding="utf-8").splitlines(keepends=True)
        held.write_text("".join(rows[:1] + [r for r in rows[1:] if int(r.split(",")[0]) <= iteration]),
                        encoding="utf-8")
