"""Command-line entry point.

Failures print exactly one line, ``error category=<Name> message=<text>``,
and exit nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import driver
from .consistency import filter_frontier, majority_vote
from .generators.toy import params_from_record
from .optim import OptimConfig, TokenLayout, adpo_loss, clip_histogram, low_probability_share
from .rewards import score_batch
from .rollout import RolloutRunner
from .seeding import derive_seed
from .types import BatchEntry, Segment, Task, Trajectory, UpdateBatch, read_jsonl, task_from_output


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args) -> driver.RunConfig:
    return driver.load_config(getattr(args, "config", None), getattr(args, "set", None) or (),
                              getattr(args, "preset", None), seed=getattr(args, "seed", None))


def _executor(cfg: driver.RunConfig, params_path: Optional[str]):
    params = None
    if params_path:
        params = params_from_record(json.loads(Path(params_path).read_text(encoding="utf-8")))
    return driver.make_generator(cfg, params)


def _load_tasks(path: str) -> list[Task]:
    """Task records, or ``{"raw": <curriculum output>}`` lines parsed on the fly."""
    tasks = []
    for i, rec in enumerate(read_jsonl(path)):
        if "raw" in rec:
            tasks.append(task_from_output(rec["raw"], rec.get("id", f"task-{i}")))
        else:
            tasks.append(Task.from_record(rec))
    return tasks


def cmd_run(args) -> int:
    cfg = _config(args)
    state = driver.run(cfg, args.run_dir, resume=args.resume)
    print(json.dumps({"run_dir": str(args.run_dir), "iteration": state.iteration}))
    return 0


def cmd_rollout(args) -> int:
    cfg = _config(args)
    task = Task("cli-task", "", args.question, None)
    backend = driver.make_backend(cfg)
    try:
        runner = RolloutRunner(_executor(cfg, args.params), backend, cfg.limits)
        (traj,) = runner.run(task, 1, derive_seed(cfg.seed, "cli-rollout"))
    finally:
        backend.close()
    print(json.dumps(traj.to_record(), ensure_ascii=False, sort_keys=True))
    return 0


def cmd_rewards(args) -> int:
    cfg = _config(args)
    tasks = _load_tasks(args.tasks)
    backend = driver.make_backend(cfg)
    try:
        runner = RolloutRunner(_executor(cfg, args.params), backend, cfg.limits)
        rollouts = [runner.run(t, cfg.samples_k, derive_seed(cfg.seed, "cli-rewards")) if t.format_valid else []
                    for t in tasks]
    finally:
        backend.close()
    for rec, br in score_batch(tasks, rollouts, cfg.rewards):
        print(json.dumps(br.to_record() | {"p_hat": rec.p_hat, "majority_answer": rec.majority_answer},
                         sort_keys=True))
    return 0


def cmd_filter(args) -> int:
    pool = []
    for i, rec in enumerate(read_jsonl(args.pool)):
        task = Task.from_record(rec["task"]) if "task" in rec else Task(f"task-{i}", "", "", None)
        if "p_hat" in rec:
            p_hat, label = float(rec["p_hat"]), rec.get("pseudo_label", rec.get("majority_answer"))
        else:
            label, p_hat = majority_vote(rec["answers"])
        pool.append((task, p_hat, label if label is not None else task.declared_answer or ""))
    band = driver.FrontierBand.symmetric(args.delta) if args.delta is not None \
        else driver.FrontierBand(args.lower, args.upper)
    for e in filter_frontier(pool, band).entries:
        print(json.dumps(e.to_record(), sort_keys=True, ensure_ascii=False))
    return 0


def cmd_clipstats(args) -> int:
    data = json.loads(Path(args.batch).read_text(encoding="utf-8"))
    if args.run_total:
        hist = np.asarray(data["run_histogram"])
    else:
        layout = TokenLayout.from_counts(data["counts"])
        entries = []
        for n, a, lo, hi in zip(data["counts"], data["scaled_advantage"], data["eps_low"], data["eps_high"]):
            seg = Segment("policy_text", "x" * n, tuple(0.0 for _ in range(n)))
            entries.append(BatchEntry(Trajectory("batch", (seg,), None, True, 0), 0.0, a, a, hi, lo))
        old = np.asarray(data["old_logprobs"])
        new = np.asarray(data["new_logprobs"])
        res = adpo_loss(UpdateBatch(tuple(entries)), new, old, old, OptimConfig(kl_beta=data.get("kl_beta", 0.0)),
                        layout=layout)
        hist = clip_histogram(old, res.up_clipped)
    for i, h in enumerate(hist):
        print(f"{i / len(hist):.2f}-{(i + 1) / len(hist):.2f},{int(h)}")
    print(f"low_probability_share(<{args.threshold}),{low_probability_share(hist, args.threshold)!r}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = driver.load_config(str(run_dir / "config.yaml"))
    rows = driver.difficulty_report(run_dir, cfg, snapshot=args.snapshot)
    print("dataset,tasks,pass_rate,mean_tool_calls")
    for r in rows:
        print(f"{r['dataset']},{r['tasks']},{r['pass_rate']:.4f},{r['mean_tool_calls']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coevolve", description="Co-evolving curriculum and executor agents on a toy task grammar.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_required=False):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--preset", choices=["full", "desk"], help="base values under the config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key, e.g. optim.learning_rate=10 (repeatable)")
        sp.add_argument("--seed", type=int, required=seed_required)

    sp = sub.add_parser("run", help="full co-evolution loop")
    common(sp, seed_required=True)
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--resume", action="store_true", help="continue from the last completed iteration")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("rollout", help="one executor rollout on a question; prints the trajectory")
    common(sp)
    sp.add_argument("question")
    sp.add_argument("--params", help="executor parameter snapshot (params/executor_t*.json)")
    sp.set_defaults(fn=cmd_rollout)

    sp = sub.add_parser("rewards", help="score a task file offline; one breakdown per task")
    common(sp)
    sp.add_argument("tasks", help="JSONL of task records or {\"raw\": curriculum output}")
    sp.add_argument("--params", help="executor parameter snapshot")
    sp.set_defaults(fn=cmd_rewards)

    sp = sub.add_parser("filter", help="keep pool tasks whose p_hat lies in the band")
    sp.add_argument("pool", help="JSONL with p_hat (and pseudo_label) or answers per line")
    sp.add_argument("--lower", type=float, default=0.3)
    sp.add_argument("--upper", type=float, default=0.8)
    sp.add_argument("--delta", type=float, help="symmetric band 0.5 +/- delta; overrides --lower/--upper")
    sp.set_defaults(fn=cmd_filter)

    sp = sub.add_parser("clipstats", help="histogram of old probabilities of up-clipped tokens")
    sp.add_argument("batch", help="saved batch (clip/executor_t*.json)")
    sp.add_argument("--threshold", type=float, default=0.3)
    sp.add_argument("--run-total", action="store_true", help="use the whole-phase histogram stored with the batch")
    sp.set_defaults(fn=cmd_clipstats)

    sp = sub.add_parser("report", help="difficulty evolution from saved datasets")
    sp.add_argument("run_dir")
    sp.add_argument("--snapshot", type=int, default=1, help="executor iteration to evaluate with")
    sp.set_defaults(fn=cmd_report)
    return p


def _fail(category: str, message: str, code: int) -> int:
    print(f"error category={category} message={json.dumps(message)}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except driver.ConfigError as exc:
        return _fail("config", str(exc), 2)
    except (driver.EmptyFrontier, driver.CurriculumDegenerate) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
