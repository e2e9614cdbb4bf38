"""One co-evolution run with the desk preset, then a look at what it wrote.

Runs T iterations of curriculum update, frontier filtering and executor
update on the toy system, and prints held-out accuracy per iteration, the
difficulty report (iteration-1 executor on each D_t), and the curriculum's
mean composite reward per step.

    python3 demos/desk_run.py [seed] [run_dir]
"""

import json
import sys
import tempfile
from pathlib import Path

from coevolve.driver import config_from_dict, read_csv, run

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
run_dir = Path(sys.argv[2]) if len(sys.argv) > 2 else Path(tempfile.mkdtemp(prefix="coevolve-"))

cfg = config_from_dict({"seed": seed, "iterations": 3, "samples_k": 10}, "desk")
run(cfg, run_dir)
print(f"run directory: {run_dir}\n")

print("held-out exact-answer accuracy")
for row in read_csv(run_dir / "heldout.csv"):
    print(f"  t={row['iteration']}  {float(row['accuracy']):.3f}")

print("\nfrontier datasets, scored by the iteration-1 executor")
for row in read_csv(run_dir / "report.csv"):
    print(f"  {row['dataset']}  tasks={row['tasks']:>4s}  pass={float(row['pass_rate']):.3f}  "
          f"tools={float(row['mean_tool_calls']):.3f}")

events = [json.loads(line) for line in open(run_dir / "events.jsonl")]
print("\ncurriculum mean composite reward per step")
for t in range(1, cfg.iterations + 1):
    steps = [e["mean_reward"] for e in events if e["event"] == "curriculum_step" and e["iteration"] == t]
    print(f"  t={t}  " + "  ".join(f"{r:.3f}" for r in steps))
for e in events:
    if e["event"] == "frontier":
        print(f"frontier t={e['iteration']}: kept {e['kept']} of {e['pool']}")
