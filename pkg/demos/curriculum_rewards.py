"""How a curriculum batch is scored.

Samples a batch of tasks from the untrained toy curriculum policy, rolls each
one out k times with the toy executor against the mock sandbox, and prints the
per-task reward breakdown: vote agreement, uncertainty reward, tool-use reward,
repetition penalty from BLEU clustering, and the gated composite.

    python3 demos/curriculum_rewards.py
"""

import numpy as np

from coevolve.driver import sample_curriculum
from coevolve.generators.toy import ToyPolicy, base_params
from coevolve.rewards import CurriculumRewardConfig, cluster_by_similarity, distance_matrix, score_batch
from coevolve.rollout import RolloutRunner
from coevolve.sandbox import mock_pool

K = 10
BATCH = 8

curriculum = ToyPolicy(base_params())
executor = ToyPolicy(base_params())
runner = RolloutRunner(executor, mock_pool(2))

pairs = sample_curriculum(curriculum, BATCH, seed=7, iteration=1, tag="demo")
tasks = [t for t, _ in pairs]
rollouts = [runner.run(t, K, seed=7) if t.format_valid else [] for t in tasks]

cfg = CurriculumRewardConfig()
print(f"lambda_unc={cfg.lambda_unc} lambda_tool={cfg.lambda_tool} lambda_rep={cfg.lambda_rep} "
      f"tau_bleu={cfg.tau_bleu} cap_C={cfg.cap_C}\n")

print(f"{'question':44s} {'label':>6s} {'p_hat':>5s} {'r_unc':>5s} {'r_tool':>6s} {'r_rep':>5s} {'R_C':>5s}")
for task, (rec, br) in zip(tasks, score_batch(tasks, rollouts, cfg)):
    print(f"{task.question[:44]:44s} {str(rec.majority_answer):>6s} {rec.p_hat:5.2f} "
          f"{br.r_unc:5.2f} {br.r_tool:6.2f} {br.r_rep:5.3f} {br.composite:5.3f}")

# near-duplicate questions share a cluster and split the penalty between them
labels = cluster_by_similarity(tasks, cfg.tau_bleu)
d = distance_matrix([t.question for t in tasks])
print("\ncluster labels:", labels)
print("smallest off-diagonal BLEU distance:", round(float(np.min(d + np.eye(len(d)))), 3))

# a batch of identical tasks forms one cluster of size B, which costs lambda_rep each
dup = [tasks[0]] * BATCH
scored = score_batch(dup, [rollouts[0]] * BATCH, cfg)
print("identical batch penalty per task:", scored[0][1].r_rep, "composite:", scored[0][1].composite)
