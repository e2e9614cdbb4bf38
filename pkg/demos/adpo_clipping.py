"""What the ambiguity-aware update changes relative to plain GRPO.

1. Prints the advantage scale and the upper clip bound as functions of the
   vote agreement p_hat.
2. Builds one executor batch from toy rollouts on three tasks of different
   difficulty, takes several optimizer epochs on it, and compares the GRPO
   and ADPO losses and up-clip counts along the way.
3. Prints the histogram of old-policy probabilities of the up-clipped tokens.

    python3 demos/adpo_clipping.py
"""

import numpy as np

from coevolve.consistency import consistency_record, assign_terminal_rewards
from coevolve.generators.toy import EXECUTOR_TABLES, ChoiceIndex, ToyPolicy, base_params
from coevolve.optim import (
    OptimConfig,
    TokenLayout,
    adpo_loss,
    ambiguity_scale,
    clip_histogram,
    dynamic_epsilon_high,
    grpo_loss,
    low_probability_share,
    normalize_advantages,
    sgd_step,
)
from coevolve.rollout import RolloutRunner, render_fn
from coevolve.sandbox import mock_pool
from coevolve.types import BatchEntry, Task, UpdateBatch

cfg = OptimConfig(kl_beta=0.01, learning_rate=30.0)

print("p_hat  scale  eps_high")
for p in np.linspace(0, 1, 6):
    print(f"{p:4.1f}  {ambiguity_scale(p, cfg):5.2f}  {dynamic_epsilon_high(p, cfg):6.3f}")

policy = ToyPolicy(base_params())
runner = RolloutRunner(policy, mock_pool(2))
questions = ["Compute the value of 4 + 5 .",
             "Compute the value of ( 7 * 6 ) - 9 .",
             "Compute the value of ( ( ( 8 * 7 ) - 9 ) * 6 ) + 4 ."]
G = 16

entries, items = [], []
for g, q in enumerate(questions):
    task = Task(f"q{g}", "", q, None)
    trajs = runner.run(task, G, seed=11)
    rec = consistency_record(task.id, [t.final_answer for t in trajs])
    rewards = assign_terminal_rewards(trajs, rec.majority_answer) if rec.majority_answer else [0.0] * G
    adv = normalize_advantages(rewards, cfg.epsilon_norm)
    s, eh = ambiguity_scale(rec.p_hat, cfg), dynamic_epsilon_high(rec.p_hat, cfg)
    print(f"\n{q}\n  majority {rec.majority_answer!r} with p_hat {rec.p_hat:.2f}: scale {s:.2f}, eps_high {eh:.3f}")
    for t, r, a in zip(trajs, rewards, adv):
        entries.append(BatchEntry(t, r, float(a), float(a) * s, eh, cfg.epsilon_low, rec.p_hat, g))
        items.append((runner.context(task), t))

batch = UpdateBatch(tuple(entries))
layout = TokenLayout.from_batch(batch)
index = ChoiceIndex.build(policy, items, render_fn())
ref = old = index.logprobs(policy.params)
params = policy.params
hist = np.zeros(20, dtype=np.int64)

print("\nepoch  grpo_loss  adpo_loss  grpo_up  adpo_up")
for epoch in range(6):
    new = index.logprobs(params)
    g_res = grpo_loss(batch, new, old, ref, cfg, layout=layout)
    a_res = adpo_loss(batch, new, old, ref, cfg, layout=layout)
    print(f"{epoch:5d}  {g_res.loss:9.4f}  {a_res.loss:9.4f}  {int(g_res.up_clipped.sum()):7d}  "
          f"{int(a_res.up_clipped.sum()):7d}")
    hist += clip_histogram(old, a_res.up_clipped)
    params = sgd_step(params, index.backprop(params, a_res.grad, EXECUTOR_TABLES), cfg.learning_rate)

print("\nold-probability bins of ADPO up-clipped tokens:")
for i, c in enumerate(hist):
    if c:
        print(f"  [{i / 20:.2f}, {(i + 1) / 20:.2f})  {'#' * int(c)}")
print(f"share below 0.3: {low_probability_share(hist, 0.3):.2f}")
