"""Curriculum reward stack: uncertainty, tool use, repetition penalty, composite."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .consistency import consistency_record
from .types import ConsistencyRecord, DomainError, RewardBreakdown, Task, Trajectory

BLEU_ORDER = 4


@dataclass(frozen=True)
class CurriculumRewardConfig:
    lambda_unc: float = 1.0
    lambda_tool: float = 0.6
    lambda_rep: float = 1.0
    gamma: float = 1.0
    cap_C: int = 4
    tau_bleu: float = 0.5
    batch_size_B: int = 128

    def __post_init__(self):
        for name in ("lambda_unc", "lambda_tool", "lambda_rep", "gamma", "tau_bleu"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        if self.cap_C < 1 or self.batch_size_B < 1:
            raise ValueError("cap_C and batch_size_B must be >= 1")


def uncertainty_reward(p_hat: float) -> float:
    if not 0.0 <= p_hat <= 1.0:
        raise DomainError(f"p_hat={p_hat} outside [0, 1]")
    return 1.0 - 2.0 * abs(p_hat - 0.5)


def tool_use_reward(tool_call_count: int, cfg: CurriculumRewardConfig) -> float:
    return cfg.gamma * min(tool_call_count, cfg.cap_C)


def mean_tool_use_reward(counts: Sequence[int], cfg: CurriculumRewardConfig) -> float:
    """Tool reward averaged over the k executor responses to one task."""
    if not counts:
        return 0.0
    return cfg.gamma * sum(min(c, cfg.cap_C) for c in counts) / len(counts)


# ---------------------------------------------------------------------------
# BLEU distance


def _ngram_counts(text: str) -> tuple[int, list[Counter]]:
    toks = text.lower().split()
    return len(toks), [Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))
                       for n in range(1, BLEU_ORDER + 1)]


def _bleu(hyp: tuple[int, list[Counter]], ref: tuple[int, list[Counter]]) -> float:
    c, hyp_counts = hyp
    r, ref_counts = ref
    if c == 0 and r == 0:
        return 1.0
    if c == 0 or r == 0:
        return 0.0
    log_p = 0.0
    for n, (hc, rc) in enumerate(zip(hyp_counts, ref_counts), start=1):
        matched = sum(min(cnt, rc[g]) for g, cnt in hc.items())
        total = max(c - n + 1, 0)
        if n == 1:
            if matched == 0:
                return 0.0
            log_p += math.log(matched / total)
        else:
            log_p += math.log((matched + 1) / (total + 1))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / BLEU_ORDER)


def sentence_bleu(hypothesis: str, reference: str) -> float:
    """Sentence BLEU, orders 1-4, uniform weights.

    Precisions of order >= 2 get add-one smoothing; an empty unigram match
    gives 0 so disjoint texts sit at the maximal distance.
    """
    return _bleu(_ngram_counts(hypothesis), _ngram_counts(reference))


def pairwise_bleu_distance(a: str, b: str) -> float:
    return 1.0 - sentence_bleu(a, b)


def _task_text(t) -> str:
    if isinstance(t, str):
        return t
    return t.question if t.question else t.prompt_text


def distance_matrix(texts: Sequence[str]) -> np.ndarray:
    """d[i, j] = 1 - BLEU(texts[i], texts[j])."""
    counts = [_ngram_counts(t) for t in texts]
    n = len(texts)
    d = np.zeros((n, n))
    cache: dict[tuple[str, str], float] = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            key = (texts[i], texts[j])
            v = cache.get(key)
            if v is None:
                v = cache[key] = 1.0 - _bleu(counts[i], counts[j])
            d[i, j] = v
    return d


def cluster_by_similarity(batch: Sequence, tau_bleu: float) -> list[int]:
    """Connected components of the graph with edges where max(d_ij, d_ji) < tau.

    Returns one label per item; a label is the smallest index in its cluster,
    so relabelling the batch relabels the clusters consistently.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    d = distance_matrix([_task_text(t) for t in batch])
    sym = np.maximum(d, d.T)
    adj = sym < tau_bleu
    np.fill_diagonal(adj, False)
    _, comp = connected_components(csr_matrix(adj), directed=False)
    first: dict[int, int] = {}
    for i, c in enumerate(comp):
        first.setdefault(int(c), i)
    return [first[int(c)] for c in comp]


def cluster_sizes(labels: Sequence[int]) -> list[int]:
    counts = Counter(labels)
    return [counts[l] for l in labels]


def repetition_penalty(cluster_size: int, cfg: CurriculumRewardConfig) -> float:
    if not 1 <= cluster_size <= cfg.batch_size_B:
        raise ValueError("cluster_size must lie in [1, B]")
    return cfg.lambda_rep * cluster_size / cfg.batch_size_B


def composite_curriculum_reward(format_ok: bool, r_unc: float, r_tool: float, r_rep: float,
                                cfg: CurriculumRewardConfig) -> float:
    if not format_ok:
        return 0.0
    return max(0.0, cfg.lambda_unc * r_unc + cfg.lambda_tool * r_tool - r_rep)


def score_batch(tasks: Sequence[Task], rollouts: Sequence[Sequence[Trajectory]],
                cfg: CurriculumRewardConfig) -> list[tuple[ConsistencyRecord, RewardBreakdown]]:
    """Full reward breakdown for a curriculum batch.

    ``rollouts[i]`` holds the k executor trajectories sampled for ``tasks[i]``;
    the same k rollouts feed both the vote and the tool-use count. B is taken
    from the actual batch length. Format-invalid tasks still take part in
    clustering but are gated to zero.
    """
    if len(tasks) != len(rollouts):
        raise ValueError("one rollout group per task required")
    cfg = replace(cfg, batch_size_B=len(tasks))
    labels = cluster_by_similarity(tasks, cfg.tau_bleu)
    sizes = cluster_sizes(labels)
    out = []
    for task, trajs, size in zip(tasks, rollouts, sizes):
        # format-invalid tasks get no rollouts; record an empty vote for them
        rec = (consistency_record(task.id, [t.final_answer for t in trajs]) if trajs
               else ConsistencyRecord(task.id, (), None, 0.0))
        fmt = task.format_valid
        r_unc = uncertainty_reward(rec.p_hat) if trajs else 0.0
        r_tool = mean_tool_use_reward([t.tool_call_count for t in trajs], cfg)
        r_rep = repetition_penalty(size, cfg)
        comp = composite_curriculum_reward(fmt, r_unc, r_tool, r_rep, cfg)
        out.append((rec, RewardBreakdown(task.id, r_unc, r_tool, r_rep, fmt, comp)))
    return out
