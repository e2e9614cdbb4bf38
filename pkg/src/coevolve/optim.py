"""Group-normalized advantages and clipped policy-gradient losses (GRPO / ADPO).

Losses are evaluated at token level: every policy-generated token of
trajectory i carries trajectory i's advantage, token terms are averaged per
trajectory and the per-trajectory terms are averaged over the batch.
Tool-output tokens never enter (they are not sampled by the policy).

Each loss returns the gradient with respect to the current-policy token
log-probabilities, so any policy that can map that back to its parameters
can be trained; the toy policy does so analytically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .types import DomainError, UpdateBatch

N_CLIP_BINS = 20


class GroupTooSmall(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    epsilon_norm: float = 1e-8
    epsilon_low: float = 0.2
    epsilon_high_min: float = 0.2
    epsilon_high_max: float = 0.4
    kl_beta: float = 1e-2
    group_size_G: int = 16
    learning_rate: float = 1e-6
    ambiguity_scale_floor: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epsilon_norm <= 0 or self.epsilon_low <= 0:
            raise ValueError("epsilon_norm and epsilon_low must be positive")
        if not self.epsilon_high_max >= self.epsilon_high_min > 0:
            raise ValueError("need epsilon_high_max >= epsilon_high_min > 0")
        if self.kl_beta < 0 or self.learning_rate <= 0:
            raise ValueError("kl_beta must be >= 0 and learning_rate > 0")
        if not 0.0 <= self.ambiguity_scale_floor <= 1.0:
            raise ValueError("ambiguity_scale_floor must lie in [0, 1]")
        if self.group_size_G < 2:
            raise ValueError("group_size_G must be >= 2")


def normalize_advantages(rewards: Sequence[float], epsilon_norm: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise GroupTooSmall("advantage normalization needs at least 2 samples")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + epsilon_norm)


def _check_p(p_hat: float) -> None:
    if not 0.0 <= p_hat <= 1.0:
        raise DomainError(f"p_hat={p_hat} outside [0, 1]")


def ambiguity_scale(p_hat: float, cfg: OptimConfig) -> float:
    """Linear, increasing in p_hat: floor at p_hat=0, 1 at p_hat=1."""
    _check_p(p_hat)
    floor = cfg.ambiguity_scale_floor
    return floor + (1.0 - floor) * p_hat


def dynamic_epsilon_high(p_hat: float, cfg: OptimConfig) -> float:
    """Upper clip width shrinking linearly from eps_high_max (p=0) to eps_high_min (p=1)."""
    _check_p(p_hat)
    lo, hi = cfg.epsilon_high_min, cfg.epsilon_high_max
    return lo + (hi - lo) * (1.0 - p_hat)


# ---------------------------------------------------------------------------
# Token layout and the shared clipped objective


@dataclass(frozen=True)
class TokenLayout:
    """Flattened view of the policy tokens in a batch."""

    traj_index: np.ndarray  # trajectory id of every token
    counts: np.ndarray  # policy tokens per trajectory
    offsets: np.ndarray  # start of each trajectory's slice

    @property
    def n_traj(self) -> int:
        return len(self.counts)

    @property
    def n_tokens(self) -> int:
        return len(self.traj_index)

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "TokenLayout":
        counts = np.asarray(counts, dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
        return cls(np.repeat(np.arange(len(counts)), counts), counts, offsets)

    @classmethod
    def from_batch(cls, batch: UpdateBatch) -> "TokenLayout":
        return cls.from_counts([e.trajectory.n_policy_tokens for e in batch.entries])

    def flatten(self, per_traj: Sequence[Sequence[float]], name: str) -> np.ndarray:
        if len(per_traj) != self.n_traj:
            raise ShapeMismatch(f"{name}: expected {self.n_traj} sequences, got {len(per_traj)}")
        for i, (seq, n) in enumerate(zip(per_traj, self.counts)):
            if len(seq) != n:
                raise ShapeMismatch(f"{name}[{i}]: {len(seq)} log-probs for {n} policy tokens")
        if self.n_tokens == 0:
            return np.zeros(0)
        return np.concatenate([np.asarray(s, dtype=float) for s in per_traj])

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        return [flat[o:o + n] for o, n in zip(self.offsets, self.counts)]


@dataclass(frozen=True)
class LossResult:
    loss: float
    surrogate: float
    kl: float
    grad: np.ndarray  # d loss / d new token log-probs (flattened)
    ratio: np.ndarray
    up_clipped: np.ndarray  # bool per token
    down_clipped: np.ndarray

    @property
    def clip_frac_up(self) -> float:
        return float(self.up_clipped.mean()) if self.up_clipped.size else 0.0

    @property
    def clip_frac_down(self) -> float:
        return float(self.down_clipped.mean()) if self.down_clipped.size else 0.0

    def __float__(self) -> float:
        return self.loss


def clipped_objective(new: np.ndarray, old: np.ndarray, ref: np.ndarray, layout: TokenLayout,
                      advantages: np.ndarray, eps_low: np.ndarray, eps_high: np.ndarray,
                      kl_beta: float) -> LossResult:
    """Token-level clipped surrogate plus beta * KL estimate, with its gradient.

    ``advantages``, ``eps_low`` and ``eps_high`` are per trajectory.
    KL uses exp(ref - new) - (ref - new) - 1, which is >= 0 per token.
    """
    idx = layout.traj_index
    n_traj = layout.n_traj
    w = 1.0 / np.maximum(layout.counts, 1)[idx]
    adv = np.asarray(advantages, dtype=float)[idx]
    lo = 1.0 - np.asarray(eps_low, dtype=float)[idx]
    hi = 1.0 + np.asarray(eps_high, dtype=float)[idx]

    ratio = np.exp(new - old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, lo, hi) * adv
    take_unclipped = unclipped <= clipped
    obj = np.where(take_unclipped, unclipped, clipped)
    surrogate = -float(np.sum(obj * w)) / n_traj if n_traj else 0.0

    delta = ref - new
    e = np.exp(delta)
    kl = float(np.sum((e - delta - 1.0) * w)) / n_traj if n_traj else 0.0

    d_obj = np.where(take_unclipped, unclipped, 0.0)
    grad = (-d_obj + kl_beta * (1.0 - e)) * w / max(n_traj, 1)

    return LossResult(
        loss=surrogate + kl_beta * kl,
        surrogate=surrogate,
        kl=kl,
        grad=grad,
        ratio=ratio,
        up_clipped=(adv > 0) & (ratio > hi),
        down_clipped=(adv < 0) & (ratio < lo),
    )


def _flatten_inputs(batch, new_logprobs, old_logprobs, ref_logprobs, layout):
    layout = layout or TokenLayout.from_batch(batch)
    new = layout.flatten(new_logprobs, "new_logprobs") if not isinstance(new_logprobs, np.ndarray) else new_logprobs
    old = layout.flatten(old_logprobs, "old_logprobs") if not isinstance(old_logprobs, np.ndarray) else old_logprobs
    ref = layout.flatten(ref_logprobs, "ref_logprobs") if not isinstance(ref_logprobs, np.ndarray) else ref_logprobs
    for name, arr in (("new_logprobs", new), ("old_logprobs", old), ("ref_logprobs", ref)):
        if arr.shape != (layout.n_tokens,):
            raise ShapeMismatch(f"{name}: shape {arr.shape}, expected ({layout.n_tokens},)")
    return layout, new, old, ref


def grpo_loss(batch: UpdateBatch, new_logprobs, old_logprobs, ref_logprobs, cfg: OptimConfig,
              layout: TokenLayout | None = None) -> LossResult:
    """Symmetric clip [1 - eps, 1 + eps] with eps = cfg.epsilon_low, unscaled advantages.

    Log-prob arguments are either per-entry sequences or flat arrays in
    ``layout`` order.
    """
    layout, new, old, ref = _flatten_inputs(batch, new_logprobs, old_logprobs, ref_logprobs, layout)
    n = len(batch.entries)
    adv = np.fromiter((e.advantage for e in batch.entries), float, n)
    eps = np.full(n, cfg.epsilon_low)
    return clipped_objective(new, old, ref, layout, adv, eps, eps, cfg.kl_beta)


def adpo_loss(batch: UpdateBatch, new_logprobs, old_logprobs, ref_logprobs, cfg: OptimConfig,
              layout: TokenLayout | None = None) -> LossResult:
    """Clip [1 - eps_low, 1 + eps_high(x)] on ambiguity-scaled advantages.

    Reads the scaled advantage and per-sample bounds stored on each entry.
    """
    layout, new, old, ref = _flatten_inputs(batch, new_logprobs, old_logprobs, ref_logprobs, layout)
    n = len(batch.entries)
    adv = np.fromiter((e.scaled_advantage for e in batch.entries), float, n)
    eps_low = np.fromiter((e.eps_low for e in batch.entries), float, n)
    eps_high = np.fromiter((e.eps_high for e in batch.entries), float, n)
    return clipped_objective(new, old, ref, layout, adv, eps_low, eps_high, cfg.kl_beta)


# ---------------------------------------------------------------------------
# Parameter update and diagnostics


def sgd_step(params, gradient, learning_rate: float, weight_decay: float = 0.0):
    """Plain gradient descent. Works on arrays or on dicts of arrays."""
    if isinstance(params, Mapping):
        for k, g in gradient.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {k!r}")
        return {k: _descend(v, gradient.get(k), learning_rate, weight_decay) for k, v in params.items()}
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteGradient("non-finite gradient")
    return _descend(params, gradient, learning_rate, weight_decay)


def _descend(p, g, lr, wd):
    if g is None:
        return p
    p_arr = np.asarray(p, dtype=float)
    out = p_arr - lr * (np.asarray(g, dtype=float) + wd * p_arr)
    return float(out) if np.ndim(p) == 0 and not isinstance(p, np.ndarray) else out


def clip_histogram(old_logprobs: np.ndarray, up_clipped: np.ndarray, bins: int = N_CLIP_BINS) -> np.ndarray:
    probs = np.exp(np.asarray(old_logprobs, dtype=float)[np.asarray(up_clipped, dtype=bool)])
    counts, _ = np.histogram(probs, bins=bins, range=(0.0, 1.0))
    return counts


def clip_statistics(batch: UpdateBatch, new_logprobs, old_logprobs, cfg: OptimConfig,
                    adpo: bool = True) -> np.ndarray:
    """Histogram (20 bins on [0, 1]) of old-policy probabilities of up-clipped tokens."""
    layout = TokenLayout.from_batch(batch)
    _, new, old, _ = _flatten_inputs(batch, new_logprobs, old_logprobs, old_logprobs, layout)
    fn = adpo_loss if adpo else grpo_loss
    res = fn(batch, new, old, old, cfg, layout=layout)
    return clip_histogram(old, res.up_clipped)


def low_probability_share(hist: Sequence[int], threshold: float = 0.3) -> float:
    """Fraction of histogram mass in bins lying wholly below ``threshold``."""
    hist = np.asarray(hist)
    total = hist.sum()
    if total == 0:
        return float("nan")
    n_low = int(math.floor(threshold * len(hist) + 1e-9))
    return float(hist[:n_low].sum() / total)


METRIC_FIELDS = ["phase", "iteration", "step", "epoch", "loss", "kl", "clip_frac_up", "clip_frac_down"] + [
    f"bin_{i:02d}" for i in range(N_CLIP_BINS)
]


class MetricsWriter:
    """Appends one comma-separated row per optimizer step."""

    def __init__(self, path):
        self.path = path
        with open(path, "a", newline="") as fh:
            if fh.tell() == 0:
                csv.writer(fh, lineterminator="\n").writerow(METRIC_FIELDS)

    def write(self, phase: str, iteration: int, step: int, epoch: int, res: LossResult,
              hist: Sequence[int]) -> None:
        row = [phase, iteration, step, epoch, repr(res.loss), repr(res.kl),
               repr(res.clip_frac_up), repr(res.clip_frac_down), *[int(h) for h in hist]]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row)
