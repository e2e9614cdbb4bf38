"""Majority voting, self-consistency, frontier filtering and pseudo-label rewards."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .types import ConsistencyRecord, Task, Trajectory, answers_match, canonical_answer


class EmptyInput(ValueError):
    pass


def majority_vote(answers: Sequence[Optional[str]]) -> tuple[Optional[str], float]:
    """Return (majority answer, share of all k votes it received).

    None entries count towards k but can never win. Equal vote counts go to the
    lexicographically smallest canonical form.
    """
    k = len(answers)
    if k == 0:
        raise EmptyInput("majority_vote needs at least one answer")
    classes: list[list] = []  # [representative, canonical, votes]
    for a in answers:
        if a is None:
            continue
        for cls in classes:
            if answers_match(cls[0], a):
                cls[2] += 1
                break
        else:
            classes.append([a, canonical_answer(a), 1])
    if not classes:
        return None, 0.0
    best = min(classes, key=lambda c: (-c[2], c[1]))
    return best[0], best[2] / k


def consistency_record(task_id: str, answers: Sequence[Optional[str]]) -> ConsistencyRecord:
    y, p = majority_vote(answers)
    return ConsistencyRecord(task_id=task_id, answers=tuple(answers), majority_answer=y, p_hat=p)


@dataclass(frozen=True)
class FrontierBand:
    """Retention band on p_hat. Defaults to the 0.3-0.8 experimental setting."""

    lower: float = 0.3
    upper: float = 0.8

    @classmethod
    def symmetric(cls, delta: float) -> "FrontierBand":
        if not 0 < delta <= 0.5:
            raise ValueError("delta must lie in (0, 0.5]")
        return cls(0.5 - delta, 0.5 + delta)

    def contains(self, p_hat: float) -> bool:
        # 1e-12 slack keeps p_hat = m/k values on the boundary inside
        return self.lower - 1e-12 <= p_hat <= self.upper + 1e-12


@dataclass(frozen=True)
class FrontierEntry:
    task: Task
    p_hat: float
    pseudo_label: str

    def to_record(self) -> dict:
        return {"task": self.task.to_record(), "p_hat": self.p_hat, "pseudo_label": self.pseudo_label}

    @classmethod
    def from_record(cls, rec: dict) -> "FrontierEntry":
        return cls(Task.from_record(rec["task"]), float(rec["p_hat"]), rec["pseudo_label"])


@dataclass(frozen=True)
class FilteredDataset:
    iteration: int
    entries: tuple[FrontierEntry, ...]
    band: FrontierBand = field(default_factory=FrontierBand)

    def __len__(self) -> int:
        return len(self.entries)


def filter_frontier(pool: Sequence[tuple], band: FrontierBand | float = FrontierBand(),
                    iteration: int = 0) -> FilteredDataset:
    """Keep pool items whose p_hat lies inside ``band``; order is preserved.

    Pool items are ``(task, p_hat)`` or ``(task, p_hat, majority_answer)``.
    Items without a majority answer are dropped, since there is nothing to
    train towards. A bare float ``band`` is read as the symmetric half-width.
    """
    if not isinstance(band, FrontierBand):
        band = FrontierBand.symmetric(band)
    kept = []
    for item in pool:
        task, p_hat = item[0], item[1]
        label = item[2] if len(item) > 2 else task.declared_answer
        if label is None:
            continue
        if band.contains(p_hat):
            kept.append(FrontierEntry(task, p_hat, label))
    return FilteredDataset(iteration=iteration, entries=tuple(kept), band=band)


def assign_terminal_rewards(trajectories: Sequence[Trajectory], pseudo_label: str) -> list[float]:
    if pseudo_label is None:
        raise ValueError("pseudo_label must not be None")
    return [1.0 if answers_match(t.final_answer, pseudo_label) else 0.0 for t in trajectories]
