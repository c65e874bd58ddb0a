"""Hard-task (HT) meta-batch scheduling.

Each normal task reports its worst-classified class; after every ``cadence``
normal meta-batches the collected classes are turned into ``hard_tasks``
re-sampled episodes and the collection is emptied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .episodes import Dataset, Episode, sample_episode_from_classes

log = logging.getLogger(__name__)

METHODS = ("reuse_samples", "fresh_samples")


class SchedulingError(RuntimeError):
    pass


@dataclass
class CurriculumConfig:
    enabled: bool = False
    cadence: int = 10
    hard_tasks: Optional[int] = None  # None: 10 for 1-shot, 4 otherwise
    resample_method: str = "fresh_samples"

    def __post_init__(self):
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.hard_tasks is not None and self.enabled and self.hard_tasks < 1:
            raise ValueError("hard_tasks must be >= 1 when the curriculum is enabled")
        if self.resample_method not in METHODS:
            raise ValueError(f"resample_method must be one of {METHODS}")

    def hard_task_count(self, shot: int) -> int:
        if self.hard_tasks is not None:
            return self.hard_tasks
        return 10 if shot == 1 else 4


@dataclass
class FailureRecord:
    class_id: int
    task_index: int
    accuracy: float
    samples: np.ndarray  # sample indices of that class in the source episode


@dataclass
class HardClassSet:
    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def classes(self) -> list[int]:
        return [e.class_id for e in self.entries]

    def flush(self) -> list:
        out, self.entries = self.entries, []
        return out


def record_failure(hset: HardClassSet, result, task_index: int) -> None:
    """Append the failure class of a TaskResult (global id plus provenance)."""
    hset.entries.append(
        FailureRecord(
            class_id=int(result.hardest_class),
            task_index=int(task_index),
            accuracy=float(result.per_class_acc[result.hardest]),
            samples=np.asarray(result.hardest_samples, dtype=np.int64),
        )
    )


def schedule(iteration: int, cfg: CurriculumConfig) -> str:
    """Phase that follows normal meta-batch ``iteration`` (1-based)."""
    if cfg.enabled and iteration >= 1 and iteration % cfg.cadence == 0:
        return "hard"
    return "normal"


def make_hard_tasks(
    hset: HardClassSet,
    ds: Dataset,
    M: int,
    N: int,
    Q: int,
    count: int,
    method: str,
    rng: np.random.Generator,
    split: str = "train",
) -> list[Episode]:
    """Sample ``count`` episodes from the failure classes, then empty the set.

    ``reuse_samples`` draws each hard class's samples from those it had in
    the failing episodes; ``fresh_samples`` draws anew from the dataset.
    """
    if not hset.entries:
        raise SchedulingError("hard phase requested before any failure class was recorded")
    if method not in METHODS:
        raise ValueError(f"resample_method must be one of {METHODS}")
    pool = hset.classes()
    reuse = None
    if method == "reuse_samples":
        reuse = {}
        for e in hset.entries:
            prev = reuse.get(e.class_id)
            reuse[e.class_id] = e.samples if prev is None else np.union1d(prev, e.samples)
    episodes = [
        sample_episode_from_classes(ds, pool, M, N, Q, rng, split=split, reuse=reuse) for _ in range(count)
    ]
    hset.flush()
    return episodes


def hard_phase_line(iteration: int, pool: list, episodes: list[Episode], method: str) -> str:
    classes = sorted(set(int(c) for c in pool))
    padded = sorted(set(c for ep in episodes for c in ep.padded))
    return f"HARD_PHASE iter={iteration} classes={classes} padded={padded} method={method}"
