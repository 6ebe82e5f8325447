"""Class-set pruning: sift-and-refine and progressive class selection.

Both strategies cut the per-point cost of a reconstruction-loss
classifier by discarding classes early, using only a few timesteps, and
spending the remaining budget on survivors.  Per-timestep losses for
different classes must be directly comparable, so shared noise across
classes is mandatory here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .classifiers import ClassifierConfig, compute_anchor, timestep_losses
from .schedule import NoiseSchedule, TimestepSubset


@dataclass(frozen=True)
class SiftConfig:
    """Timestep budgets and the loss-gap cutoff for sift-and-refine.

    ``threshold`` is an accumulated per-dimension MSE gap, the same units
    as the (unnormalized) classifier logits.
    """

    sift_timesteps: TimestepSubset
    refine_timesteps: TimestepSubset
    threshold: float

    def __post_init__(self) -> None:
        if not (self.threshold >= 0 or math.isinf(self.threshold)):
            raise ValueError("threshold must be nonnegative")


@dataclass(frozen=True)
class ProgressiveTrajectory:
    """Survivor counts and cumulative timestep checkpoints per stage."""

    class_counts: tuple[int, ...]
    timestep_checkpoints: tuple[int, ...]

    def __post_init__(self) -> None:
        counts = tuple(int(c) for c in self.class_counts)
        checks = tuple(int(c) for c in self.timestep_checkpoints)
        if len(counts) != len(checks) or not counts:
            raise ValueError("class_counts and timestep_checkpoints must match in length")
        if not all(a > b for a, b in zip(counts, counts[1:])):
            raise ValueError("class_counts must be strictly decreasing")
        if counts[-1] != 1:
            raise ValueError("class_counts must end at 1")
        if not all(a < b for a, b in zip(checks, checks[1:])):
            raise ValueError("timestep_checkpoints must be strictly increasing")
        if checks[0] < 1:
            raise ValueError("the first checkpoint must be at least 1")
        object.__setattr__(self, "class_counts", counts)
        object.__setattr__(self, "timestep_checkpoints", checks)


class ClassifierTermEvaluator:
    """Per-timestep loss evaluator bound to a classifier configuration.

    Pruning calls this one timestep at a time; the noise keying matches
    the full classifier, so accumulating over the same timesteps with
    the same seed reproduces full-evaluation losses exactly.
    """

    def __init__(self, denoiser, schedule: NoiseSchedule, config: ClassifierConfig):
        if not config.shared_noise:
            raise ValueError("pruning requires shared noise across classes")
        self.denoiser = denoiser
        self.schedule = schedule
        self.config = config
        self._anchor_cache: dict[bytes, np.ndarray] = {}

    @property
    def n_classes(self) -> int:
        return self.denoiser.n_classes

    def _anchor(self, x: np.ndarray) -> np.ndarray | None:
        if self.config.variant != "apndc":
            return None
        key = np.asarray(x, dtype=np.float64).tobytes()
        if key not in self._anchor_cache:
            self._anchor_cache[key] = compute_anchor(
                x, self.denoiser, self.schedule, self.config.tau_index
            )
        return self._anchor_cache[key]

    def __call__(self, x: np.ndarray, t: int, classes: list[int], seed: int) -> np.ndarray:
        return timestep_losses(
            np.asarray(x, dtype=np.float64),
            self.denoiser,
            self.schedule,
            t,
            classes,
            self.config,
            seed,
            anchor=self._anchor(x),
        )


class CountingEvaluator:
    """Wraps an evaluator and counts (class, timestep) evaluations."""

    def __init__(self, evaluator):
        self.evaluator = evaluator
        self.calls = 0

    @property
    def n_classes(self) -> int:
        return self.evaluator.n_classes

    def __call__(self, x, t, classes, seed):
        self.calls += len(classes)
        return self.evaluator(x, t, classes, seed)


def sift_and_refine(x, evaluator, config: SiftConfig, seed: int) -> int:
    """Prune classes on the sift timesteps, rescore survivors, return the winner.

    After each sift timestep, classes whose accumulated loss trails the
    running minimum by more than ``threshold`` are dropped (the minimum
    itself always survives).  Survivor losses are then reset and
    accumulated over the refine timesteps; the argmin wins, ties broken
    toward the smaller class index.
    """
    k = evaluator.n_classes
    alive = list(range(k))
    acc = np.zeros(k)
    for t in config.sift_timesteps:
        acc[alive] += evaluator(x, t, alive, seed)
        best = min(alive, key=lambda y: (acc[y], y))
        alive = [y for y in alive if acc[y] - acc[best] <= config.threshold]
        assert alive, "the running minimum always survives"

    refined = np.zeros(k)
    for t in config.refine_timesteps:
        refined[alive] += evaluator(x, t, alive, seed)
    return min(alive, key=lambda y: (refined[y], y))


def progressive_select(
    x,
    evaluator,
    timesteps,
    traj: ProgressiveTrajectory,
    seed: int,
) -> list[int]:
    """Progressively narrow the class set along a fixed trajectory.

    Stage i evaluates the incremental timestep block
    ``timesteps[checkpoints[i-1]:checkpoints[i]]`` for the current
    survivors, merges the new losses into the running totals, and keeps
    the best ``class_counts[i]`` classes (ties toward the smaller index).
    Total (class, timestep) evaluations are
    sum_i class_counts[i-1] * (checkpoints[i] - checkpoints[i-1]) with
    class_counts[-1] = K and checkpoints[-1] = 0.
    """
    timesteps = list(timesteps)
    if traj.timestep_checkpoints[-1] > len(timesteps):
        raise ValueError(
            f"last checkpoint {traj.timestep_checkpoints[-1]} exceeds the "
            f"{len(timesteps)} available timesteps"
        )
    k = evaluator.n_classes
    if traj.class_counts[0] > k:
        raise ValueError(f"first survivor count {traj.class_counts[0]} exceeds K={k}")
    survivors = list(range(k))
    acc = np.zeros(k)
    prev = 0
    for keep, checkpoint in zip(traj.class_counts, traj.timestep_checkpoints):
        for t in timesteps[prev:checkpoint]:
            acc[survivors] += evaluator(x, t, survivors, seed)
        survivors = sorted(sorted(survivors, key=lambda y: (acc[y], y))[:keep])
        prev = checkpoint
    return survivors


def expected_progressive_calls(traj: ProgressiveTrajectory, k: int) -> int:
    """Closed-form (class, timestep) evaluation count for a trajectory."""
    counts = (k,) + traj.class_counts[:-1]
    checks = (0,) + traj.timestep_checkpoints
    return sum(c * (b - a) for c, a, b in zip(counts, checks[:-1], checks[1:]))
