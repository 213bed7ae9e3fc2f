"""Core types for two-player zero-sum Markov games and evaluation metrics.

Blue is the maximizing row player throughout; Red's reward is always the
negation of Blue's and is never stored separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MarkovGameSpec:
    """Static shape information for one game: action counts, obs dims, discount."""

    num_blue_actions: int
    num_red_actions: int
    blue_obs_dim: int
    red_obs_dim: int
    discount: float

    def __post_init__(self):
        if self.num_blue_actions < 1 or self.num_red_actions < 1:
            raise ValueError("action counts must be >= 1")
        if self.blue_obs_dim < 1 or self.red_obs_dim < 1:
            raise ValueError("observation dimensions must be >= 1")
        if not (0.0 <= self.discount < 1.0):
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")


@dataclass(frozen=True)
class JointAction:
    blue: int
    red: int

    def validate(self, spec: MarkovGameSpec) -> None:
        if not (0 <= self.blue < spec.num_blue_actions):
            raise ValueError(f"blue action {self.blue} out of range")
        if not (0 <= self.red < spec.num_red_actions):
            raise ValueError(f"red action {self.red} out of range")


@dataclass(frozen=True)
class StepOutcome:
    """Result of one simultaneous-move environment step.

    Masks describe validity in the *successor* state; ``blue_reward`` is Blue's
    reward for the step (Red receives its negation).
    """

    blue_obs: np.ndarray
    red_obs: np.ndarray
    blue_reward: float
    blue_mask: np.ndarray
    red_mask: np.ndarray
    done: bool

    @property
    def red_reward(self) -> float:
        return -self.blue_reward

    def validate(self, spec: MarkovGameSpec) -> None:
        if len(self.blue_obs) != spec.blue_obs_dim:
            raise ValueError("blue_obs length does not match spec")
        if len(self.red_obs) != spec.red_obs_dim:
            raise ValueError("red_obs length does not match spec")
        if not self.done:
            if not np.any(self.blue_mask) or not np.any(self.red_mask):
                raise ValueError("masks must expose at least one valid action")


class EpisodeMetrics:
    """Per-episode evaluation series: cumulative reward, attack attempts,
    successful impacts, and per-category action counts for both agents.

    Single-writer: one episode appends via :func:`metrics_update`.
    """

    def __init__(self, num_blue_categories: int, num_red_categories: int):
        self.cumulative_reward: list[float] = []
        self.attack_attempts: list[int] = []
        self.successful_impacts: list[int] = []
        self.blue_action_counts = np.zeros(num_blue_categories, dtype=np.int64)
        self.red_action_counts = np.zeros(num_red_categories, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.cumulative_reward)


def metrics_update(
    metrics: EpisodeMetrics,
    blue_category: int,
    red_category: int,
    blue_reward: float,
    red_action_is_impact: bool,
    impact_succeeded: bool,
) -> EpisodeMetrics:
    """Append one step to the episode series.

    ``blue_category``/``red_category`` index the agents' action-category
    counters (for the cyber environment these are the five taxonomy bins).
    """
    if impact_succeeded and not red_action_is_impact:
        raise ValueError("impact cannot succeed when no impact was attempted")
    prev_r = metrics.cumulative_reward[-1] if metrics.cumulative_reward else 0.0
    prev_a = metrics.attack_attempts[-1] if metrics.attack_attempts else 0
    prev_i = metrics.successful_impacts[-1] if metrics.successful_impacts else 0
    metrics.cumulative_reward.append(prev_r + blue_reward)
    metrics.attack_attempts.append(prev_a + int(red_action_is_impact))
    metrics.successful_impacts.append(prev_i + int(impact_succeeded))
    metrics.blue_action_counts[blue_category] += 1
    metrics.red_action_counts[red_category] += 1
    return metrics


@dataclass(frozen=True)
class AggregateStats:
    """Per-index mean and sample standard deviation over N episode series."""

    mean: np.ndarray
    std: np.ndarray
    n: int = field(default=0)


def discounted_return(rewards, discount: float) -> float:
    """Sum of discount^t * rewards[t]; empty sequences return 0."""
    if not (0.0 <= discount < 1.0):
        raise ValueError(f"discount must lie in [0, 1), got {discount}")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        return 0.0
    return float(np.dot(discount ** np.arange(rewards.size), rewards))


def aggregate_series(episodes) -> AggregateStats:
    """Mean and sample (N-1) standard deviation per index over >= 2 equal-length series."""
    if len(episodes) < 2:
        raise ValueError("aggregation needs at least 2 episode series")
    lengths = {len(e) for e in episodes}
    if len(lengths) != 1:
        raise ValueError(f"ragged series lengths {sorted(lengths)} are not aggregatable")
    data = np.asarray(episodes, dtype=np.float64)
    return AggregateStats(
        mean=data.mean(axis=0),
        std=data.std(axis=0, ddof=1),
        n=data.shape[0],
    )
