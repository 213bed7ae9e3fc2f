"""Tabular Nash Q-learning and a Shapley minimax value-iteration oracle.

These small exact computations provide ground truth for validating the
neural pipeline on tiny fully observed games. Fixture games live in
``nashq/fixtures`` as JSON files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .game_core import EpisodeMetrics, MarkovGameSpec, StepOutcome, metrics_update
from .matrix_nash import StageEquilibrium, full_matrix, solve_zero_sum


class NonConvergenceError(ArithmeticError):
    def __init__(self, residual, iters):
        super().__init__(f"value iteration residual {residual} after {iters} iterations")
        self.residual = residual
        self.iters = iters


@dataclass(frozen=True)
class TabularGame:
    """Fully observed zero-sum stochastic game with explicit tensors.

    payoff: (S, |A_B|, |A_R|) Blue reward; transition: (S, |A_B|, |A_R|, S).
    """

    payoff: np.ndarray
    transition: np.ndarray
    discount: float

    def __post_init__(self):
        payoff = np.asarray(self.payoff, dtype=np.float64)
        transition = np.asarray(self.transition, dtype=np.float64)
        object.__setattr__(self, "payoff", payoff)
        object.__setattr__(self, "transition", transition)
        if payoff.ndim != 3:
            raise ValueError("payoff must be (S, |A_B|, |A_R|)")
        if transition.shape != payoff.shape + (payoff.shape[0],):
            raise ValueError("transition must be (S, |A_B|, |A_R|, S)")
        if not np.all(np.isfinite(payoff)):
            raise ValueError("payoffs must be finite")
        sums = transition.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if not (0.0 <= self.discount < 1.0):
            raise ValueError("discount must lie in [0, 1)")

    @property
    def num_states(self) -> int:
        return self.payoff.shape[0]

    @property
    def num_blue_actions(self) -> int:
        return self.payoff.shape[1]

    @property
    def num_red_actions(self) -> int:
        return self.payoff.shape[2]


@dataclass
class QTable:
    values: np.ndarray  # (S, |A_B|, |A_R|), Blue's view


@dataclass(frozen=True)
class ValueTable:
    values: np.ndarray  # (S,), Blue's equilibrium value per state


def stage_matrices(game: TabularGame, V: np.ndarray) -> np.ndarray:
    """One-step backup matrices r(s,a,b) + gamma * sum_s' p(s'|s,a,b) V(s')."""
    return game.payoff + game.discount * (game.transition @ V)


def shapley_value_iteration(game: TabularGame, tol: float = 1e-9,
                            max_iters: int = 10000):
    """Exact fixed point: each backup solves the stage game at every state.

    Returns (ValueTable, list of per-state StageEquilibrium). Converges
    geometrically at rate gamma; raises NonConvergenceError past max_iters.
    """
    V = np.zeros(game.num_states)
    for _ in range(max_iters):
        mats = stage_matrices(game, V)
        equilibria = [solve_zero_sum(full_matrix(mats[s])) for s in range(game.num_states)]
        V_new = np.array([eq.game_value for eq in equilibria])
        residual = np.max(np.abs(V_new - V))
        V = V_new
        if residual < tol:
            return ValueTable(V), equilibria
    raise NonConvergenceError(residual, max_iters)


def nashq_update(q: QTable, s: int, a_blue: int, a_red: int, r: float,
                 s_next: int, alpha: float, discount: float) -> QTable:
    """One Nash-Q backup: solve the successor stage game, then blend.

    q[s][a_blue][a_red] <- (1-alpha) q[...] + alpha (r + gamma NashVal(s_next)).
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    nash_val = solve_zero_sum(full_matrix(q.values[s_next])).game_value
    q.values[s, a_blue, a_red] = (1 - alpha) * q.values[s, a_blue, a_red] + alpha * (
        r + discount * nash_val
    )
    return q


def run_tabular(game: TabularGame, episodes: int, alpha_schedule=None,
                exploration: float = 0.2, episode_length: int = 50, seed: int = 0):
    """Online Nash Q-learning: sample from current stage equilibria mixed with
    uniform exploration, update with :func:`nashq_update`.

    ``alpha_schedule`` maps the visit count of (s, a_B, a_R) to a step size;
    default 1/(1 + count)^0.6. Polynomial schedules satisfy the usual
    stochastic-approximation conditions and contract far faster than 1/n
    when the discount is close to 1.
    """
    if not (0.0 <= exploration <= 1.0):
        raise ValueError("exploration must lie in [0, 1]")
    if alpha_schedule is None:
        alpha_schedule = lambda n: 1.0 / (1.0 + n) ** 0.6
    rng = np.random.default_rng(seed)
    S, mB, nR = game.payoff.shape
    q = QTable(np.zeros((S, mB, nR)))
    visits = np.zeros((S, mB, nR), dtype=np.int64)

    # stage solutions are cached per state and invalidated on update
    cache: dict[int, StageEquilibrium] = {}

    def stage(s):
        if s not in cache:
            cache[s] = solve_zero_sum(full_matrix(q.values[s]))
        return cache[s]

    uniform_b = np.full(mB, 1.0 / mB)
    uniform_r = np.full(nR, 1.0 / nR)
    for _ in range(episodes):
        s = 0
        for _ in range(episode_length):
            eq = stage(s)
            pb = (1 - exploration) * eq.blue_strategy + exploration * uniform_b
            pr = (1 - exploration) * eq.red_strategy + exploration * uniform_r
            a_b = int(rng.choice(mB, p=pb))
            a_r = int(rng.choice(nR, p=pr))
            s_next = int(rng.choice(S, p=game.transition[s, a_b, a_r]))
            r = game.payoff[s, a_b, a_r]
            alpha = alpha_schedule(visits[s, a_b, a_r])
            visits[s, a_b, a_r] += 1
            nashq_update(q, s, a_b, a_r, r, s_next, alpha, game.discount)
            cache.pop(s, None)
            s = s_next
    values = np.array(
        [solve_zero_sum(full_matrix(q.values[s])).game_value for s in range(S)]
    )
    return q, ValueTable(values)


# --- fixture games -----------------------------------------------------------

FIXTURE_NAMES = ("matching_pennies", "swap_game", "chain_game")


def game_from_dict(doc: dict) -> TabularGame:
    game = TabularGame(doc["payoff"], doc["transition"], doc["discount"])
    if game.num_states != doc["num_states"]:
        raise ValueError("num_states does not match payoff tensor")
    return game


def load_fixture(name: str) -> TabularGame:
    if name not in FIXTURE_NAMES:
        raise ValueError(f"unknown fixture {name!r}; choose from {FIXTURE_NAMES}")
    text = resources.files("nashq").joinpath(f"fixtures/{name}.json").read_text()
    return game_from_dict(json.loads(text))


def load_game_file(path) -> TabularGame:
    with open(path) as f:
        return game_from_dict(json.load(f))


class TabularGameEnv:
    """Adapter exposing a TabularGame through the rollout environment protocol.

    Both agents observe the full state as a one-hot vector; all actions are
    always valid. Action categories are the raw action indices.
    """

    def __init__(self, game: TabularGame, episode_length: int = 50):
        self.game = game
        self.episode_length = episode_length
        self.spec = MarkovGameSpec(
            num_blue_actions=game.num_blue_actions,
            num_red_actions=game.num_red_actions,
            blue_obs_dim=game.num_states,
            red_obs_dim=game.num_states,
            discount=game.discount,
        )
        self.num_blue_categories = game.num_blue_actions
        self.num_red_categories = game.num_red_actions
        self._rng = np.random.default_rng(0)
        self.state = 0
        self.t = 0
        self.metrics = EpisodeMetrics(self.num_blue_categories, self.num_red_categories)

    def blue_action_category(self, a: int) -> int:
        return a

    def red_action_category(self, a: int) -> int:
        return a

    def _obs(self):
        one_hot = np.zeros(self.game.num_states)
        one_hot[self.state] = 1.0
        return one_hot, one_hot.copy()

    def _masks(self):
        return (
            np.ones(self.spec.num_blue_actions, dtype=np.int8),
            np.ones(self.spec.num_red_actions, dtype=np.int8),
        )

    def reset(self, seed: int):
        self._rng = np.random.default_rng(seed)
        self.state = 0
        self.t = 0
        self.metrics = EpisodeMetrics(self.num_blue_categories, self.num_red_categories)
        bo, ro = self._obs()
        bm, rm = self._masks()
        return bo, ro, bm, rm

    def step(self, blue_action: int, red_action: int) -> StepOutcome:
        r = float(self.game.payoff[self.state, blue_action, red_action])
        probs = self.game.transition[self.state, blue_action, red_action]
        self.state = int(self._rng.choice(self.game.num_states, p=probs))
        self.t += 1
        metrics_update(self.metrics, blue_action, red_action, r, False, False)
        bo, ro = self._obs()
        bm, rm = self._masks()
        return StepOutcome(bo, ro, r, bm, rm, done=self.t >= self.episode_length)
