"""Three-phase Nash Q-Network training.

Phase 1 collects on-policy rollouts from parallel environment workers;
Phase 2 fits the centralized critic to policy-expectation TD targets;
Phase 3 solves the stage game of the critic's joint Q matrix at every
sampled state and pulls each policy toward its equilibrium marginal.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import neural
from .game_core import EpisodeMetrics, aggregate_series
from .matrix_nash import PayoffMatrix, StageEquilibrium, saddle_check, solve_zero_sum
from .neural import (
    GradientOverflowError,
    MixedStrategy,
    MlpSpec,
    NetworkParams,
    adam_step,
    backward,
    critic_matrices_batch,
    forward,
    huber_loss_batch,
    init_params,
    masked_softmax,
    policy_probs_batch,
)

WORKER_SEED_STRIDE = 1_000_003


class RolloutError(RuntimeError):
    """Environment fault during collection, tagged with worker and step."""


@dataclass
class RolloutRecord:
    blue_obs: np.ndarray
    red_obs: np.ndarray
    blue_action: int
    red_action: int
    blue_policy: MixedStrategy
    red_policy: MixedStrategy
    blue_mask: np.ndarray
    red_mask: np.ndarray
    blue_reward: float
    next_blue_obs: np.ndarray
    next_red_obs: np.ndarray
    next_blue_mask: np.ndarray
    next_red_mask: np.ndarray
    done: bool  # terminal for bootstrapping (truncation is not terminal)

    def validate(self):
        if self.blue_policy.probs[self.blue_action] <= 0:
            raise ValueError("chosen blue action has zero policy probability")
        if self.red_policy.probs[self.red_action] <= 0:
            raise ValueError("chosen red action has zero policy probability")


class RolloutBuffer:
    """Ordered on-policy buffer, cleared after each training epoch."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.records: list[RolloutRecord] = []

    def append(self, record: RolloutRecord):
        if len(self.records) >= self.capacity:
            raise ValueError("rollout buffer full")
        self.records.append(record)

    def extend(self, records):
        for r in records:
            self.append(r)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass(frozen=True)
class TrainConfig:
    discount: float = 0.99
    critic_epochs: int = 6          # K
    rollout_horizon: int = 2000     # T, buffer capacity per epoch
    batch_size: int = 64            # B
    policy_lr: float = 1e-3
    critic_lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    num_workers: int = 4
    episodes_per_epoch: int = 64
    episode_length: int = 100
    seed: int = 0
    policy_hidden: tuple = (64, 64)
    critic_hidden: tuple = (128, 128)
    huber_delta: float = 1.0
    bootstrap_on_horizon: bool = True
    frozen_targets: bool = False    # recompute targets per critic pass when False

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "policy_hidden", tuple(self.policy_hidden))
        object.__setattr__(self, "critic_hidden", tuple(self.critic_hidden))
        if not (0.0 <= self.discount < 1.0):
            raise ValueError("discount must lie in [0, 1)")
        for name in ("critic_epochs", "rollout_horizon", "batch_size",
                     "num_workers", "episodes_per_epoch", "episode_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.policy_lr <= 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not all(0.0 < b < 1.0 for b in self.adam_betas):
            raise ValueError("adam betas must lie in (0, 1)")


def build_networks(env_spec, config: TrainConfig, rng: np.random.Generator):
    """Fresh (blue policy, red policy, critic) for an environment spec."""
    blue = init_params(
        MlpSpec(env_spec.blue_obs_dim, config.policy_hidden, env_spec.num_blue_actions),
        rng,
    )
    red = init_params(
        MlpSpec(env_spec.red_obs_dim, config.policy_hidden, env_spec.num_red_actions),
        rng,
    )
    critic = init_params(
        MlpSpec(
            env_spec.blue_obs_dim + env_spec.red_obs_dim,
            config.critic_hidden,
            env_spec.num_blue_actions * env_spec.num_red_actions,
        ),
        rng,
    )
    return blue, red, critic


def _sample(rng, probs):
    return int(rng.choice(len(probs), p=probs))


def _worker_collect(worker_id, env_factory, blue, red, config, episode_ids):
    rng = np.random.default_rng(config.seed * WORKER_SEED_STRIDE + worker_id)
    env = env_factory()
    records = []
    metrics = []
    for ep in episode_ids:
        blue_obs, red_obs, blue_mask, red_mask = env.reset(
            seed=int(rng.integers(1 << 62))
        )
        for step_idx in range(config.episode_length):
            try:
                pol_b = neural.policy_forward(blue, blue_obs, blue_mask)
                pol_r = neural.policy_forward(red, red_obs, red_mask)
                a_b = _sample(rng, pol_b.probs)
                a_r = _sample(rng, pol_r.probs)
                out = env.step(a_b, a_r)
            except Exception as exc:
                raise RolloutError(
                    f"worker {worker_id} failed at episode {ep} step {step_idx}: {exc}"
                ) from exc
            terminal = out.done and not config.bootstrap_on_horizon
            records.append(
                RolloutRecord(
                    blue_obs, red_obs, a_b, a_r, pol_b, pol_r,
                    np.asarray(blue_mask), np.asarray(red_mask),
                    out.blue_reward, out.blue_obs, out.red_obs,
                    np.asarray(out.blue_mask), np.asarray(out.red_mask),
                    done=terminal,
                )
            )
            blue_obs, red_obs = out.blue_obs, out.red_obs
            blue_mask, red_mask = out.blue_mask, out.red_mask
            if out.done:
                break
        metrics.append(env.metrics)
    return records, metrics


def collect_rollouts(env_factory, blue: NetworkParams, red: NetworkParams,
                     config: TrainConfig):
    """Phase 1: run workers over episodes_per_epoch episodes.

    Workers read a fixed parameter snapshot and own independent RNG streams;
    results merge in worker order, so the buffer is reproducible regardless
    of scheduling. Returns (RolloutBuffer, list of EpisodeMetrics).
    """
    n_workers = min(config.num_workers, config.episodes_per_epoch)
    assignments = [
        list(range(w, config.episodes_per_epoch, n_workers)) for w in range(n_workers)
    ]
    buffer = RolloutBuffer(
        max(config.rollout_horizon, config.episodes_per_epoch * config.episode_length)
    )
    all_metrics = []
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        futures = [
            pool.submit(_worker_collect, w, env_factory, blue, red, config,
                        assignments[w])
            for w in range(n_workers)
        ]
        for fut in futures:
            records, metrics = fut.result()
            buffer.extend(records)
            all_metrics.extend(metrics)
    return buffer, all_metrics


def _stack_records(records):
    return (
        np.stack([r.blue_obs for r in records]),
        np.stack([r.red_obs for r in records]),
        np.stack([r.next_blue_obs for r in records]),
        np.stack([r.next_red_obs for r in records]),
        np.stack([r.next_blue_mask for r in records]),
        np.stack([r.next_red_mask for r in records]),
        np.array([r.blue_reward for r in records]),
        np.array([r.done for r in records], dtype=bool),
    )


def td_targets(records, critic: NetworkParams, blue: NetworkParams,
               red: NetworkParams, discount: float,
               num_blue_actions: int) -> np.ndarray:
    """Policy-expectation TD targets y = r + gamma * E_pi[Q(s')].

    The expectation runs over both agents' current mask-respecting policies
    at the successor observations; terminal records use y = r. No gradient
    flows through targets (everything here is detached numpy).
    """
    if not records:
        raise ValueError("empty batch")
    (_, _, nbo, nro, nbm, nrm, rewards, done) = _stack_records(records)
    mats = critic_matrices_batch(critic, nbo, nro, num_blue_actions)
    pi_b = policy_probs_batch(blue, nbo, nbm)
    pi_r = policy_probs_batch(red, nro, nrm)
    q_hat = np.einsum("bi,bij,bj->b", pi_b, mats, pi_r)
    return rewards + discount * q_hat * (~done)


def td_targets_naive(records, critic, blue, red, discount, num_blue_actions):
    """Double-loop oracle for the policy expectation; test reference only."""
    ys = []
    for r in records:
        game = neural.critic_forward(
            critic, r.next_blue_obs, r.next_red_obs, num_blue_actions
        )
        pb = neural.policy_forward(blue, r.next_blue_obs, r.next_blue_mask).probs
        pr = neural.policy_forward(red, r.next_red_obs, r.next_red_mask).probs
        q_hat = 0.0
        for i in range(len(pb)):
            for j in range(len(pr)):
                q_hat += pb[i] * pr[j] * game.values[i, j]
        ys.append(r.blue_reward if r.done else r.blue_reward + discount * q_hat)
    return np.array(ys)


def _minibatches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def update_critic(critic: NetworkParams, buffer: RolloutBuffer, blue: NetworkParams,
                  red: NetworkParams, config: TrainConfig, rng: np.random.Generator,
                  num_blue_actions: int):
    """Phase 2: K shuffled passes of Huber regression on the taken joint entry.

    Targets are recomputed from the live critic once per pass (no target
    network) unless config.frozen_targets pins them to the pre-update critic.
    Returns (critic, mean loss of the final pass, skipped minibatch count).
    """
    records = buffer.records
    if not records:
        raise ValueError("empty rollout buffer")
    n = len(records)
    n_red = len(records[0].red_mask)
    blue_actions = np.array([r.blue_action for r in records])
    red_actions = np.array([r.red_action for r in records])
    bo = np.stack([r.blue_obs for r in records])
    ro = np.stack([r.red_obs for r in records])
    joint_inputs = np.concatenate([bo, ro], axis=1)
    flat_idx = blue_actions * n_red + red_actions

    beta1, beta2 = config.adam_betas
    skipped = 0
    mean_loss = 0.0
    targets = td_targets(records, critic, blue, red, config.discount, num_blue_actions)
    for k in range(config.critic_epochs):
        if k > 0 and not config.frozen_targets:
            targets = td_targets(
                records, critic, blue, red, config.discount, num_blue_actions
            )
        losses = []
        for idx in _minibatches(n, config.batch_size, rng):
            out, cache = forward(critic, joint_inputs[idx])
            preds = out[np.arange(len(idx)), flat_idx[idx]]
            loss, dpred = huber_loss_batch(preds, targets[idx], config.huber_delta)
            g = np.zeros_like(out)
            g[np.arange(len(idx)), flat_idx[idx]] = dpred / len(idx)
            grads = backward(critic, cache, g)
            try:
                adam_step(critic, grads, config.critic_lr, beta1, beta2)
            except GradientOverflowError:
                skipped += 1
                continue
            losses.append(loss.mean())
        mean_loss = float(np.mean(losses)) if losses else float("nan")
    return critic, mean_loss, skipped


def stage_equilibria(critic: NetworkParams, records, num_blue_actions: int,
                     check_tol: float | None = 1e-6, cache: dict | None = None):
    """Phase 3 targets: the stage-game equilibrium of the critic's joint Q
    matrix at every sampled state, order-aligned with the records.

    Repeated (observations, masks) keys hit the optional cache; the solver is
    pure, so cached results are exact replays.
    """
    if not records:
        raise ValueError("empty batch")
    bo = np.stack([r.blue_obs for r in records])
    ro = np.stack([r.red_obs for r in records])
    mats = critic_matrices_batch(critic, bo, ro, num_blue_actions)
    out = []
    for i, rec in enumerate(records):
        key = None
        if cache is not None:
            key = (rec.blue_obs.tobytes(), rec.red_obs.tobytes(),
                   rec.blue_mask.tobytes(), rec.red_mask.tobytes())
            hit = cache.get(key)
            if hit is not None:
                out.append(hit)
                continue
        game = PayoffMatrix(mats[i], rec.blue_mask, rec.red_mask)
        try:
            eq = solve_zero_sum(game)
        except Exception as exc:
            raise RuntimeError(f"stage game solve failed at record {i}: {exc}") from exc
        if check_tol is not None and not saddle_check(game, eq, check_tol).passed:
            raise RuntimeError(f"stage equilibrium failed saddle check at record {i}")
        if cache is not None:
            cache[key] = eq
        out.append(eq)
    return out


def update_policies(blue: NetworkParams, red: NetworkParams, buffer: RolloutBuffer,
                    equilibria, config: TrainConfig, rng: np.random.Generator):
    """Phase 3: one pass of cross-entropy alignment toward fixed equilibria.

    Equilibrium strategies are constants; gradients flow only through the
    policy logits ((pi - sigma) on valid actions). Returns
    (blue, red, (mean blue loss, mean red loss), skipped count).
    """
    records = buffer.records
    if len(equilibria) != len(records):
        raise ValueError("equilibria must be order-aligned with the buffer")
    n = len(records)
    beta1, beta2 = config.adam_betas
    skipped = 0
    mean_losses = []
    for agent, params, get_obs, get_mask, get_target in (
        ("blue", blue, lambda r: r.blue_obs, lambda r: r.blue_mask,
         lambda e: e.blue_strategy),
        ("red", red, lambda r: r.red_obs, lambda r: r.red_mask,
         lambda e: e.red_strategy),
    ):
        obs = np.stack([get_obs(r) for r in records])
        masks = np.stack([get_mask(r) for r in records])
        targets = np.stack([get_target(e) for e in equilibria])
        losses = []
        for idx in _minibatches(n, config.batch_size, rng):
            logits, cache = forward(params, obs[idx])
            probs = masked_softmax(logits, masks[idx])
            valid = masks[idx] != 0
            p = np.where(valid, np.maximum(probs, 1e-12), 1.0)
            loss = float(-np.sum(targets[idx] * np.log(p)) / len(idx))
            g = np.where(valid, probs - targets[idx], 0.0) / len(idx)
            grads = backward(params, cache, g)
            try:
                adam_step(params, grads, config.policy_lr, beta1, beta2)
            except GradientOverflowError:
                skipped += 1
                continue
            losses.append(loss)
        mean_losses.append(float(np.mean(losses)) if losses else float("nan"))
    return blue, red, tuple(mean_losses), skipped


@dataclass
class EpochRow:
    epoch: int
    mean_reward: float
    std_reward: float
    critic_loss: float
    blue_policy_loss: float
    red_policy_loss: float
    mean_attack_attempts: float
    mean_impacts: float
    blue_action_freqs: np.ndarray
    red_action_freqs: np.ndarray


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _epoch_row(epoch, metrics_list, critic_loss, policy_losses):
    finals = np.array([m.cumulative_reward[-1] for m in metrics_list])
    attempts = np.array([m.attack_attempts[-1] for m in metrics_list])
    impacts = np.array([m.successful_impacts[-1] for m in metrics_list])
    blue_counts = np.sum([m.blue_action_counts for m in metrics_list], axis=0)
    red_counts = np.sum([m.red_action_counts for m in metrics_list], axis=0)
    return EpochRow(
        epoch=epoch,
        mean_reward=float(finals.mean()),
        std_reward=float(finals.std(ddof=1)) if len(finals) > 1 else 0.0,
        critic_loss=critic_loss,
        blue_policy_loss=policy_losses[0],
        red_policy_loss=policy_losses[1],
        mean_attack_attempts=float(attempts.mean()),
        mean_impacts=float(impacts.mean()),
        blue_action_freqs=blue_counts / max(blue_counts.sum(), 1),
        red_action_freqs=red_counts / max(red_counts.sum(), 1),
    )


def train(env_factory, config: TrainConfig, num_epochs: int,
          checkpoint_every: int = 50, checkpoint_fn=None,
          progress_fn=None) -> TrainReport:
    """Run the full three-phase loop for num_epochs epochs.

    ``checkpoint_fn(tag, networks)`` is invoked for the initial snapshot, at
    the configured cadence, and at the end. Fully deterministic given
    (seed, config, environment factory).
    """
    probe = env_factory()
    spec = probe.spec
    rng = np.random.default_rng(config.seed)
    blue, red, critic = build_networks(spec, config, rng)
    networks = {"policy_blue": blue, "policy_red": red, "critic": critic}
    if checkpoint_fn is not None:
        checkpoint_fn("initial", networks)
    report = TrainReport()
    for epoch in range(num_epochs):
        try:
            buffer, metrics_list = collect_rollouts(env_factory, blue, red, config)
            critic, critic_loss, _ = update_critic(
                critic, buffer, blue, red, config, rng, spec.num_blue_actions
            )
            equilibria = stage_equilibria(
                critic, buffer.records, spec.num_blue_actions,
                check_tol=None, cache={},
            )
            blue, red, policy_losses, _ = update_policies(
                blue, red, buffer, equilibria, config, rng
            )
        except Exception as exc:
            raise RuntimeError(f"training aborted at epoch {epoch}: {exc}") from exc
        row = _epoch_row(epoch, metrics_list, critic_loss, policy_losses)
        report.rows.append(row)
        if progress_fn is not None:
            progress_fn(row)
        if checkpoint_fn is not None and checkpoint_every and (
            (epoch + 1) % checkpoint_every == 0
        ):
            checkpoint_fn(f"epoch{epoch + 1:05d}", networks)
    if checkpoint_fn is not None:
        checkpoint_fn("final", networks)
    return report


def evaluate(blue: NetworkParams, scripted_red, env_factory, config: TrainConfig,
             episodes: int = 64, greedy: bool = False):
    """Blue (sampling or greedy) against a scripted Red over full episodes.

    ``scripted_red(env)`` returns Red's action index. Returns
    (AggregateStats over cumulative reward, list of EpisodeMetrics,
    per-step blue/red category arrays of shape (episodes, T)).
    """
    rng = np.random.default_rng(config.seed * WORKER_SEED_STRIDE + 777)
    metrics_list = []
    reward_series = []
    blue_cats = []
    red_cats = []
    for ep in range(episodes):
        env = env_factory()
        blue_obs, _, blue_mask, _ = env.reset(seed=int(rng.integers(1 << 62)))
        b_row, r_row = [], []
        done = False
        while not done:
            pol = neural.policy_forward(blue, blue_obs, blue_mask)
            if greedy:
                a_b = int(np.argmax(pol.probs))
            else:
                a_b = _sample(rng, pol.probs)
            a_r = scripted_red(env)
            out = env.step(a_b, a_r)
            b_row.append(env.blue_action_category(a_b))
            r_row.append(env.red_action_category(a_r))
            blue_obs, blue_mask = out.blue_obs, out.blue_mask
            done = out.done
        metrics_list.append(env.metrics)
        reward_series.append(env.metrics.cumulative_reward)
        blue_cats.append(b_row)
        red_cats.append(r_row)
    stats = aggregate_series(reward_series)
    return stats, metrics_list, np.array(blue_cats), np.array(red_cats)
