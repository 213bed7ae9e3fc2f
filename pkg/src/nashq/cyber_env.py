"""Small cyber-defense Markov game: chain of hosts, five-level kill chain,
decoys/blocks/alerts, and a scripted aggressive "B-line" Red.

Both agents move simultaneously; Blue's effect resolves before Red's within a
step so blocks and decoys placed this tick already matter. Red's reward is
the exact negation of Blue's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .game_core import EpisodeMetrics, MarkovGameSpec, StepOutcome, metrics_update

# kill-chain levels
UNKNOWN, DISCOVERED, SCANNED, EXPLOITED, PRIVILEGED = range(5)
LEVEL_NAMES = ("Unknown", "Discovered", "Scanned", "Exploited", "Privileged")

# action categories, in catalog order
BLUE_CATEGORIES = ("Sleep", "Analyse", "Restore", "Decoy", "Block")
RED_CATEGORIES = ("Discover", "Scan", "Exploit", "Escalate", "Impact")


class MaskViolationError(RuntimeError):
    """A masked action was passed to step(); callers must respect legal_mask."""


@dataclass(frozen=True)
class CyberConfig:
    num_hosts: int = 5
    p_exploit: float = 0.8
    p_detect: float = 0.7
    episode_length: int = 100
    w_exploited: float = 0.1
    w_privileged: float = 0.5
    w_impact: float = 10.0
    w_restore_cost: float = 0.1
    w_block_cost: float = 0.05

    def __post_init__(self):
        if self.num_hosts < 2:
            raise ValueError("need at least 2 hosts")
        for p in (self.p_exploit, self.p_detect):
            if not (0.0 <= p <= 1.0):
                raise ValueError("probabilities must lie in [0, 1]")
        for w in (self.w_exploited, self.w_privileged, self.w_impact,
                  self.w_restore_cost, self.w_block_cost):
            if w < 0:
                raise ValueError("reward weights must be >= 0")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")

    @property
    def server(self) -> int:
        """The operational server is the last host in the chain."""
        return self.num_hosts - 1

    @property
    def num_actions(self) -> int:
        return 1 + 4 * self.num_hosts


def deterministic_config(**overrides) -> CyberConfig:
    """Named preset with p_exploit = p_detect = 1 so traces are hand-checkable."""
    kwargs = dict(p_exploit=1.0, p_detect=1.0)
    kwargs.update(overrides)
    return CyberConfig(**kwargs)


@dataclass
class CyberState:
    red_level: np.ndarray      # per-host kill-chain level
    decoy: np.ndarray          # per-host decoy present
    blocked: np.ndarray        # per-host block active
    alert: np.ndarray          # this-step detection flags (Blue-visible)
    analysed: np.ndarray       # Blue's last-known compromise view
    red_seen_block: np.ndarray # Red learned of the block via a failed exploit
    t: int = 0


def initial_state(config: CyberConfig) -> CyberState:
    H = config.num_hosts
    state = CyberState(
        red_level=np.zeros(H, dtype=np.int64),
        decoy=np.zeros(H, dtype=bool),
        blocked=np.zeros(H, dtype=bool),
        alert=np.zeros(H, dtype=bool),
        analysed=np.zeros(H, dtype=bool),
        red_seen_block=np.zeros(H, dtype=bool),
    )
    state.red_level[0] = DISCOVERED
    return state


# --- action catalog ------------------------------------------------------------
# index 0 = Sleep/Discover, then one block per category ordered by host:
# [Analyse(0..H-1)][Restore(...)][Decoy(...)][Block(...)] for Blue,
# [Scan(...)][Exploit(...)][Escalate(...)][Impact(...)] for Red.


def decompose_action(index: int, num_hosts: int):
    """(category, host) for an action index; host is None for category 0."""
    if index == 0:
        return 0, None
    category, host = divmod(index - 1, num_hosts)
    return category + 1, host


def compose_action(category: int, host, num_hosts: int) -> int:
    if category == 0:
        return 0
    return 1 + (category - 1) * num_hosts + host


def blue_action_name(index: int, num_hosts: int) -> str:
    cat, host = decompose_action(index, num_hosts)
    return BLUE_CATEGORIES[cat] if host is None else f"{BLUE_CATEGORIES[cat]}({host})"


def red_action_name(index: int, num_hosts: int) -> str:
    cat, host = decompose_action(index, num_hosts)
    return RED_CATEGORIES[cat] if host is None else f"{RED_CATEGORIES[cat]}({host})"


def legal_mask(state: CyberState, config: CyberConfig):
    """(blue_mask, red_mask) for the current state."""
    H = config.num_hosts
    n = config.num_actions
    blue = np.zeros(n, dtype=np.int8)
    red = np.zeros(n, dtype=np.int8)
    blue[0] = 1  # Sleep
    red[0] = 1   # Discover
    for h in range(H):
        blue[compose_action(1, h, H)] = 1  # Analyse
        blue[compose_action(2, h, H)] = 1  # Restore
        blue[compose_action(3, h, H)] = 0 if state.decoy[h] else 1
        blue[compose_action(4, h, H)] = 0 if state.blocked[h] else 1
        level = state.red_level[h]
        red[compose_action(1, h, H)] = 1 if level == DISCOVERED else 0
        red[compose_action(2, h, H)] = 1 if level == SCANNED else 0
        red[compose_action(3, h, H)] = 1 if level == EXPLOITED else 0
        red[compose_action(4, h, H)] = (
            1 if (h == config.server and level == PRIVILEGED) else 0
        )
    return blue, red


def encode_obs(state: CyberState, config: CyberConfig):
    """Partial observations: Blue sees only defensive artifacts and alerts,
    Red sees its own kill-chain progress and any blocks it has run into."""
    H = config.num_hosts
    blue = np.zeros(4 * H)
    for h in range(H):
        blue[4 * h + 0] = float(state.alert[h])
        blue[4 * h + 1] = float(state.analysed[h])
        blue[4 * h + 2] = float(state.decoy[h])
        blue[4 * h + 3] = float(state.blocked[h])
    red = np.zeros(6 * H)
    for h in range(H):
        red[5 * h + state.red_level[h]] = 1.0
    red[5 * H :] = state.red_seen_block.astype(np.float64)
    return blue, red


def bline_policy(state: CyberState, config: CyberConfig) -> int:
    """Scripted aggressive Red: Impact > Escalate > Exploit > Scan > Discover,
    host ties broken toward the highest index (fastest route to the server)."""
    H = config.num_hosts
    server = config.server
    if state.red_level[server] == PRIVILEGED:
        return compose_action(4, server, H)
    for category, level in ((3, EXPLOITED), (2, SCANNED), (1, DISCOVERED)):
        hosts = np.flatnonzero(state.red_level == level)
        if hosts.size:
            return compose_action(category, int(hosts.max()), H)
    return 0  # Discover


class CyberEnv:
    """One environment instance, owned by a single rollout worker."""

    def __init__(self, config: CyberConfig | None = None):
        self.config = config or CyberConfig()
        H = self.config.num_hosts
        self.spec = MarkovGameSpec(
            num_blue_actions=self.config.num_actions,
            num_red_actions=self.config.num_actions,
            blue_obs_dim=4 * H,
            red_obs_dim=6 * H,
            discount=0.99,
        )
        self.num_blue_categories = len(BLUE_CATEGORIES)
        self.num_red_categories = len(RED_CATEGORIES)
        self.state = initial_state(self.config)
        self._rng = np.random.default_rng(0)
        self.metrics = EpisodeMetrics(self.num_blue_categories, self.num_red_categories)
        self.trace: list[str] | None = None

    def blue_action_category(self, a: int) -> int:
        return decompose_action(a, self.config.num_hosts)[0]

    def red_action_category(self, a: int) -> int:
        return decompose_action(a, self.config.num_hosts)[0]

    def enable_trace(self):
        self.trace = []

    def reset(self, seed: int):
        self._rng = np.random.default_rng(seed)
        self.state = initial_state(self.config)
        self.metrics = EpisodeMetrics(self.num_blue_categories, self.num_red_categories)
        if self.trace is not None:
            self.trace = []
        blue_obs, red_obs = encode_obs(self.state, self.config)
        blue_mask, red_mask = legal_mask(self.state, self.config)
        return blue_obs, red_obs, blue_mask, red_mask

    def step(self, blue_action: int, red_action: int) -> StepOutcome:
        cfg = self.config
        state = self.state
        H = cfg.num_hosts
        blue_mask, red_mask = legal_mask(state, cfg)
        if not blue_mask[blue_action]:
            raise MaskViolationError(
                f"blue action {blue_action} masked at t={state.t}"
            )
        if not red_mask[red_action]:
            raise MaskViolationError(
                f"red action {red_action} masked at t={state.t}"
            )

        state.alert[:] = False
        t_before = state.t

        # Blue resolves first
        b_cat, b_host = decompose_action(blue_action, H)
        restored = False
        if b_cat == 1:  # Analyse: refresh the compromise view of this host
            state.analysed[b_host] = state.red_level[b_host] >= EXPLOITED
        elif b_cat == 2:  # Restore: rebuild, dropping Red to at most Discovered
            state.red_level[b_host] = min(state.red_level[b_host], DISCOVERED)
            state.decoy[b_host] = False
            restored = True
        elif b_cat == 3:
            state.decoy[b_host] = True
        elif b_cat == 4:
            state.blocked[b_host] = True

        # Red resolves second; preconditions are re-checked against the
        # post-Blue state, so a same-tick Restore genuinely thwarts Red.
        r_cat, r_host = decompose_action(red_action, H)
        impact_attempted = r_cat == 4
        impact_succeeded = False
        if r_cat == 0:  # Discover: chain-adjacent to any foothold, plus host 0
            foothold = state.red_level >= EXPLOITED
            reachable = np.zeros(H, dtype=bool)
            reachable[0] = True
            reachable[:-1] |= foothold[1:]
            reachable[1:] |= foothold[:-1]
            for h in np.flatnonzero(reachable):
                state.red_level[h] = max(state.red_level[h], DISCOVERED)
        elif r_cat == 1:
            if state.red_level[r_host] == DISCOVERED:
                state.red_level[r_host] = SCANNED
        elif r_cat == 2:
            if state.red_level[r_host] == SCANNED:
                if state.blocked[r_host]:
                    state.red_seen_block[r_host] = True
                    if self._rng.random() < cfg.p_detect:
                        state.alert[r_host] = True
                elif state.decoy[r_host]:
                    state.decoy[r_host] = False
                    state.alert[r_host] = True
                else:
                    if self._rng.random() < cfg.p_exploit:
                        state.red_level[r_host] = EXPLOITED
                        if self._rng.random() < cfg.p_detect:
                            state.alert[r_host] = True
        elif r_cat == 3:
            if state.red_level[r_host] == EXPLOITED:
                state.red_level[r_host] = PRIVILEGED
        elif r_cat == 4:
            impact_succeeded = (
                r_host == cfg.server and state.red_level[r_host] == PRIVILEGED
            )

        reward = -(
            cfg.w_exploited * float(np.sum(state.red_level == EXPLOITED))
            + cfg.w_privileged * float(np.sum(state.red_level == PRIVILEGED))
        )
        reward -= cfg.w_impact * float(impact_succeeded)
        reward -= cfg.w_restore_cost * float(restored)
        reward -= cfg.w_block_cost * float(np.sum(state.blocked))

        state.t += 1
        done = state.t >= cfg.episode_length

        metrics_update(
            self.metrics,
            b_cat,
            r_cat,
            reward,
            red_action_is_impact=impact_attempted,
            impact_succeeded=impact_succeeded,
        )
        if self.trace is not None:
            levels = "|".join(str(l) for l in state.red_level)
            self.trace.append(
                f"{t_before},{blue_action_name(blue_action, H)},"
                f"{red_action_name(red_action, H)},{reward!r},{levels}"
            )

        blue_obs, red_obs = encode_obs(state, cfg)
        new_blue_mask, new_red_mask = legal_mask(state, cfg)
        return StepOutcome(blue_obs, red_obs, reward, new_blue_mask, new_red_mask, done)
