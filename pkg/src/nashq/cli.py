"""Command-line front end: training, evaluation, and verification runs.

One JSON config file describes a run; the only flag overrides are ``--seed``
and ``--output-dir`` (plus ``--greedy`` for eval), so the config copied into
the output directory is the complete experiment record.

CSV schemas (column order is part of the contract, reals use 17 significant
digits):

* ``train_metrics.csv``: epoch, mean_reward, std_reward, critic_loss,
  blue_policy_loss, red_policy_loss, mean_attack_attempts, mean_impacts,
  blue_freq_<category...>, red_freq_<category...>.
* ``eval_timeseries.csv``: t, mean_cumulative_reward, std_cumulative_reward,
  mean_attempts, mean_impacts, blue_freq_<category...>, red_freq_<category...>
  (frequencies are per-timestep across episodes).
* ``eval_summary.csv``: one row with the final-timestep aggregates.

Every CSV is written to a temp file and renamed into place, so an aborted run
never leaves a truncated file behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import neural
from .cyber_env import (
    BLUE_CATEGORIES,
    RED_CATEGORIES,
    CyberConfig,
    CyberEnv,
    bline_policy,
    encode_obs,
    legal_mask,
)
from .matrix_nash import (
    PayoffMatrix,
    full_matrix,
    saddle_check,
    solve_zero_sum,
    support_enumeration,
)
from .neural import MixedStrategy, MlpSpec, backward, forward, init_params, masked_softmax
from .tabular import (
    FIXTURE_NAMES,
    TabularGameEnv,
    load_fixture,
    shapley_value_iteration,
    stage_matrices,
)
from .training import TrainConfig, evaluate, stage_equilibria, train


class ConfigError(ValueError):
    """Configuration file problem, annotated with a line number when known."""


@dataclass(frozen=True)
class RunConfig:
    mode: str = "train"
    epochs: int = 200
    output_dir: str = "run_output"
    checkpoint_in: str | None = None
    checkpoint_out: str | None = None
    eval_episodes: int = 64
    greedy: bool = False
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    env: dict = dataclasses.field(default_factory=lambda: {"kind": "cyber"})

    def __post_init__(self):
        if self.mode not in ("train", "eval", "verify"):
            raise ValueError(f"mode must be train, eval, or verify, got {self.mode!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.eval_episodes < 2:
            raise ValueError("eval_episodes must be >= 2 for aggregation")


_TOP_KEYS = {
    "mode", "epochs", "output_dir", "checkpoint_in", "checkpoint_out",
    "eval_episodes", "greedy", "train", "env",
}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_ENV_CYBER_KEYS = {"kind"} | {f.name for f in dataclasses.fields(CyberConfig)}
_ENV_FIXTURE_KEYS = {"kind", "name", "episode_length"}


def _key_line(text: str, key: str) -> int | None:
    """1-based line of the first occurrence of a JSON key, for diagnostics."""
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return None


def _reject_unknown(doc: dict, allowed: set, text: str, where: str):
    for key in doc:
        if key not in allowed:
            line = _key_line(text, key)
            at = f"line {line}: " if line else ""
            raise ConfigError(f"{at}unknown {where} key {key!r}")


def load_config(path) -> RunConfig:
    """Parse a JSON run config; unspecified keys take the defaults above."""
    try:
        text = open(path).read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, text, "config")

    train_doc = doc.get("train", {})
    if not isinstance(train_doc, dict):
        raise ConfigError("'train' must be an object")
    _reject_unknown(train_doc, _TRAIN_KEYS, text, "train")
    try:
        train_cfg = TrainConfig(**train_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from exc

    env_doc = dict(doc.get("env", {"kind": "cyber"}))
    kind = env_doc.get("kind", "cyber")
    if kind == "cyber":
        _reject_unknown(env_doc, _ENV_CYBER_KEYS, text, "env")
        probe = dict(env_doc)
        probe.pop("kind", None)
        try:
            CyberConfig(**probe)
        except ValueError as exc:
            raise ConfigError(f"invalid env config: {exc}") from exc
    elif kind == "fixture":
        _reject_unknown(env_doc, _ENV_FIXTURE_KEYS, text, "env")
        if env_doc.get("name") not in FIXTURE_NAMES:
            raise ConfigError(
                f"env.name must be one of {FIXTURE_NAMES}, got {env_doc.get('name')!r}"
            )
    else:
        raise ConfigError(f"env.kind must be 'cyber' or 'fixture', got {kind!r}")
    env_doc["kind"] = kind

    try:
        return RunConfig(
            mode=doc.get("mode", "train"),
            epochs=doc.get("epochs", 200),
            output_dir=doc.get("output_dir", "run_output"),
            checkpoint_in=doc.get("checkpoint_in"),
            checkpoint_out=doc.get("checkpoint_out"),
            eval_episodes=doc.get("eval_episodes", 64),
            greedy=doc.get("greedy", False),
            train=train_cfg,
            env=env_doc,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(config: RunConfig) -> dict:
    """JSON-ready mirror of a RunConfig; load_config inverts it exactly."""
    return {
        "mode": config.mode,
        "epochs": config.epochs,
        "output_dir": config.output_dir,
        "checkpoint_in": config.checkpoint_in,
        "checkpoint_out": config.checkpoint_out,
        "eval_episodes": config.eval_episodes,
        "greedy": config.greedy,
        "train": dataclasses.asdict(config.train),
        "env": dict(config.env),
    }


def make_env_factory(config: RunConfig):
    """Zero-argument environment constructor plus category-name lists."""
    env_doc = dict(config.env)
    kind = env_doc.pop("kind")
    if kind == "cyber":
        env_doc.setdefault("episode_length", config.train.episode_length)
        cyber_cfg = CyberConfig(**env_doc)
        factory = lambda: CyberEnv(cyber_cfg)  # noqa: E731
        return factory, list(BLUE_CATEGORIES), list(RED_CATEGORIES)
    game = load_fixture(env_doc["name"])
    length = env_doc.get("episode_length", config.train.episode_length)
    factory = lambda: TabularGameEnv(game, length)  # noqa: E731
    probe = factory()
    blue_names = [str(i) for i in range(probe.num_blue_categories)]
    red_names = [str(i) for i in range(probe.num_red_categories)]
    return factory, blue_names, red_names


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_csv(path, header, rows):
    """Atomic CSV write: temp file in the target directory, then rename."""
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".csv.tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(",".join(header) + "\n")
            for row in rows:
                f.write(",".join(_fmt(v) for v in row) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _prepare_output_dir(config: RunConfig, config_path=None):
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    probe = os.path.join(out, ".write_probe")
    with open(probe, "w") as f:
        f.write("")
    os.unlink(probe)
    if config_path is not None and os.path.exists(config_path):
        dest = os.path.join(out, "config.json")
        if os.path.abspath(config_path) != os.path.abspath(dest):
            shutil.copyfile(config_path, dest)
    else:
        with open(os.path.join(out, "config.json"), "w") as f:
            json.dump(config_to_dict(config), f, indent=2)
    return out


def run_train(config: RunConfig, config_path=None) -> int:
    """Train per the config; emit train_metrics.csv and checkpoints."""
    try:
        out = _prepare_output_dir(config, config_path)
    except OSError as exc:
        print(f"error: output_dir not writable: {exc}", file=sys.stderr)
        return 1
    factory, blue_names, red_names = make_env_factory(config)
    header = [
        "epoch", "mean_reward", "std_reward", "critic_loss",
        "blue_policy_loss", "red_policy_loss", "mean_attack_attempts",
        "mean_impacts",
    ]
    header += [f"blue_freq_{n.lower()}" for n in blue_names]
    header += [f"red_freq_{n.lower()}" for n in red_names]

    def checkpoint_fn(tag, networks):
        name = config.checkpoint_out or "checkpoint"
        neural.save_checkpoint(os.path.join(out, f"{name}_{tag}.json"), networks)

    rows = []

    def progress_fn(row):
        rows.append(
            [row.epoch, row.mean_reward, row.std_reward, row.critic_loss,
             row.blue_policy_loss, row.red_policy_loss,
             row.mean_attack_attempts, row.mean_impacts]
            + list(row.blue_action_freqs) + list(row.red_action_freqs)
        )

    try:
        train(factory, config.train, config.epochs,
              checkpoint_fn=checkpoint_fn, progress_fn=progress_fn)
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _write_csv(os.path.join(out, "train_metrics.csv"), header, rows)
    return 0


def run_eval(config: RunConfig, config_path=None) -> int:
    """Evaluate a checkpointed Blue against the scripted B-line Red."""
    if config.checkpoint_in is None:
        print("error: eval requires checkpoint_in", file=sys.stderr)
        return 1
    if config.env.get("kind") != "cyber":
        print("error: eval runs against the cyber environment only", file=sys.stderr)
        return 1
    try:
        out = _prepare_output_dir(config, config_path)
    except OSError as exc:
        print(f"error: output_dir not writable: {exc}", file=sys.stderr)
        return 1
    try:
        networks = neural.load_checkpoint(config.checkpoint_in)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: cannot load checkpoint {config.checkpoint_in}: {exc}",
              file=sys.stderr)
        return 1
    if "policy_blue" not in networks:
        print("error: checkpoint has no 'policy_blue' network", file=sys.stderr)
        return 1
    blue = networks["policy_blue"]
    factory, blue_names, red_names = make_env_factory(config)
    probe = factory()
    if (blue.spec.input_dim != probe.spec.blue_obs_dim
            or blue.spec.output_dim != probe.spec.num_blue_actions):
        print(
            "error: checkpoint dimension mismatch: policy_blue is "
            f"{blue.spec.input_dim}->{blue.spec.output_dim} but the environment "
            f"needs {probe.spec.blue_obs_dim}->{probe.spec.num_blue_actions}",
            file=sys.stderr,
        )
        return 1

    stats, metrics_list, blue_cats, red_cats = evaluate(
        blue,
        lambda env: bline_policy(env.state, env.config),
        factory,
        config.train,
        episodes=config.eval_episodes,
        greedy=config.greedy,
    )
    attempts = np.array([m.attack_attempts for m in metrics_list], dtype=float)
    impacts = np.array([m.successful_impacts for m in metrics_list], dtype=float)
    n_episodes, horizon = blue_cats.shape

    header = ["t", "mean_cumulative_reward", "std_cumulative_reward",
              "mean_attempts", "mean_impacts"]
    header += [f"blue_freq_{n.lower()}" for n in blue_names]
    header += [f"red_freq_{n.lower()}" for n in red_names]
    rows = []
    for t in range(horizon):
        blue_freq = [
            float(np.mean(blue_cats[:, t] == c)) for c in range(len(blue_names))
        ]
        red_freq = [
            float(np.mean(red_cats[:, t] == c)) for c in range(len(red_names))
        ]
        rows.append(
            [t, stats.mean[t], stats.std[t],
             attempts[:, t].mean(), impacts[:, t].mean()]
            + blue_freq + red_freq
        )
    _write_csv(os.path.join(out, "eval_timeseries.csv"), header, rows)
    _write_csv(
        os.path.join(out, "eval_summary.csv"),
        ["episodes", "final_mean_reward", "final_std_reward",
         "final_mean_attempts", "final_mean_impacts"],
        [[n_episodes, stats.mean[-1], stats.std[-1],
          attempts[:, -1].mean(), impacts[:, -1].mean()]],
    )
    return 0


# --- verification properties ----------------------------------------------------


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    detail: str


def _fd_gradient_agrees(params, loss_and_grads, h=1e-5, rtol=1e-4):
    """Central finite differences over every parameter of a (small) network."""
    _, grads = loss_and_grads(params)
    worst = 0.0
    for i in range(len(params.layers)):
        for arr, g in ((params.layers[i][0], grads[i][0]),
                       (params.layers[i][1], grads[i][1])):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                lp, _ = loss_and_grads(params)
                arr[idx] = orig - h
                lm, _ = loss_and_grads(params)
                arr[idx] = orig
                fd = (lp - lm) / (2 * h)
                denom = max(abs(fd), abs(g[idx]), 1e-8)
                worst = max(worst, abs(fd - g[idx]) / denom)
    return worst <= rtol, worst


def _prop_saddle_random(rng, overrides):
    solver = overrides.get("solve_zero_sum", solve_zero_sum)
    worst = 0.0
    for _ in range(100):
        m, n = rng.integers(2, 7, size=2)
        game = full_matrix(rng.uniform(-10, 10, size=(m, n)))
        report = saddle_check(game, solver(game), tol=1e-6)
        worst = max(worst, report.max_row_deviation, report.max_col_deviation)
        if not report.passed:
            return False, f"saddle deviation {worst:.3g} exceeds 1e-6"
    return True, f"100 random games, worst deviation {worst:.3g}"


def _prop_support_enumeration(rng, overrides):
    solver = overrides.get("solve_zero_sum", solve_zero_sum)
    worst = 0.0
    for _ in range(40):
        m, n = rng.integers(2, 5, size=2)
        game = full_matrix(rng.uniform(-10, 10, size=(m, n)))
        gap = abs(solver(game).game_value - support_enumeration(game).game_value)
        worst = max(worst, gap)
        if gap > 1e-8:
            return False, f"value gap {gap:.3g} exceeds 1e-8"
    return True, f"40 games vs support enumeration, worst gap {worst:.3g}"


def _prop_huber_gradient(rng, overrides):
    huber = overrides.get("huber_loss_batch", neural.huber_loss_batch)
    params = init_params(MlpSpec(3, (4,), 4), rng)
    x = rng.normal(size=(5, 3))
    targets = rng.normal(size=5) * 3.0
    cols = rng.integers(0, 4, size=5)

    def loss_and_grads(p):
        out, cache = forward(p, x)
        preds = out[np.arange(5), cols]
        losses, dpred = huber(preds, targets)
        g = np.zeros_like(out)
        g[np.arange(5), cols] = dpred / 5
        return float(losses.mean()), backward(p, cache, g)

    ok, worst = _fd_gradient_agrees(params, loss_and_grads)
    return ok, f"worst relative error {worst:.3g} (tolerance 1e-4)"


def _prop_cross_entropy_gradient(rng, overrides):
    ce = overrides.get("cross_entropy_loss", neural.cross_entropy_loss)
    params = init_params(MlpSpec(3, (4,), 4), rng)
    x = rng.normal(size=(5, 3))
    mask = np.array([1, 1, 0, 1], dtype=np.int8)
    raw = rng.uniform(size=(5, 4)) * mask
    targets = raw / raw.sum(axis=1, keepdims=True)

    def loss_and_grads(p):
        logits, cache = forward(p, x)
        total = 0.0
        g = np.zeros_like(logits)
        for i in range(5):
            probs = masked_softmax(logits[i], mask)
            loss_i, grad_i = ce(
                MixedStrategy(probs, mask), MixedStrategy(targets[i], mask)
            )
            total += loss_i / 5
            g[i] = grad_i / 5
        return total, backward(p, cache, g)

    ok, worst = _fd_gradient_agrees(params, loss_and_grads)
    return ok, f"worst relative error {worst:.3g} (tolerance 1e-4)"


def _prop_shapley_fixtures(rng, overrides):
    for name in FIXTURE_NAMES:
        game = load_fixture(name)
        vt, _ = shapley_value_iteration(game, tol=1e-10)
        Q = stage_matrices(game, vt.values)
        for s in range(game.num_states):
            v = solve_zero_sum(full_matrix(Q[s])).game_value
            if abs(v - vt.values[s]) > 1e-8:
                return False, f"{name}: stage value inconsistent at state {s}"
    return True, f"{len(FIXTURE_NAMES)} fixtures Shapley-consistent at 1e-8"


def _prop_mask_safety(rng, overrides):
    env = CyberEnv(CyberConfig())
    critic = init_params(
        MlpSpec(env.spec.blue_obs_dim + env.spec.red_obs_dim, (16,),
                env.spec.num_blue_actions * env.spec.num_red_actions),
        rng,
    )
    env.reset(seed=int(rng.integers(1 << 31)))
    checked = 0
    while checked < 300:
        blue_mask, red_mask = legal_mask(env.state, env.config)
        blue_obs, red_obs = encode_obs(env.state, env.config)
        game = neural.critic_forward(
            critic, blue_obs, red_obs, env.spec.num_blue_actions,
            blue_mask=blue_mask, red_mask=red_mask,
        )
        eq = solve_zero_sum(game)
        if np.any(eq.blue_strategy[blue_mask == 0] != 0.0):
            return False, "equilibrium puts mass on a masked blue action"
        if np.any(eq.red_strategy[red_mask == 0] != 0.0):
            return False, "equilibrium puts mass on a masked red action"
        b = int(rng.choice(np.flatnonzero(blue_mask)))
        r = int(rng.choice(np.flatnonzero(red_mask)))
        out = env.step(b, r)
        checked += 1
        if out.done:
            env.reset(seed=int(rng.integers(1 << 31)))
    return True, f"{checked} reachable states, masks respected throughout"


_PROPERTIES = (
    ("matrix_nash.saddle_random", _prop_saddle_random),
    ("matrix_nash.support_enumeration_agreement", _prop_support_enumeration),
    ("neural.huber_gradient_check", _prop_huber_gradient),
    ("neural.cross_entropy_gradient_check", _prop_cross_entropy_gradient),
    ("tabular.shapley_fixture_consistency", _prop_shapley_fixtures),
    ("cyber_env.mask_safety", _prop_mask_safety),
)


def verify_properties(seed: int = 0, overrides: dict | None = None):
    """Run the oracle/property suites; overrides inject alternative
    implementations (used by mutation smoke tests)."""
    overrides = overrides or {}
    results = []
    for name, prop in _PROPERTIES:
        rng = np.random.default_rng(seed)
        try:
            passed, detail = prop(rng, overrides)
        except Exception as exc:  # a crashing property is a failing property
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(PropertyResult(name, passed, detail))
    return results


def run_verify(config: RunConfig, overrides: dict | None = None) -> int:
    results = verify_properties(seed=config.train.seed, overrides=overrides)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  {r.detail}")
    failures = [r.name for r in results if not r.passed]
    if failures:
        print(f"FAILED: {', '.join(failures)}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nashq",
        description="Nash Q-Network training, evaluation, and verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in ("train", "eval", "verify"):
        p = sub.add_parser(command)
        p.add_argument("config", help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", default=None)
        if command == "eval":
            p.add_argument("--greedy", action="store_true")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, seed=args.seed)
        )
    if args.output_dir is not None:
        config = dataclasses.replace(config, output_dir=args.output_dir)
    if args.command == "eval" and getattr(args, "greedy", False):
        config = dataclasses.replace(config, greedy=True)
    started = time.monotonic()
    if args.command == "train":
        status = run_train(config, config_path=args.config)
    elif args.command == "eval":
        status = run_eval(config, config_path=args.config)
    else:
        status = run_verify(config)
    elapsed = time.monotonic() - started
    print(f"{args.command} finished with status {status} in {elapsed:.1f}s")
    return status


if __name__ == "__main__":
    sys.exit(main())
