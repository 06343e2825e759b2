"""Group-relative policy optimization of the selection policy.

One "action" is the entire m-device selection of a round, so the importance
ratio uses the whole selection's log-probability (the product over token
steps), never per-token ratios. Advantages are reverse cumulative sums of
rewards normalized per round index across the episode batch; there is no
critic. A PPO variant with a learned value baseline is provided for
comparison.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .environment import Observation
from .nn import MLP, Adam
from .policy import EncoderStats, SelectionPolicy, encode_observation

METRICS_COLUMNS = ("iteration", "mean_reward", "mean_cwpem", "clip_fraction",
                   "approx_kl", "wall_time_s")


@dataclass
class TrainConfig:
    iterations: int = 100
    batch_episodes: int = 16
    epochs: int = 4
    lr: float = 3e-4
    clip: float = 0.2
    gamma: float = 1.0
    std_floor: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.clip < 1.0):
            raise ValueError("clip must be in (0, 1)")
        if self.batch_episodes < 2:
            raise ValueError("need at least 2 episodes per batch for normalization")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be positive")


@dataclass
class EpisodeBatch:
    """Per-round records for a batch of equal-length episodes."""

    observations: list[list[Observation]]
    selections: list[list[list[int]]]
    logprobs_old: np.ndarray   # (episodes, rounds)
    rewards: np.ndarray        # (episodes, rounds)

    @property
    def num_episodes(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]


def _episode_seed(base: int, iteration: int, episode: int) -> int:
    return int(np.random.SeedSequence((base, iteration, episode)).generate_state(1)[0])


def collect_episodes(env, policy: SelectionPolicy, n_episodes: int,
                     base_seed: int, iteration: int = 0) -> EpisodeBatch:
    """Roll a batch of episodes under the policy's current parameters."""
    all_obs, all_sel = [], []
    logprobs = np.zeros((n_episodes, env.horizon))
    rewards = np.zeros((n_episodes, env.horizon))
    for i in range(n_episodes):
        seed = _episode_seed(base_seed, iteration, i)
        rng = np.random.default_rng(np.random.SeedSequence((base_seed, iteration, i, 1)))
        obs = env.reset(seed)
        ep_obs, ep_sel = [], []
        for t in range(env.horizon):
            sel, lp = policy.sample(obs, rng)
            res = env.step(sel)
            ep_obs.append(obs)
            ep_sel.append(sel)
            logprobs[i, t] = lp
            rewards[i, t] = res.reward
            obs = res.next_obs
        all_obs.append(ep_obs)
        all_sel.append(ep_sel)
    return EpisodeBatch(all_obs, all_sel, logprobs, rewards)


def normalize_rewards(rewards: np.ndarray, std_floor: float = 1e-8) -> np.ndarray:
    """Center and scale rewards per round index across the episode batch."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[0] < 2:
        raise ValueError("need at least 2 episodes")
    mean = rewards.mean(axis=0)
    std = rewards.std(axis=0)
    return (rewards - mean) / (std + std_floor)


def advantages(norm_rewards: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Reverse cumulative sum per episode, discounted when gamma < 1."""
    norm_rewards = np.asarray(norm_rewards, dtype=np.float64)
    adv = np.zeros_like(norm_rewards)
    running = np.zeros(norm_rewards.shape[0])
    for t in range(norm_rewards.shape[1] - 1, -1, -1):
        running = norm_rewards[:, t] + gamma * running
        adv[:, t] = running
    return adv


def grpo_objective(policy: SelectionPolicy, params: np.ndarray,
                   batch: EpisodeBatch, adv: np.ndarray, clip: float):
    """Clipped-surrogate objective value, ascent gradient and diagnostics.

    Per record: J = min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) with
    ratio = exp(logprob_new - logprob_old) of the whole selection.
    """
    grad = np.zeros_like(params)
    total = 0.0
    clipped = 0
    kl = 0.0
    count = batch.num_episodes * batch.horizon
    for i in range(batch.num_episodes):
        for t in range(batch.horizon):
            lp_new, glp = policy.logprob_grad(batch.observations[i][t],
                                              batch.selections[i][t], params)
            ratio = np.exp(lp_new - batch.logprobs_old[i, t])
            if not np.isfinite(ratio):
                raise FloatingPointError(
                    f"non-finite ratio at episode {i} round {t}: "
                    f"new={lp_new} old={batch.logprobs_old[i, t]}")
            a = adv[i, t]
            unclipped = ratio * a
            clipped_val = np.clip(ratio, 1.0 - clip, 1.0 + clip) * a
            if unclipped <= clipped_val:
                total += unclipped
                grad += (a * ratio) * glp
            else:
                total += clipped_val
                clipped += 1
            kl += batch.logprobs_old[i, t] - lp_new
    return (total / count, grad / count, clipped / count, kl / count)


def fit_encoder_stats(policy: SelectionPolicy, env, episodes: int = 8,
                      seed: int = 0) -> EncoderStats:
    """Freeze z-score statistics from seeded random-policy warmup episodes."""
    vectors = []
    for i in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7C, i)))
        obs = env.reset(_episode_seed(seed, 0xE7C, i))
        for _ in range(env.horizon):
            vectors.append(encode_observation(obs))
            sel = rng.choice(env.num_devices, size=env.select_size,
                             replace=False).tolist()
            obs = env.step(sel).next_obs
        vectors.append(encode_observation(obs))
    return EncoderStats.fit(np.asarray(vectors))


def _write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRICS_COLUMNS})


def train(policy: SelectionPolicy, env, cfg: TrainConfig,
          metrics_path=None, progress=None) -> list[dict]:
    """GRPO ascent in the given environment; returns per-iteration metrics."""
    if policy.stats is None:
        policy.stats = fit_encoder_stats(policy, env, seed=cfg.seed)
    opt = Adam(policy.num_params, lr=cfg.lr)
    metrics = []
    start = time.perf_counter()
    for it in range(cfg.iterations):
        params_old = policy.params.copy()
        batch = collect_episodes(env, policy, cfg.batch_episodes, cfg.seed, it)
        adv = advantages(normalize_rewards(batch.rewards, cfg.std_floor), cfg.gamma)
        clip_fraction = 0.0
        approx_kl = 0.0
        for _ in range(cfg.epochs):
            _, grad, clip_fraction, approx_kl = grpo_objective(
                policy, policy.params, batch, adv, cfg.clip)
            policy.params = opt.step(policy.params, -grad)
        row = {
            "iteration": it,
            "mean_reward": float(batch.rewards.mean()),
            "mean_cwpem": float(batch.rewards.sum(axis=1).mean()),
            "clip_fraction": float(clip_fraction),
            "approx_kl": float(approx_kl),
            "wall_time_s": time.perf_counter() - start,
        }
        metrics.append(row)
        if progress is not None:
            progress(row)
    if metrics_path is not None:
        _write_metrics(metrics_path, metrics)
    return metrics


def train_ppo(policy: SelectionPolicy, env, cfg: TrainConfig,
              metrics_path=None, progress=None,
              value_hidden: tuple[int, ...] = (64,)) -> list[dict]:
    """PPO variant: a learned value baseline replaces group normalization.

    Advantages are raw returns-to-go minus the value prediction; the value
    head is MSE-fit to returns each epoch.
    """
    if policy.stats is None:
        policy.stats = fit_encoder_stats(policy, env, seed=cfg.seed)
    value_net = MLP((policy.obs_dim,) + value_hidden + (1,))
    value_params = value_net.init_params(np.random.default_rng(cfg.seed + 1))
    opt = Adam(policy.num_params, lr=cfg.lr)
    vopt = Adam(value_net.num_params, lr=cfg.lr)
    metrics = []
    start = time.perf_counter()
    for it in range(cfg.iterations):
        batch = collect_episodes(env, policy, cfg.batch_episodes, cfg.seed, it)
        returns = advantages(batch.rewards, cfg.gamma)
        enc = np.asarray([
            encode_observation(batch.observations[i][t], policy.stats)
            for i in range(batch.num_episodes) for t in range(batch.horizon)
        ])
        flat_returns = returns.ravel()
        clip_fraction = 0.0
        approx_kl = 0.0
        value_mse = 0.0
        for _ in range(cfg.epochs):
            values, cache = value_net.forward(value_params, enc)
            err = values[:, 0] - flat_returns
            value_mse = float(np.mean(err ** 2))
            dout = (2.0 * err / err.size)[:, None]
            value_params = vopt.step(value_params,
                                     value_net.backward(value_params, cache, dout))
            adv = returns - values[:, 0].reshape(returns.shape)
            _, grad, clip_fraction, approx_kl = grpo_objective(
                policy, policy.params, batch, adv, cfg.clip)
            policy.params = opt.step(policy.params, -grad)
        row = {
            "iteration": it,
            "mean_reward": float(batch.rewards.mean()),
            "mean_cwpem": float(batch.rewards.sum(axis=1).mean()),
            "clip_fraction": float(clip_fraction),
            "approx_kl": float(approx_kl),
            "wall_time_s": time.perf_counter() - start,
            "value_mse": value_mse,
        }
        metrics.append(row)
        if progress is not None:
            progress(row)
    if metrics_path is not None:
        _write_metrics(metrics_path, metrics)
    return metrics
