"""Executable checks of the theoretical guarantees on small instances.

Three families:

- selection/allocation decoupling: on enumerable instances, optimizing the
  reward jointly over (subset, resources) coincides with per-subset
  minimum-energy allocation followed by a subset argmax;
- the finite-horizon simulation bound: on finite toy MDPs, the return-based
  advantage computed under an approximate transition model deviates from the
  true one by at most (K^2 - K) * R_max * eps, with eps the worst-case total
  variation between the transition rows (plus K * gap when the reward
  tensors themselves differ);
- an empirical total-variation proxy for a trained transition model, using
  discretized accuracy bins (the model is a point predictor, so its
  predictive law is treated as a delta).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import flsim, solver
from .environment import Observation
from .flsim import StatState
from .nn import finite_diff_grad, max_rel_error
from .wireless import ChannelState, DeviceProfile, SystemConfig


# ---------------------------------------------------------------------------
# finite MDPs


@dataclass
class ToyMDP:
    """Finite-horizon tabular MDP: transitions P[s, a, s'], rewards r[s, a]."""

    transitions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        s, a, s2 = self.transitions.shape
        if s != s2 or self.rewards.shape != (s, a):
            raise ValueError("inconsistent MDP tensor shapes")
        sums = self.transitions.sum(axis=2)
        if not np.allclose(sums, 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def reward_bound(self) -> float:
        return float(np.max(np.abs(self.rewards)))


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation between two probability vectors: half the L1 distance."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("dimension mismatch")
    for v in (p, q):
        if abs(v.sum() - 1.0) > 1e-9:
            raise ValueError("inputs must sum to 1")
    return 0.5 * float(np.abs(p - q).sum())


def estimate_model_epsilon(m: ToyMDP, m_hat: ToyMDP) -> float:
    """Worst-case TV between matching transition rows of the two MDPs."""
    if m.transitions.shape != m_hat.transitions.shape:
        raise ValueError("MDPs must share state and action spaces")
    return 0.5 * float(np.abs(m.transitions - m_hat.transitions).sum(axis=2).max())


def exact_advantage(m: ToyMDP, policy: np.ndarray, horizon: int,
                    state: int, action: int) -> float:
    """Expected sum of rewards over `horizon` steps, forcing (state, action) first.

    Computed by backward dynamic programming; exact up to float arithmetic.
    """
    policy = np.asarray(policy, dtype=np.float64)
    values = np.zeros(m.num_states)
    for _ in range(horizon - 1):
        q = m.rewards + m.transitions @ values
        values = np.einsum("sa,sa->s", policy, q)
    return float(m.rewards[state, action] + m.transitions[state, action] @ values)


def mc_advantage(m: ToyMDP, policy: np.ndarray, horizon: int, state: int,
                 action: int, n_rollouts: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo estimate of exact_advantage; returns (mean, standard error)."""
    total = np.full(n_rollouts, m.rewards[state, action])
    cur = rng.choice(m.num_states, size=n_rollouts, p=m.transitions[state, action])
    u = rng.random((n_rollouts, horizon - 1, 2))
    pol_cdf = np.cumsum(policy, axis=1)
    trans_cdf = np.cumsum(m.transitions, axis=2)
    for t in range(horizon - 1):
        acts = (u[:, t, 0][:, None] > pol_cdf[cur]).sum(axis=1)
        total += m.rewards[cur, acts]
        cur = (u[:, t, 1][:, None] > trans_cdf[cur, acts]).sum(axis=1)
    return float(total.mean()), float(total.std(ddof=1) / math.sqrt(n_rollouts))


def random_toy_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
                   reward_scale: float = 1.0) -> ToyMDP:
    trans = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    rewards = rng.uniform(-reward_scale, reward_scale, size=(n_states, n_actions))
    return ToyMDP(trans, rewards)


def perturb_mdp(m: ToyMDP, rng: np.random.Generator, scale: float,
                reward_gap: float = 0.0) -> ToyMDP:
    """Random transition perturbation (and optional reward shift) of an MDP."""
    noise = rng.dirichlet(np.ones(m.num_states),
                          size=(m.num_states, m.num_actions))
    w = rng.uniform(0, scale, size=(m.num_states, m.num_actions, 1))
    trans = (1 - w) * m.transitions + w * noise
    trans /= trans.sum(axis=2, keepdims=True)
    rewards = m.rewards
    if reward_gap > 0:
        rewards = rewards + rng.uniform(-reward_gap, reward_gap,
                                        size=m.rewards.shape)
    return ToyMDP(trans, rewards)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)


@dataclass
class BoundCheckRow:
    policy_index: int
    horizon: int
    state: int
    action: int
    gap: float
    bound: float
    ratio: float


@dataclass
class BoundCheckReport:
    epsilon: float
    reward_bound: float
    reward_gap: float
    rows: list[BoundCheckRow]
    violations: list[BoundCheckRow]

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def max_ratio(self) -> float:
        return max((r.ratio for r in self.rows), default=0.0)


def check_simulation_bound(m: ToyMDP, m_hat: ToyMDP, policies: list[np.ndarray],
                           horizons: list[int]) -> BoundCheckReport:
    """Assert |A_hat - A| <= (K^2 - K) * R_max * eps + K * reward_gap everywhere.

    With shared rewards the gap term vanishes and the bound is the pure
    transition-error term.
    """
    eps = estimate_model_epsilon(m, m_hat)
    r_max = max(m.reward_bound, m_hat.reward_bound)
    reward_gap = float(np.max(np.abs(m.rewards - m_hat.rewards)))
    rows, violations = [], []
    for p_idx, policy in enumerate(policies):
        for horizon in horizons:
            bound = (horizon ** 2 - horizon) * r_max * eps + horizon * reward_gap
            for s in range(m.num_states):
                for a in range(m.num_actions):
                    a_true = exact_advantage(m, policy, horizon, s, a)
                    a_model = exact_advantage(m_hat, policy, horizon, s, a)
                    gap = abs(a_model - a_true)
                    ratio = 0.0 if gap <= 1e-12 else gap / max(bound, 1e-300)
                    row = BoundCheckRow(p_idx, horizon, s, a, gap, bound, ratio)
                    rows.append(row)
                    if gap > bound + 1e-9 * max(1.0, bound):
                        violations.append(row)
    return BoundCheckReport(epsilon=eps, reward_bound=r_max,
                            reward_gap=reward_gap, rows=rows,
                            violations=violations)


# ---------------------------------------------------------------------------
# decoupling check


@dataclass
class DecouplingInstance:
    profiles: list[DeviceProfile]
    channel: ChannelState
    sys: SystemConfig
    xi_lookup: dict[frozenset, float]


@dataclass
class DecouplingReport:
    joint_subset: frozenset | None
    joint_objective: float | None
    decoupled_subset: frozenset | None
    decoupled_objective: float | None
    relative_gap: float

    @property
    def passed(self) -> bool:
        if self.joint_subset is None and self.decoupled_subset is None:
            return True
        if self.joint_subset != self.decoupled_subset:
            return False
        return self.relative_gap <= 1e-2


def build_decoupling_instance(seed: int, n_devices: int,
                              qos_time: float = 5.0,
                              sigma: float = 0.8) -> DecouplingInstance:
    """Random small instance; accuracy per subset comes from one real FL round."""
    rng = np.random.default_rng(seed)
    data = flsim.synthetic_blobs(80 * n_devices, 2, 3, seed=seed + 1, spread=0.8)
    test = flsim.synthetic_blobs(200, 2, 3, seed=seed + 2, spread=0.8)
    fl_cfg = flsim.FLConfig(num_devices=max(2, n_devices), local_iters=3,
                            learning_rate=0.3, alpha=0.5, num_classes=3)
    parts = flsim.partition_dirichlet(data, n_devices, fl_cfg.alpha, seed + 3)
    sizes = [len(p) for p in parts]
    profiles = [
        DeviceProfile(f_max=float(rng.uniform(0.5e9, 4e9)),
                      p_max=float(rng.uniform(0.05, 1.0)),
                      s_bits=1e6, data_size=sizes[i],
                      cycles_per_sample=7e5, kappa=1e-28)
        for i in range(n_devices)
    ]
    channel = ChannelState(np.exp(rng.uniform(np.log(1e-7), np.log(1e-6), n_devices)))
    sys = SystemConfig(total_bandwidth=2e6, noise_psd=3.98e-21, qos_time=qos_time,
                       num_rounds=1, sigma=sigma, local_iters=fl_cfg.local_iters)
    zero = flsim.init_model(data.dim, fl_cfg.num_classes)
    xi_lookup = {}
    for size in range(1, n_devices + 1):
        for subset in itertools.combinations(range(n_devices), size):
            uploads = []
            for dev in subset:
                params, _, _ = flsim.local_train(zero, parts[dev], fl_cfg)
                uploads.append((params, len(parts[dev])))
            agg = flsim.aggregate(uploads, fl_cfg.aggregation_mode)
            xi_lookup[frozenset(subset)] = flsim.evaluate(agg, test,
                                                          fl_cfg.num_classes)
    return DecouplingInstance(profiles, channel, sys, xi_lookup)


def _grid_subset_energy(subset, inst: DecouplingInstance, grid: int) -> float | None:
    """Joint-path energy: exhaustive per-device grids at the equal bandwidth split."""
    share = inst.sys.total_bandwidth / len(subset)
    total = 0.0
    for dev in subset:
        res = solver.brute_force_device_oracle(inst.profiles[dev], share,
                                               float(inst.channel.gains[dev]),
                                               inst.sys, grid=grid)
        if res is None:
            return None
        total += res[2]
    return total


def check_decoupling(inst: DecouplingInstance, grid: int = 101) -> DecouplingReport:
    """Compare the joint brute-force optimum with the tool-decoupled optimum."""
    n = len(inst.profiles)
    sigma = inst.sys.sigma

    def objective(xi: float, energy: float) -> float:
        return (1.0 - sigma) * xi / energy + sigma * xi

    joint_best = (None, None)
    dec_best = (None, None)
    for size in range(1, n + 1):
        for subset in itertools.combinations(range(n), size):
            key = frozenset(subset)
            xi = inst.xi_lookup[key]
            e_joint = _grid_subset_energy(subset, inst, grid)
            if e_joint is not None:
                obj = objective(xi, e_joint)
                if joint_best[1] is None or obj > joint_best[1]:
                    joint_best = (key, obj)
            alloc = solver.allocate(subset, inst.profiles, inst.channel, inst.sys)
            if alloc.feasible:
                obj = objective(xi, alloc.total_energy)
                if dec_best[1] is None or obj > dec_best[1]:
                    dec_best = (key, obj)
    if joint_best[1] is None or dec_best[1] is None:
        return DecouplingReport(joint_best[0], joint_best[1], dec_best[0],
                                dec_best[1], relative_gap=0.0)
    gap = abs(joint_best[1] - dec_best[1]) / max(abs(joint_best[1]), 1e-12)
    return DecouplingReport(joint_best[0], joint_best[1], dec_best[0],
                            dec_best[1], relative_gap=gap)


# ---------------------------------------------------------------------------
# empirical world-model epsilon


@dataclass
class WorldEpsilonReport:
    max_tv: float
    mean_tv: float
    cells: dict
    excluded: list

    @property
    def num_cells(self) -> int:
        return len(self.cells)


def empirical_world_epsilon(records: list[tuple[float, int, float, float]],
                            bins: int = 10, min_count: int = 20) -> WorldEpsilonReport:
    """Binned TV between real and model next-accuracy distributions.

    Records are (previous accuracy, action class, real next accuracy, model
    next accuracy). Cells are keyed by (accuracy bin, action class); cells
    with fewer than min_count samples are reported but excluded from the
    statistics.
    """
    def to_bin(value: float) -> int:
        return min(bins - 1, max(0, int(value * bins)))

    grouped: dict = {}
    for prev_acc, action_class, real_next, model_next in records:
        key = (to_bin(prev_acc), int(action_class))
        grouped.setdefault(key, []).append((to_bin(real_next), to_bin(model_next)))
    cells, excluded, tvs = {}, [], []
    for key, pairs in sorted(grouped.items()):
        if len(pairs) < min_count:
            excluded.append((key, len(pairs)))
            continue
        real_hist = np.bincount([p[0] for p in pairs], minlength=bins) / len(pairs)
        model_hist = np.bincount([p[1] for p in pairs], minlength=bins) / len(pairs)
        tv = tv_distance(real_hist, model_hist)
        cells[key] = {"count": len(pairs), "tv": tv}
        tvs.append(tv)
    return WorldEpsilonReport(
        max_tv=max(tvs) if tvs else 0.0,
        mean_tv=float(np.mean(tvs)) if tvs else 0.0,
        cells=cells, excluded=excluded,
    )


def world_epsilon_records(model, trajectories_samples: list[list],
                          num_devices: int) -> list[tuple[float, int, float, float]]:
    """One-step model predictions against held-out targets, with windowed context."""
    stat_len = StatState.FEATURES_PER_DEVICE * num_devices
    masses = []
    for samples in trajectories_samples:
        for x, _ in samples:
            sizes = x[:stat_len].reshape(num_devices, -1)[:, 3]
            sel = x[stat_len + 1:] > 0.5
            masses.append(float(sizes[sel].sum()))
    median_mass = float(np.median(masses)) if masses else 0.0
    records = []
    for samples in trajectories_samples:
        history = []
        for x, y in samples:
            history.append(x)
            _, acc_hat = model.predict(history)
            sizes = x[:stat_len].reshape(num_devices, -1)[:, 3]
            sel = x[stat_len + 1:] > 0.5
            action_class = int(float(sizes[sel].sum()) > median_mass)
            records.append((float(x[stat_len]), action_class,
                            float(y[-1]), acc_hat))
    return records


# ---------------------------------------------------------------------------
# gradient integrity


def _random_observation(rng: np.random.Generator, n_devices: int,
                        horizon: int = 10, select_size: int = 2) -> Observation:
    stat = StatState(
        local_loss=rng.uniform(0, 2, n_devices),
        grad_inner=rng.normal(0, 1, n_devices),
        sign_agree=rng.uniform(0, 1, n_devices),
        data_size=rng.integers(50, 500, n_devices).astype(np.float64),
        global_loss=rng.uniform(0, 2, n_devices),
        prev_accuracy=float(rng.uniform(0, 1)),
        selected_mask=rng.random(n_devices) > 0.5,
    )
    return Observation(
        round=int(rng.integers(0, horizon)), horizon=horizon,
        select_size=select_size,
        f_max=rng.uniform(0.5e9, 4e9, n_devices),
        p_max=rng.uniform(0.01, 1.0, n_devices),
        gains=np.exp(rng.uniform(np.log(1e-7), np.log(1e-6), n_devices)),
        last_e_cmp=rng.uniform(0, 0.5, n_devices),
        last_e_com=rng.uniform(0, 0.5, n_devices),
        stat=stat,
    )


def run_gradient_checks(seed: int = 0, points: int = 25) -> dict[str, float]:
    """Finite-difference verification of every analytic gradient in the package.

    Checks, at `points` random parameter vectors each: the reference
    learner's loss gradient, the policy's selection log-probability gradient,
    the transition model's MSE gradient, and the policy-update objective
    gradient. Returns the worst relative error per operation.
    """
    from .grpo import EpisodeBatch, grpo_objective
    from .policy import SelectionPolicy
    from .worldmodel import TransitionModel

    rng = np.random.default_rng(seed)
    out = {}

    # reference learner
    worst = 0.0
    data = flsim.synthetic_blobs(40, 3, 3, seed=seed)
    for _ in range(points):
        params = rng.normal(0, 1.0, (3 + 1) * 3)
        _, grad = flsim.loss_and_grad(params, data, 3, weight_decay=0.01)
        fd = finite_diff_grad(lambda p: flsim.loss_and_grad(p, data, 3, 0.01)[0],
                              params)
        worst = max(worst, max_rel_error(grad, fd))
    out["learner_loss"] = worst

    # policy log-probability
    n_dev, m = 4, 2
    policy = SelectionPolicy(n_dev, m, hidden=(8,), seed=seed)
    obs = _random_observation(rng, n_dev, select_size=m)
    worst = 0.0
    for _ in range(points):
        params = rng.normal(0, 0.5, policy.num_params)
        sel = rng.choice(n_dev, size=m, replace=False).tolist()
        _, grad = policy.logprob_grad(obs, sel, params)
        fd = finite_diff_grad(lambda p: policy.logprob(obs, sel, p), params)
        worst = max(worst, max_rel_error(grad, fd))
    out["policy_logprob"] = worst

    # transition-model loss
    model = TransitionModel(num_devices=3, window=2, hidden=(8,), seed=seed)
    x = rng.normal(0, 1, (6, model.window * model.base_dim))
    y = rng.normal(0, 1, (6, model.out_dim))

    def model_loss(p):
        pred, _ = model.net.forward(p, x)
        return float(np.mean((pred - y) ** 2))

    worst = 0.0
    for _ in range(points):
        params = rng.normal(0, 0.5, model.net.num_params)
        pred, cache = model.net.forward(params, x)
        err = pred - y
        grad = model.net.backward(params, cache, 2.0 * err / err.size)
        fd = finite_diff_grad(model_loss, params)
        worst = max(worst, max_rel_error(grad, fd))
    out["worldmodel_mse"] = worst

    # policy-update objective
    worst = 0.0
    for _ in range(points):
        obs_batch = [[_random_observation(rng, n_dev, select_size=m)
                      for _ in range(3)] for _ in range(2)]
        sels = [[rng.choice(n_dev, size=m, replace=False).tolist()
                 for _ in range(3)] for _ in range(2)]
        params0 = rng.normal(0, 0.5, policy.num_params)
        lp_old = np.array([[policy.logprob(obs_batch[i][t], sels[i][t], params0)
                            for t in range(3)] for i in range(2)])
        batch = EpisodeBatch(obs_batch, sels, lp_old,
                             rng.uniform(0, 1, (2, 3)))
        adv = rng.normal(0, 1, (2, 3))
        params = params0 + rng.normal(0, 0.05, policy.num_params)
        _, grad, _, _ = grpo_objective(policy, params, batch, adv, clip=0.2)
        fd = finite_diff_grad(
            lambda p: grpo_objective(policy, p, batch, adv, clip=0.2)[0], params)
        worst = max(worst, max_rel_error(grad, fd))
    out["update_objective"] = worst
    return out
