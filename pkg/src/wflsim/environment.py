"""The real wireless-FL decision process.

Each round the caller picks a fixed-size device subset; the resource tool
allocates frequency/power/bandwidth for it. A feasible allocation runs one
FL round (local training on the selected devices, aggregation, evaluation)
and earns reward (1 - sigma) * accuracy / energy + sigma * accuracy. An
infeasible selection earns zero reward and skips the FL round entirely: the
global model carries over unchanged and only the channel advances.

Episodes are deterministic given (seed, action sequence). Channel sampling
and update-noise draws use independent seeded streams so that trajectories
replay identically whether or not differentially-private noise is enabled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import flsim, solver, wireless
from .flsim import Dataset, FLConfig, StatState
from .wireless import ChannelState, DeviceProfile, SystemConfig


@dataclass(frozen=True)
class DPConfig:
    clip_norm: float
    epsilon: float
    delta: float
    rounds: int


@dataclass
class Observation:
    """Everything the selection policy sees at the start of a round."""

    round: int
    horizon: int
    select_size: int
    f_max: np.ndarray
    p_max: np.ndarray
    gains: np.ndarray
    last_e_cmp: np.ndarray
    last_e_com: np.ndarray
    stat: StatState
    text: str = ""

    def __post_init__(self):
        n = len(self.f_max)
        for name in ("p_max", "gains", "last_e_cmp", "last_e_com"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length mismatch")
        if len(self.stat.data_size) != n:
            raise ValueError("stat device count mismatch")
        if not (0 <= self.round <= self.horizon):
            raise ValueError("round out of range")

    @property
    def num_devices(self) -> int:
        return len(self.f_max)


@dataclass
class StepResult:
    next_obs: Observation
    reward: float
    accuracy: float
    energy: float
    time: float
    feasible: bool
    done: bool


@dataclass
class TrajectoryRecord:
    round: int
    selection: list[int]
    feasible: bool
    reward: float
    accuracy: float
    prev_accuracy: float
    energy: float
    time: float
    stat: list[float]
    next_stat: list[float]
    channel: list[float]


@dataclass
class Trajectory:
    seed: int
    fingerprint: str
    records: list[TrajectoryRecord] = field(default_factory=list)


def render_prompt(obs: Observation) -> str:
    """Deterministic three-section prompt: system role, task, observation.

    One line per device (index, loss, data size, channel gain, resource
    caps); all numbers printed with 6 significant digits.
    """
    lines = [
        "[system] You are a scheduling agent for a wireless federated learning",
        "system. Each round you choose which devices train and upload updates.",
        "[task] Select devices that maximize test accuracy per joule under the",
        f"round time budget. Round {obs.round} of {obs.horizon}; previous accuracy "
        f"{obs.stat.prev_accuracy:.6g}.",
        f"Respond with a comma-separated list of {obs.select_size} distinct device "
        f"indices in [0, {obs.num_devices - 1}].",
        "[observation]",
    ]
    for n in range(obs.num_devices):
        loss = obs.stat.local_loss[n] if obs.stat.selected_mask[n] else obs.stat.global_loss[n]
        lines.append(
            f"device {n}: loss={loss:.6g} data={int(obs.stat.data_size[n])} "
            f"gain={obs.gains[n]:.6g} f_max={obs.f_max[n]:.6g} "
            f"p_max={obs.p_max[n]:.6g} e_cmp={obs.last_e_cmp[n]:.6g} "
            f"e_com={obs.last_e_com[n]:.6g}"
        )
    return "\n".join(lines)


def reward_value(accuracy: float, energy: float, sigma: float,
                 energy_scale: float = 1.0) -> float:
    """Weighted accuracy/energy objective for one round."""
    return (1.0 - sigma) * accuracy / (energy / energy_scale) + sigma * accuracy


def cwpem(rewards) -> float:
    """Episode objective: the sum of per-round rewards."""
    if isinstance(rewards, Trajectory):
        rewards = [r.reward for r in rewards.records]
    return float(sum(rewards))


class WirelessFLEnv:
    """Composes the FL process, the wireless cost model and the resource tool."""

    def __init__(self, fl_cfg: FLConfig, sys_cfg: SystemConfig,
                 profiles: list[DeviceProfile], train_data: Dataset,
                 test_data: Dataset, select_size: int,
                 gain_range: tuple[float, float],
                 alloc_mode: str = solver.EQUAL_SPLIT,
                 energy_scale: float = 1.0,
                 quantize_bits: int = 0,
                 dp: DPConfig | None = None,
                 reuse_partition: bool = True,
                 data_seed: int = 0,
                 fingerprint: str = ""):
        if len(profiles) != fl_cfg.num_devices:
            raise ValueError("profile count must match num_devices")
        if not (1 <= select_size <= fl_cfg.num_devices):
            raise ValueError("select_size out of range")
        self.fl_cfg = fl_cfg
        self.sys_cfg = sys_cfg
        self.profiles = profiles
        self.train_data = train_data
        self.test_data = test_data
        self.select_size = select_size
        self.gain_range = gain_range
        self.alloc_mode = alloc_mode
        self.energy_scale = energy_scale
        self.quantize_bits = quantize_bits
        self.dp = dp
        self.reuse_partition = reuse_partition
        self.data_seed = data_seed
        self.fingerprint = fingerprint
        self._fixed_partitions = None
        if reuse_partition:
            self._fixed_partitions = flsim.partition_dirichlet(
                train_data, fl_cfg.num_devices, fl_cfg.alpha, data_seed)
        self._t = None

    @property
    def horizon(self) -> int:
        return self.sys_cfg.num_rounds

    @property
    def num_devices(self) -> int:
        return self.fl_cfg.num_devices

    def reset(self, seed: int) -> Observation:
        ss = np.random.SeedSequence(seed)
        channel_ss, noise_ss = ss.spawn(2)
        self._channel_rng = np.random.default_rng(channel_ss)
        self._noise_rng = np.random.default_rng(noise_ss)
        if self.reuse_partition:
            self.partitions = self._fixed_partitions
        else:
            self.partitions = flsim.partition_dirichlet(
                self.train_data, self.fl_cfg.num_devices, self.fl_cfg.alpha, seed)
        self.global_params = flsim.init_model(self.train_data.dim,
                                              self.fl_cfg.num_classes)
        self._t = 0
        self._prev_acc = 0.0
        self._last_e_cmp = np.zeros(self.num_devices)
        self._last_e_com = np.zeros(self.num_devices)
        self._channel = wireless.sample_channel(
            self._channel_rng, self.num_devices, *self.gain_range)
        self._stat = self._initial_stat()
        self._obs = self._make_obs()
        return self._obs

    def _initial_stat(self) -> StatState:
        n = self.num_devices
        global_loss = np.array([
            flsim.loss_and_grad(self.global_params, ds, self.fl_cfg.num_classes,
                                self.fl_cfg.weight_decay)[0]
            for ds in self.partitions
        ])
        return StatState(
            local_loss=np.zeros(n), grad_inner=np.zeros(n), sign_agree=np.zeros(n),
            data_size=np.array([float(len(d)) for d in self.partitions]),
            global_loss=global_loss, prev_accuracy=0.0,
        )

    def _make_obs(self) -> Observation:
        obs = Observation(
            round=self._t, horizon=self.horizon, select_size=self.select_size,
            f_max=np.array([p.f_max for p in self.profiles]),
            p_max=np.array([p.p_max for p in self.profiles]),
            gains=self._channel.gains.copy(),
            last_e_cmp=self._last_e_cmp.copy(),
            last_e_com=self._last_e_com.copy(),
            stat=self._stat,
        )
        obs.text = render_prompt(obs)
        return obs

    def _validate_selection(self, selection) -> tuple[int, ...]:
        sel = tuple(int(i) for i in selection)
        if len(sel) != self.select_size:
            raise ValueError(f"selection must have exactly {self.select_size} devices")
        if len(set(sel)) != len(sel):
            raise ValueError("selection contains repeats")
        if min(sel) < 0 or max(sel) >= self.num_devices:
            raise ValueError("device index out of range")
        return sel

    def allocate(self, selection) -> solver.ResourceAllocation:
        """Run the resource tool for a selection against the current channel."""
        return solver.allocate(self._validate_selection(selection), self.profiles,
                               self._channel, self.sys_cfg, self.alloc_mode)

    def step(self, selection) -> StepResult:
        if self._t is None:
            raise RuntimeError("call reset() before step()")
        if self._t >= self.horizon:
            raise RuntimeError("episode finished")
        sel = self._validate_selection(selection)
        alloc = self.allocate(sel)
        if alloc.feasible:
            accuracy = self._run_fl_round(sel)
            reward = reward_value(accuracy, alloc.total_energy,
                                  self.sys_cfg.sigma, self.energy_scale)
            energy, time_total = alloc.total_energy, alloc.total_time
            self._last_e_cmp = np.zeros(self.num_devices)
            self._last_e_com = np.zeros(self.num_devices)
            for da in alloc.devices:
                self._last_e_cmp[da.device] = da.e_cmp
                self._last_e_com[da.device] = da.e_com
            self._prev_acc = accuracy
        else:
            # penalty round: no model delivery, no consumption
            accuracy = self._prev_acc
            reward = 0.0
            energy, time_total = 0.0, 0.0
            self._last_e_cmp = np.zeros(self.num_devices)
            self._last_e_com = np.zeros(self.num_devices)
        self._t += 1
        self._channel = wireless.sample_channel(
            self._channel_rng, self.num_devices, *self.gain_range)
        self._obs = self._make_obs()
        return StepResult(next_obs=self._obs, reward=reward, accuracy=accuracy,
                          energy=energy, time=time_total, feasible=alloc.feasible,
                          done=self._t >= self.horizon)

    def _run_fl_round(self, sel: tuple[int, ...]) -> float:
        prev_global = self.global_params
        local_outputs = {}
        uploads = []
        for dev in sel:
            params, loss, grad = flsim.local_train(prev_global, self.partitions[dev],
                                                   self.fl_cfg)
            delta = params - prev_global
            if self.quantize_bits >= 1:
                delta = flsim.quantize_update(delta, self.quantize_bits)
            if self.dp is not None:
                delta = flsim.dp_noise(delta, self.dp.clip_norm, self.dp.epsilon,
                                       self.dp.delta, self.dp.rounds, self._noise_rng)
            transmitted = prev_global + delta
            local_outputs[dev] = (transmitted, loss, grad)
            uploads.append((transmitted, len(self.partitions[dev])))
        new_global = flsim.aggregate(uploads, self.fl_cfg.aggregation_mode,
                                     total_mass=len(self.train_data))
        accuracy = flsim.evaluate(new_global, self.test_data, self.fl_cfg.num_classes)
        ggrad = flsim.global_gradient(new_global, self.partitions,
                                      self.fl_cfg.num_classes, self.fl_cfg.weight_decay)
        self._stat = flsim.stat_features(new_global, ggrad, local_outputs,
                                         self.partitions, self.fl_cfg.num_classes,
                                         prev_accuracy=accuracy,
                                         weight_decay=self.fl_cfg.weight_decay)
        self.global_params = new_global
        return accuracy


# ---------------------------------------------------------------------------
# trajectory collection and persistence


def run_episode(env, select_fn, seed: int) -> Trajectory:
    """Roll one full episode; select_fn(obs, rng) -> device list."""
    obs = env.reset(seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5E1EC7)))
    traj = Trajectory(seed=seed, fingerprint=getattr(env, "fingerprint", ""))
    done = False
    while not done:
        selection = list(select_fn(obs, rng))
        channel = obs.gains.copy()
        res = env.step(selection)
        traj.records.append(TrajectoryRecord(
            round=obs.round, selection=[int(i) for i in selection],
            feasible=bool(res.feasible), reward=float(res.reward),
            accuracy=float(res.accuracy),
            prev_accuracy=float(obs.stat.prev_accuracy),
            energy=float(res.energy), time=float(res.time),
            stat=[float(v) for v in obs.stat.to_vector()],
            next_stat=[float(v) for v in res.next_obs.stat.to_vector()],
            channel=[float(v) for v in channel],
        ))
        obs, done = res.next_obs, res.done
    return traj


def collect_trajectories(env, select_fn, num_trajectories: int,
                         base_seed: int) -> list[Trajectory]:
    """Run seeded episodes under a behavior policy (trajectory i gets seed base+i)."""
    return [run_episode(env, select_fn, base_seed + i)
            for i in range(num_trajectories)]


def write_trajectory(path, traj: Trajectory) -> None:
    """One JSON header line, then one JSON record per round (append-friendly)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps({"seed": traj.seed, "fingerprint": traj.fingerprint}) + "\n")
        for rec in traj.records:
            fh.write(json.dumps(rec.__dict__, sort_keys=True) + "\n")


def read_trajectory(path) -> Trajectory:
    with open(path, "r", encoding="ascii") as fh:
        header = json.loads(fh.readline())
        traj = Trajectory(seed=header["seed"], fingerprint=header["fingerprint"])
        for line in fh:
            if line.strip():
                traj.records.append(TrajectoryRecord(**json.loads(line)))
    return traj


def evaluate_policy(env, select_fn, trials: int, base_seed: int) -> list[dict]:
    """Seeded evaluation episodes; returns one summary dict per trial."""
    out = []
    for i in range(trials):
        traj = run_episode(env, select_fn, base_seed + i)
        out.append({
            "seed": base_seed + i,
            "rewards": [r.reward for r in traj.records],
            "accuracies": [r.accuracy for r in traj.records],
            "energies": [r.energy for r in traj.records],
            "times": [r.time for r in traj.records],
            "feasible": [r.feasible for r in traj.records],
            "cwpem": cwpem(traj),
        })
    return out


def random_selector(num_devices: int, select_size: int):
    """Uniform-random valid selections, the default behavior policy."""
    def select(obs, rng):
        return rng.choice(num_devices, size=select_size, replace=False).tolist()
    return select
