"""Learned transition model for the FL-statistics part, and the virtual environment.

The environment transition factorizes into a system part (energy, time,
feasibility: computed exactly by the resource tool) and a statistics part
(how accuracy and per-device training statistics evolve with the selection).
Only the statistics part is learned, from tuples

    input  = (stat vector, previous accuracy, selection multi-hot)
    target = (next stat vector, achieved accuracy)

collected on the real simulator. Rounds whose allocation was infeasible are
excluded: no FL transition happened, and the virtual environment reproduces
the penalty path exactly through the shared tool code.

The regressor flattens a window of the W most recent inputs (zero-padded at
episode start) through a small tanh network trained with Adam on MSE, with
per-feature z-score normalization frozen at fit time. The per-trajectory
loss is the mean over rounds, and the batch loss the mean over trajectories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import wireless
from .environment import (Observation, StepResult, Trajectory, WirelessFLEnv,
                          reward_value)
from .flsim import StatState
from .nn import MLP, Adam


def sample_input(stat_vec: np.ndarray, prev_accuracy: float,
                 selection, num_devices: int) -> np.ndarray:
    multihot = np.zeros(num_devices)
    multihot[list(selection)] = 1.0
    return np.concatenate([np.asarray(stat_vec, dtype=np.float64),
                           [prev_accuracy], multihot])


def samples_from_trajectory(traj: Trajectory, num_devices: int):
    """(input, target) pairs from the feasible rounds of one trajectory."""
    samples = []
    for rec in traj.records:
        if not rec.feasible:
            continue
        x = sample_input(rec.stat, rec.prev_accuracy, rec.selection, num_devices)
        y = np.concatenate([np.asarray(rec.next_stat, dtype=np.float64),
                            [rec.accuracy]])
        samples.append((x, y))
    return samples


def base_input_dim(num_devices: int) -> int:
    return StatState.FEATURES_PER_DEVICE * num_devices + 1 + num_devices


def target_dim(num_devices: int) -> int:
    return StatState.FEATURES_PER_DEVICE * num_devices + 1


def _window_stack(inputs: np.ndarray, window: int) -> np.ndarray:
    """Row t becomes the concatenation of rows t-window+1 .. t, zero-padded."""
    t, d = inputs.shape
    padded = np.vstack([np.zeros((window - 1, d)), inputs])
    return np.hstack([padded[i:i + t] for i in range(window)])


@dataclass
class FitReport:
    epoch: int
    train_mse: float
    holdout_mse: float
    holdout_accuracy_mse: float


class TransitionModel:
    """Window-flattening MSE regressor for the statistics transition."""

    def __init__(self, num_devices: int, window: int = 4,
                 hidden: tuple[int, ...] = (128, 128), seed: int = 0):
        self.num_devices = num_devices
        self.window = window
        self.base_dim = base_input_dim(num_devices)
        self.out_dim = target_dim(num_devices)
        self.net = MLP((window * self.base_dim,) + tuple(hidden) + (self.out_dim,))
        self.params = self.net.init_params(np.random.default_rng(seed))
        self.in_mean = np.zeros(window * self.base_dim)
        self.in_std = np.ones(window * self.base_dim)
        self.out_mean = np.zeros(self.out_dim)
        self.out_std = np.ones(self.out_dim)

    # -- training -----------------------------------------------------------

    def _windowed(self, samples) -> tuple[np.ndarray, np.ndarray]:
        xs = np.asarray([s[0] for s in samples])
        ys = np.asarray([s[1] for s in samples])
        return _window_stack(xs, self.window), ys

    def fit(self, trajectories_samples: list[list], epochs: int = 300,
            lr: float = 1e-3, batch: int = 8, seed: int = 0,
            holdout_fraction: float = 0.1) -> list[FitReport]:
        """Train on per-trajectory sample lists; the holdout split is by trajectory."""
        trajs = [t for t in trajectories_samples if t]
        if len(trajs) < 2:
            raise ValueError("need at least 2 non-empty trajectories")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(trajs))
        n_hold = max(1, int(round(holdout_fraction * len(trajs))))
        hold_ids = set(order[:n_hold].tolist())
        train = [self._windowed(trajs[i]) for i in range(len(trajs)) if i not in hold_ids]
        hold = [self._windowed(trajs[i]) for i in sorted(hold_ids)]

        x_all = np.vstack([x for x, _ in train])
        y_all = np.vstack([y for _, y in train])
        self.in_mean = x_all.mean(axis=0)
        self.in_std = np.where(x_all.std(axis=0) < 1e-12, 1.0, x_all.std(axis=0))
        self.out_mean = y_all.mean(axis=0)
        self.out_std = np.where(y_all.std(axis=0) < 1e-12, 1.0, y_all.std(axis=0))

        train_n = [((x - self.in_mean) / self.in_std, (y - self.out_mean) / self.out_std)
                   for x, y in train]
        hold_n = [((x - self.in_mean) / self.in_std, (y - self.out_mean) / self.out_std)
                  for x, y in hold]

        # persistence baseline on the same held-out trajectories: predict this
        # round's accuracy as the previous one (found inside the last window slot)
        prev_col = (self.window - 1) * self.base_dim + (self.out_dim - 1)
        pers_err = [((x[:, prev_col] - y[:, -1]) ** 2) for x, y in hold]
        self.holdout_persistence_mse = float(np.mean(np.concatenate(pers_err)))

        opt = Adam(self.net.num_params, lr=lr)
        history: list[FitReport] = []
        for epoch in range(epochs):
            idx = rng.permutation(len(train_n))
            for start in range(0, len(idx), batch):
                group = idx[start:start + batch]
                grad = np.zeros_like(self.params)
                for i in group:
                    xn, yn = train_n[i]
                    pred, cache = self.net.forward(self.params, xn)
                    err = pred - yn
                    dout = 2.0 * err / (err.size * len(group))
                    grad += self.net.backward(self.params, cache, dout)
                self.params = opt.step(self.params, grad)
                if not np.all(np.isfinite(self.params)):
                    raise FloatingPointError(
                        f"training diverged at epoch {epoch}")
            history.append(FitReport(
                epoch=epoch,
                train_mse=self._normalized_mse(train_n),
                holdout_mse=self._normalized_mse(hold_n),
                holdout_accuracy_mse=self.accuracy_mse(hold),
            ))
        self._holdout = hold
        return history

    def _normalized_mse(self, sets) -> float:
        losses = []
        for xn, yn in sets:
            pred, _ = self.net.forward(self.params, xn)
            losses.append(float(np.mean((pred - yn) ** 2)))
        return float(np.mean(losses))

    def accuracy_mse(self, sets_raw) -> float:
        """Raw-unit MSE of the accuracy component over (windowed x, y) sets."""
        errs = []
        for x, y in sets_raw:
            xn = (x - self.in_mean) / self.in_std
            pred, _ = self.net.forward(self.params, xn)
            acc_hat = np.clip(pred[:, -1] * self.out_std[-1] + self.out_mean[-1], 0.0, 1.0)
            errs.append((acc_hat - y[:, -1]) ** 2)
        return float(np.mean(np.concatenate(errs)))

    # -- inference ----------------------------------------------------------

    def predict(self, history_inputs: list[np.ndarray]) -> tuple[np.ndarray, float]:
        """Next stat vector and accuracy from the most recent W raw inputs."""
        if not history_inputs:
            raise ValueError("need at least one input")
        if any(len(h) != self.base_dim for h in history_inputs):
            raise ValueError("input dimension mismatch")
        recent = history_inputs[-self.window:]
        rows = [np.zeros(self.base_dim)] * (self.window - len(recent)) + \
            [np.asarray(h, dtype=np.float64) for h in recent]
        x = np.concatenate(rows)
        xn = (x - self.in_mean) / self.in_std
        pred, _ = self.net.forward(self.params, xn)
        out = pred * self.out_std + self.out_mean
        stat_next = out[:-1]
        acc = float(np.clip(out[-1], 0.0, 1.0))
        return stat_next, acc

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "kind": "transition-model",
            "num_devices": self.num_devices,
            "window": self.window,
            "sizes": list(self.net.sizes),
            "in_mean": self.in_mean.tolist(),
            "in_std": self.in_std.tolist(),
            "out_mean": self.out_mean.tolist(),
            "out_std": self.out_std.tolist(),
        }
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
            fh.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TransitionModel":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("ascii"))
            raw = fh.read()
        if header.get("kind") != "transition-model":
            raise ValueError("not a transition-model checkpoint")
        hidden = tuple(header["sizes"][1:-1])
        model = cls(header["num_devices"], window=header["window"], hidden=hidden)
        model.params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if model.params.size != model.net.num_params:
            raise ValueError("checkpoint parameter count mismatch")
        model.in_mean = np.asarray(header["in_mean"])
        model.in_std = np.asarray(header["in_std"])
        model.out_mean = np.asarray(header["out_mean"])
        model.out_std = np.asarray(header["out_std"])
        return model


def persistence_accuracy_mse(trajectories_samples: list[list]) -> float:
    """Baseline that predicts this round's accuracy as last round's.

    The previous accuracy sits right after the stat block in each input.
    """
    errs = []
    for samples in trajectories_samples:
        for x, y in samples:
            stat_len = len(y) - 1
            errs.append((x[stat_len] - y[-1]) ** 2)
    return float(np.mean(errs))


class VirtualFLEnv:
    """Model-based twin of the real environment with an identical step contract.

    System quantities (allocation, energy, time, feasibility, channel
    evolution) run through the same tool code as the real environment; only
    the statistics transition is replaced by the learned model. Infeasible
    selections take the exact penalty path of the real environment.
    """

    def __init__(self, env: WirelessFLEnv, model: TransitionModel):
        if model.num_devices != env.num_devices:
            raise ValueError("model and environment device counts differ")
        self.env = env
        self.model = model
        self._history: list[np.ndarray] = []

    @property
    def horizon(self) -> int:
        return self.env.horizon

    @property
    def num_devices(self) -> int:
        return self.env.num_devices

    @property
    def select_size(self) -> int:
        return self.env.select_size

    @property
    def fingerprint(self) -> str:
        return self.env.fingerprint

    def reset(self, seed: int) -> Observation:
        obs = self.env.reset(seed)
        self._history = []
        return obs

    def step(self, selection) -> StepResult:
        env = self.env
        sel = env._validate_selection(selection)
        if env._t is None:
            raise RuntimeError("call reset() before step()")
        if env._t >= env.horizon:
            raise RuntimeError("episode finished")
        alloc = env.allocate(sel)
        if alloc.feasible:
            x = sample_input(env._stat.to_vector(), env._stat.prev_accuracy,
                             sel, env.num_devices)
            self._history.append(x)
            stat_next, acc = self.model.predict(self._history)
            reward = reward_value(acc, alloc.total_energy, env.sys_cfg.sigma,
                                  env.energy_scale)
            energy, time_total = alloc.total_energy, alloc.total_time
            mask = np.zeros(env.num_devices, dtype=bool)
            mask[list(sel)] = True
            env._stat = StatState.from_vector(stat_next, prev_accuracy=acc,
                                              selected_mask=mask)
            env._prev_acc = acc
            env._last_e_cmp = np.zeros(env.num_devices)
            env._last_e_com = np.zeros(env.num_devices)
            for da in alloc.devices:
                env._last_e_cmp[da.device] = da.e_cmp
                env._last_e_com[da.device] = da.e_com
            accuracy = acc
        else:
            accuracy = env._prev_acc
            reward = 0.0
            energy, time_total = 0.0, 0.0
            env._last_e_cmp = np.zeros(env.num_devices)
            env._last_e_com = np.zeros(env.num_devices)
        env._t += 1
        env._channel = wireless.sample_channel(
            env._channel_rng, env.num_devices, *env.gain_range)
        env._obs = env._make_obs()
        return StepResult(next_obs=env._obs, reward=reward, accuracy=accuracy,
                          energy=energy, time=time_total, feasible=alloc.feasible,
                          done=env._t >= env.horizon)
