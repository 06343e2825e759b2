"""Device-selection policies.

The trainable policy is a small network emitting one logit per device; a
selection of ``m`` devices is sampled autoregressively with already-picked
devices masked out, so the probability of a selection is the product of the
per-token masked-softmax probabilities. Heuristic baselines (uniform random
and an energy-aware epsilon-greedy) share the same call signature, and a
line-delimited JSON protocol lets an external text model act as the selector.
"""

from __future__ import annotations

import json
import selectors
import socket
import subprocess
from dataclasses import dataclass

import numpy as np

from .environment import Observation
from .nn import MLP
from .solver import min_device_energy


# ---------------------------------------------------------------------------
# masked distributions


@dataclass
class MaskedDistribution:
    """Softmax over the valid token set only; invalid tokens get exactly zero."""

    probs: np.ndarray
    logprobs: np.ndarray
    valid: np.ndarray

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.probs), p=self.probs))

    def argmax(self) -> int:
        return int(np.argmax(np.where(self.valid, self.probs, -1.0)))


def masked_logits(raw_logits: np.ndarray, valid: np.ndarray) -> MaskedDistribution:
    """Mask invalid tokens to -inf and renormalize over the valid set."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("empty valid token set")
    logits = np.asarray(raw_logits, dtype=np.float64)
    shifted = logits - logits[valid].max()
    expv = np.where(valid, np.exp(shifted), 0.0)
    total = expv.sum()
    probs = expv / total
    logprobs = np.where(valid, shifted - np.log(total), -np.inf)
    return MaskedDistribution(probs=probs, logprobs=logprobs, valid=valid)


# ---------------------------------------------------------------------------
# observation encoding

FEATURES_PER_DEVICE = 8
GLOBAL_FEATURES = 2


@dataclass
class EncoderStats:
    """Frozen per-feature z-score statistics for the encoded observation."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, vectors: np.ndarray) -> "EncoderStats":
        vectors = np.asarray(vectors, dtype=np.float64)
        mean = vectors.mean(axis=0)
        std = vectors.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean=mean, std=std)


def encode_observation(obs: Observation, stats: EncoderStats | None = None) -> np.ndarray:
    """Flat numeric view of an observation: 8 features per device + 2 globals.

    Per device: loss (post-training loss if the device participated last
    round, otherwise the global-model loss on its data), log10 data size,
    log10 channel gain, resource caps, last round's energies, and the
    selected-last-round flag. Globals: previous accuracy and round fraction.
    """
    st = obs.stat
    loss = np.where(st.selected_mask, st.local_loss, st.global_loss)
    per_device = np.stack([
        loss,
        np.log10(np.maximum(st.data_size, 1.0)),
        np.log10(obs.gains),
        obs.f_max,
        obs.p_max,
        obs.last_e_cmp,
        obs.last_e_com,
        st.selected_mask.astype(np.float64),
    ], axis=1)
    vec = np.concatenate([per_device.ravel(),
                          [st.prev_accuracy, obs.round / obs.horizon]])
    if stats is not None:
        vec = (vec - stats.mean) / stats.std
    return vec


def encoded_dim(num_devices: int) -> int:
    return FEATURES_PER_DEVICE * num_devices + GLOBAL_FEATURES


# ---------------------------------------------------------------------------
# trainable autoregressive policy


class SelectionPolicy:
    """Masked autoregressive token policy over device indices.

    Network input at token step j: encoded observation, a multi-hot of the
    devices already picked this round, and a one-hot of j. Output: one logit
    per device. With all parameters zero the policy is uniform over valid
    devices at every step.
    """

    def __init__(self, num_devices: int, select_size: int,
                 hidden: tuple[int, ...] = (128, 128), seed: int = 0):
        if select_size > num_devices:
            raise ValueError("cannot select more devices than exist")
        self.num_devices = num_devices
        self.select_size = select_size
        self.obs_dim = encoded_dim(num_devices)
        in_dim = self.obs_dim + num_devices + select_size
        self.net = MLP((in_dim,) + tuple(hidden) + (num_devices,))
        self.params = self.net.init_params(np.random.default_rng(seed))
        self.stats: EncoderStats | None = None

    @property
    def num_params(self) -> int:
        return self.net.num_params

    def step_distribution(self, obs: Observation, picked: list[int],
                          params: np.ndarray | None = None) -> MaskedDistribution:
        """Distribution over the next device given the ones already picked."""
        params = self.params if params is None else params
        enc = encode_observation(obs, self.stats)
        mh = np.zeros(self.num_devices)
        mh[list(picked)] = 1.0
        step = np.zeros(self.select_size)
        step[len(picked)] = 1.0
        x = np.concatenate([enc, mh, step])
        logits, _ = self.net.forward(params, x)
        valid = np.ones(self.num_devices, dtype=bool)
        valid[list(picked)] = False
        return masked_logits(logits, valid)

    def sample(self, obs: Observation, rng: np.random.Generator,
               params: np.ndarray | None = None) -> tuple[list[int], float]:
        """Draw an ordered selection; returns it with its total log-probability."""
        params = self.params if params is None else params
        picked: list[int] = []
        logprob = 0.0
        for _ in range(self.select_size):
            dist = self.step_distribution(obs, picked, params)
            tok = dist.sample(rng)
            logprob += float(dist.logprobs[tok])
            picked.append(tok)
        return picked, logprob

    def logprob(self, obs: Observation, selection: list[int],
                params: np.ndarray | None = None) -> float:
        params = self.params if params is None else params
        selection = [int(i) for i in selection]
        if len(set(selection)) != len(selection):
            raise ValueError("selection contains repeats")
        if len(selection) != self.select_size:
            raise ValueError("selection has wrong size")
        total = 0.0
        for j in range(len(selection)):
            dist = self.step_distribution(obs, selection[:j], params)
            total += float(dist.logprobs[selection[j]])
        return total

    def logprob_grad(self, obs: Observation, selection: list[int],
                     params: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        """Log-probability of a given selection and its gradient w.r.t. params."""
        params = self.params if params is None else params
        selection = [int(i) for i in selection]
        grad = np.zeros_like(params)
        total = 0.0
        valid = np.ones(self.num_devices, dtype=bool)
        enc = encode_observation(obs, self.stats)
        picked = np.zeros(self.num_devices)
        for j, tok in enumerate(selection):
            step = np.zeros(self.select_size)
            step[j] = 1.0
            x = np.concatenate([enc, picked, step])
            logits, cache = self.net.forward(params, x)
            dist = masked_logits(logits, valid)
            total += float(dist.logprobs[tok])
            dlogits = -dist.probs
            dlogits[tok] += 1.0
            dlogits[~valid] = 0.0
            grad += self.net.backward(params, cache, dlogits)
            picked = picked.copy()
            picked[tok] = 1.0
            valid = valid.copy()
            valid[tok] = False
        return total, grad

    def selector(self):
        """Adapt to the (obs, rng) -> selection calling convention."""
        def select(obs, rng):
            sel, _ = self.sample(obs, rng)
            return sel
        return select

    # -- checkpointing ------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "kind": "selection-policy",
            "num_devices": self.num_devices,
            "select_size": self.select_size,
            "sizes": list(self.net.sizes),
            "stats_mean": None if self.stats is None else self.stats.mean.tolist(),
            "stats_std": None if self.stats is None else self.stats.std.tolist(),
        }
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
            fh.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "SelectionPolicy":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("ascii"))
            raw = fh.read()
        if header.get("kind") != "selection-policy":
            raise ValueError("not a selection-policy checkpoint")
        hidden = tuple(header["sizes"][1:-1])
        pol = cls(header["num_devices"], header["select_size"], hidden=hidden)
        pol.params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if pol.params.size != pol.net.num_params:
            raise ValueError("checkpoint parameter count mismatch")
        if header["stats_mean"] is not None:
            pol.stats = EncoderStats(np.asarray(header["stats_mean"]),
                                     np.asarray(header["stats_std"]))
        return pol


# ---------------------------------------------------------------------------
# heuristic baselines


def select_random(num_devices: int, select_size: int,
                  rng: np.random.Generator) -> list[int]:
    """Uniform over all size-m subsets, order randomized."""
    if select_size > num_devices:
        raise ValueError("cannot select more devices than exist")
    return rng.choice(num_devices, size=select_size, replace=False).tolist()


def predicted_device_energy(profiles, gains, sys_cfg, select_size: int) -> np.ndarray:
    """Per-device minimum energy at the equal bandwidth share (inf if infeasible)."""
    share = sys_cfg.total_bandwidth / select_size
    out = np.full(len(profiles), np.inf)
    for n, prof in enumerate(profiles):
        res = min_device_energy(prof, share, float(gains[n]), sys_cfg)
        if res is not None:
            out[n] = res[2]
    return out


def select_epsilon_greedy(obs: Observation, known_costs: np.ndarray,
                          eps: float, rng: np.random.Generator) -> list[int]:
    """Top-m by loss-weighted data utility discounted by predicted energy.

    Utility: l_n * sqrt(|D_n|) / (1 + E_n). Each of the m slots is filled
    greedily with probability 1-eps and uniformly at random otherwise, so
    eps=0 is pure top-m and eps=1 matches uniform random selection.
    """
    if not (0.0 <= eps <= 1.0):
        raise ValueError("eps must be in [0, 1]")
    st = obs.stat
    with np.errstate(invalid="ignore"):
        utility = st.global_loss * np.sqrt(st.data_size) / (1.0 + known_costs)
    utility = np.where(np.isfinite(utility), utility, 0.0)
    remaining = list(range(obs.num_devices))
    picked: list[int] = []
    for _ in range(obs.select_size):
        if rng.random() < eps:
            choice = remaining[int(rng.integers(len(remaining)))]
        else:
            choice = remaining[int(np.argmax(utility[remaining]))]
        picked.append(choice)
        remaining.remove(choice)
    return picked


def epsilon_greedy_selector(profiles, sys_cfg, eps: float):
    """Bind the tool-predicted energies into an (obs, rng) -> selection callable."""
    def select(obs, rng):
        costs = predicted_device_energy(profiles, obs.gains, sys_cfg, obs.select_size)
        return select_epsilon_greedy(obs, costs, eps, rng)
    return select


# ---------------------------------------------------------------------------
# external text-model backend protocol
#
# One JSON object per line in both directions.
#   request:  {"id": <int>, "prompt": <str>, "m": <int>, "N": <int>}
#   response: {"id": <int>, "selection_text": "3,1,4"}


class BackendError(Exception):
    pass


class BackendTimeoutError(BackendError):
    pass


class MalformedResponseError(BackendError):
    pass


class OutOfRangeError(BackendError):
    pass


def parse_selection(text: str, select_size: int, num_devices: int) -> list[int]:
    """Parse a comma-separated index list, enforcing size, range and uniqueness."""
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    try:
        indices = [int(p) for p in parts]
    except ValueError as exc:
        raise MalformedResponseError(f"non-integer token in {text!r}") from exc
    if len(indices) != select_size:
        raise MalformedResponseError(
            f"expected {select_size} indices, got {len(indices)}")
    if len(set(indices)) != len(indices):
        raise MalformedResponseError(f"repeated index in {text!r}")
    for i in indices:
        if not (0 <= i < num_devices):
            raise OutOfRangeError(f"device index {i} outside [0, {num_devices})")
    return indices


class SubprocessBackend:
    """Talks the line protocol over a child process's stdin/stdout."""

    def __init__(self, cmd: list[str]):
        self.proc = subprocess.Popen(cmd, stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE, text=True)
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)

    def request(self, payload: dict, timeout: float) -> dict:
        self.proc.stdin.write(json.dumps(payload) + "\n")
        self.proc.stdin.flush()
        if not self._sel.select(timeout):
            raise BackendTimeoutError(f"no response within {timeout} s")
        line = self.proc.stdout.readline()
        if not line:
            raise MalformedResponseError("backend closed the stream")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedResponseError(f"invalid JSON: {line!r}") from exc

    def close(self) -> None:
        self._sel.close()
        if self.proc.poll() is None:
            self.proc.terminate()
            self.proc.wait(timeout=5)


class SocketBackend:
    """Talks the line protocol over a local TCP socket."""

    def __init__(self, host: str, port: int):
        self.addr = (host, port)
        self._sock = None
        self._reader = None

    def _connect(self, timeout: float):
        if self._sock is None:
            self._sock = socket.create_connection(self.addr, timeout=timeout)
            self._reader = self._sock.makefile("r", encoding="ascii")

    def request(self, payload: dict, timeout: float) -> dict:
        self._connect(timeout)
        self._sock.settimeout(timeout)
        self._sock.sendall((json.dumps(payload) + "\n").encode("ascii"))
        try:
            line = self._reader.readline()
        except (socket.timeout, TimeoutError) as exc:
            raise BackendTimeoutError(f"no response within {timeout} s") from exc
        if not line:
            raise MalformedResponseError("backend closed the connection")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedResponseError(f"invalid JSON: {line!r}") from exc

    def close(self) -> None:
        if self._sock is not None:
            self._reader.close()
            self._sock.close()
            self._sock = None


_request_counter = [0]


def query_backend(prompt: str, endpoint, select_size: int, num_devices: int,
                  timeout: float = 30.0) -> list[int]:
    """Ask an external backend for a selection; one retry on malformed output."""
    last_error = None
    for _ in range(2):
        _request_counter[0] += 1
        payload = {"id": _request_counter[0], "prompt": prompt,
                   "m": select_size, "N": num_devices}
        response = endpoint.request(payload, timeout)
        if response.get("id") != payload["id"]:
            last_error = MalformedResponseError(
                f"response id {response.get('id')} does not match request")
            continue
        try:
            return parse_selection(response.get("selection_text", ""),
                                   select_size, num_devices)
        except OutOfRangeError:
            raise
        except MalformedResponseError as exc:
            last_error = exc
    raise last_error


def backend_selector(endpoint, timeout: float = 30.0):
    """Route selections through an external backend using the rendered prompt."""
    def select(obs, rng):
        return query_backend(obs.text, endpoint, obs.select_size,
                             obs.num_devices, timeout=timeout)
    return select
