"""Per-device computation/communication cost model for one training round.

All functions are pure closed forms over SI units (Hz, W, J, s, bits).
The noise power spectral density default corresponds to -174 dBm/Hz thermal
noise, i.e. about 3.98e-21 W/Hz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NOISE_PSD_174_DBM_HZ = 10 ** (-174 / 10) * 1e-3  # W/Hz


@dataclass(frozen=True)
class DeviceProfile:
    """Static device capabilities and data assignment."""

    f_max: float          # Hz
    p_max: float          # W
    s_bits: float         # upload size per round, bits
    data_size: int        # |D_n|, samples
    cycles_per_sample: float
    kappa: float          # effective switched capacitance

    def __post_init__(self):
        if min(self.f_max, self.p_max, self.s_bits, self.data_size,
               self.cycles_per_sample, self.kappa) <= 0:
            raise ValueError("all profile fields must be positive")
        if self.f_max > 1e11:
            raise ValueError("f_max implausibly large")
        if self.p_max > 100:
            raise ValueError("p_max implausibly large")


@dataclass(frozen=True)
class SystemConfig:
    total_bandwidth: float   # Hz
    noise_psd: float         # W/Hz
    qos_time: float          # s
    num_rounds: int
    sigma: float             # accuracy/energy weight in the reward
    local_iters: int

    def __post_init__(self):
        if self.total_bandwidth <= 0 or self.noise_psd <= 0 or self.qos_time <= 0:
            raise ValueError("bandwidth, noise density and QoS time must be positive")
        if not (0.0 <= self.sigma <= 1.0):
            raise ValueError("sigma must be in [0, 1]")
        if self.local_iters < 1 or self.num_rounds < 1:
            raise ValueError("local_iters and num_rounds must be >= 1")


@dataclass
class ChannelState:
    """Per-device dimensionless power gains for one round."""

    gains: np.ndarray

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.float64)
        if np.any(self.gains <= 0):
            raise ValueError("gains must be positive")


def sample_channel(rng: np.random.Generator, n: int,
                   g_lo: float, g_hi: float) -> ChannelState:
    """I.i.d. log-uniform gains on [g_lo, g_hi] (dB values spread evenly)."""
    if not (0 < g_lo <= g_hi):
        raise ValueError("need 0 < g_lo <= g_hi")
    if g_lo == g_hi:
        return ChannelState(np.full(n, g_lo))
    u = rng.uniform(math.log(g_lo), math.log(g_hi), size=n)
    return ChannelState(np.exp(u))


def compute_time(profile: DeviceProfile, local_iters: int, f: float) -> float:
    """Local-training time: C * |D_n| * I / f."""
    if not (0 < f <= profile.f_max):
        raise ValueError("frequency out of (0, f_max]")
    return profile.cycles_per_sample * profile.data_size * local_iters / f


def compute_energy(profile: DeviceProfile, local_iters: int, f: float) -> float:
    """Local-training energy: kappa * C * |D_n| * I * f^2."""
    if not (0 < f <= profile.f_max):
        raise ValueError("frequency out of (0, f_max]")
    return profile.kappa * profile.cycles_per_sample * profile.data_size * local_iters * f * f


def tx_rate(bandwidth: float, power: float, gain: float, noise_psd: float) -> float:
    """Achievable uplink rate: B_n * log2(1 + p*G / (N0*B_n)), bits/s."""
    if bandwidth <= 0 or gain <= 0 or noise_psd <= 0 or power < 0:
        raise ValueError("bandwidth, gain, noise_psd must be positive; power >= 0")
    return bandwidth * math.log2(1.0 + power * gain / (noise_psd * bandwidth))


def tx_time_energy(s_bits: float, power: float, rate: float) -> tuple[float, float]:
    """Upload time s_n / v and energy p * T. Zero payload costs nothing."""
    if s_bits == 0:
        return 0.0, 0.0
    if rate <= 0:
        return math.inf, math.inf
    t = s_bits / rate
    return t, power * t


def round_totals(per_device: list[tuple[float, float, float, float]]) -> tuple[float, float]:
    """Totals over (T_cmp, T_com, E_cmp, E_com) tuples.

    Energy adds across devices; round time is the slowest device's
    compute-plus-upload time.
    """
    if not per_device:
        raise ValueError("empty device list")
    energy = sum(e_cmp + e_com for _, _, e_cmp, e_com in per_device)
    time_total = max(t_cmp + t_com for t_cmp, t_com, _, _ in per_device)
    return energy, time_total


def sample_profiles(rng: np.random.Generator, n: int, data_sizes: list[int],
                    f_max_range: tuple[float, float],
                    p_max_range: tuple[float, float],
                    s_bits: float, cycles_per_sample: float,
                    kappa: float) -> list[DeviceProfile]:
    """Draw heterogeneous device capabilities uniformly over the given ranges."""
    f_maxes = rng.uniform(*f_max_range, size=n)
    p_maxes = rng.uniform(*p_max_range, size=n)
    return [
        DeviceProfile(f_max=float(f_maxes[i]), p_max=float(p_maxes[i]),
                      s_bits=s_bits, data_size=int(data_sizes[i]),
                      cycles_per_sample=cycles_per_sample, kappa=kappa)
        for i in range(n)
    ]
