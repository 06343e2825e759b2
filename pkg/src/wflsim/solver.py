"""Minimum-energy resource allocation for a selected device subset.

For one device with fixed bandwidth, the joint (frequency, power) energy
minimum under the round-time budget reduces to a one-dimensional search over
the compute-time split tau = T_cmp: the best frequency is the slowest one
that finishes in tau, and the best transmit power is the smallest one that
uploads within the remaining budget (upload energy decreases as upload time
grows). The scalar objective

    h(tau) = kappa * (C |D_n| I)^3 / tau^2 + p(tau) * (T_qos - tau)

is minimized with golden-section search; because its unimodality is not
guaranteed a priori, both interval endpoints are also evaluated and the best
of interior/endpoints returned.

Bandwidth across the subset is either split equally or improved by pairwise
coordinate descent that moves bandwidth between device pairs while keeping
the total exactly constant.

Infeasibility is a value, not an exception: callers convert it into a
zero-reward penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .wireless import ChannelState, DeviceProfile, SystemConfig, tx_rate

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0

EQUAL_SPLIT = "equal"
OPTIMIZED = "optimized"

GOLDEN_TAU_TOL = 1e-9       # absolute tolerance on the compute-time split, s
BANDWIDTH_TOL = 1e-6        # total-energy improvement cutoff, J
BANDWIDTH_MAX_SWEEPS = 200


def golden_section(f, lo: float, hi: float, tol: float) -> tuple[float, float]:
    """Minimize a scalar function on [lo, hi]; returns (x, f(x)).

    Endpoints are evaluated as a guard, so the result is never worse than
    either boundary even if f is not unimodal.
    """
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    candidates = [(lo, f(lo)), (hi, f(hi)), (c, fc), (d, fd)]
    return min(candidates, key=lambda p: p[1])


def invert_rate(v_target: float, bandwidth: float, gain: float,
                noise_psd: float) -> float:
    """Power achieving a target rate: p = (N0 B / G) (2^(v/B) - 1)."""
    if v_target < 0:
        raise ValueError("target rate must be non-negative")
    if v_target == 0:
        return 0.0
    return noise_psd * bandwidth / gain * (2.0 ** (v_target / bandwidth) - 1.0)


@dataclass
class DeviceAllocation:
    device: int
    freq: float
    power: float
    bandwidth: float
    t_cmp: float
    t_com: float
    e_cmp: float
    e_com: float

    @property
    def energy(self) -> float:
        return self.e_cmp + self.e_com

    @property
    def time(self) -> float:
        return self.t_cmp + self.t_com


@dataclass
class ResourceAllocation:
    """Solver output for one selection; ``feasible=False`` carries no devices."""

    selection: tuple[int, ...]
    feasible: bool
    devices: list[DeviceAllocation] = field(default_factory=list)
    total_energy: float = math.inf
    total_time: float = math.inf

    @classmethod
    def infeasible(cls, selection) -> "ResourceAllocation":
        return cls(selection=tuple(selection), feasible=False)


def min_device_energy(profile: DeviceProfile, bandwidth: float,
                      gain: float, sys: SystemConfig):
    """Minimum-energy (f, p) for one device at fixed bandwidth.

    Returns (freq, power, energy) or None when even maximum resources cannot
    meet the time budget.
    """
    if bandwidth <= 0:
        return None
    cycles = profile.cycles_per_sample * profile.data_size * sys.local_iters
    tau_lo = cycles / profile.f_max
    v_max = tx_rate(bandwidth, profile.p_max, gain, sys.noise_psd)
    if v_max <= 0:
        return None
    t_com_min = profile.s_bits / v_max
    tau_hi = sys.qos_time - t_com_min
    if tau_lo > tau_hi:
        return None

    noise_over_gain = sys.noise_psd * bandwidth / gain
    kappa_c3 = profile.kappa * cycles ** 3

    def power_for(tau: float) -> float:
        t_com = sys.qos_time - tau
        return noise_over_gain * (2.0 ** (profile.s_bits / (bandwidth * t_com)) - 1.0)

    def h(tau: float) -> float:
        return kappa_c3 / (tau * tau) + power_for(tau) * (sys.qos_time - tau)

    tau, energy = golden_section(h, tau_lo, tau_hi, GOLDEN_TAU_TOL)
    freq = cycles / tau
    power = min(power_for(tau), profile.p_max)  # guard fp roundoff at tau_hi
    return freq, power, energy


def _device_allocation(dev: int, profile: DeviceProfile, bandwidth: float,
                       gain: float, sys: SystemConfig):
    best = min_device_energy(profile, bandwidth, gain, sys)
    if best is None:
        return None
    freq, power, _ = best
    t_cmp = profile.cycles_per_sample * profile.data_size * sys.local_iters / freq
    e_cmp = profile.kappa * profile.cycles_per_sample * profile.data_size \
        * sys.local_iters * freq * freq
    rate = tx_rate(bandwidth, power, gain, sys.noise_psd)
    t_com = profile.s_bits / rate if rate > 0 else math.inf
    e_com = power * t_com
    return DeviceAllocation(device=dev, freq=freq, power=power, bandwidth=bandwidth,
                            t_cmp=t_cmp, t_com=t_com, e_cmp=e_cmp, e_com=e_com)


def allocate(selection, profiles: list[DeviceProfile], channel: ChannelState,
             sys: SystemConfig, mode: str = EQUAL_SPLIT) -> ResourceAllocation:
    """Allocate (f, p, B) to the selected devices.

    ``equal`` splits bandwidth evenly then minimizes each device's energy
    independently; ``optimized`` additionally redistributes bandwidth across
    the subset. Any per-device infeasibility makes the whole allocation
    infeasible.
    """
    selection = tuple(int(i) for i in selection)
    if not selection:
        raise ValueError("empty selection")
    if len(set(selection)) != len(selection):
        raise ValueError("selection contains repeats")
    if max(selection) >= len(profiles) or min(selection) < 0:
        raise ValueError("selection index out of range")
    if mode not in (EQUAL_SPLIT, OPTIMIZED):
        raise ValueError(f"unknown allocation mode {mode!r}")

    share = sys.total_bandwidth / len(selection)
    bandwidths = {dev: share for dev in selection}
    alloc = _assemble(selection, profiles, channel, sys, bandwidths)
    if not alloc.feasible or mode == EQUAL_SPLIT or len(selection) == 1:
        return alloc
    return optimize_bandwidth(selection, profiles, channel, sys,
                              max_iters=BANDWIDTH_MAX_SWEEPS, tol=BANDWIDTH_TOL)


def _assemble(selection, profiles, channel, sys,
              bandwidths: dict[int, float]) -> ResourceAllocation:
    devices = []
    for dev in selection:
        da = _device_allocation(dev, profiles[dev], bandwidths[dev],
                                channel.gains[dev], sys)
        if da is None:
            return ResourceAllocation.infeasible(selection)
        devices.append(da)
    total_e = sum(d.energy for d in devices)
    total_t = max(d.time for d in devices)
    return ResourceAllocation(selection=tuple(selection), feasible=True,
                              devices=devices, total_energy=total_e,
                              total_time=total_t)


def optimize_bandwidth(selection, profiles: list[DeviceProfile],
                       channel: ChannelState, sys: SystemConfig,
                       max_iters: int = BANDWIDTH_MAX_SWEEPS,
                       tol: float = BANDWIDTH_TOL) -> ResourceAllocation:
    """Pairwise bandwidth descent from the equal split.

    Each move re-splits one pair's combined bandwidth by golden-section on
    the pair's summed minimum energy; the complement is assigned exactly so
    the bandwidth total never drifts. Total energy is non-increasing by
    construction (a move is applied only when it improves).
    """
    selection = tuple(int(i) for i in selection)
    share = sys.total_bandwidth / len(selection)
    bandwidths = {dev: share for dev in selection}
    alloc = _assemble(selection, profiles, channel, sys, bandwidths)
    if not alloc.feasible:
        return alloc
    if len(selection) == 1:
        return alloc

    def device_energy(dev: int, bw: float) -> float:
        res = min_device_energy(profiles[dev], bw, channel.gains[dev], sys)
        return math.inf if res is None else res[2]

    total = alloc.total_energy
    for _ in range(max_iters):
        improved = 0.0
        for i in range(len(selection)):
            for j in range(i + 1, len(selection)):
                a, b = selection[i], selection[j]
                pair_bw = bandwidths[a] + bandwidths[b]
                current = device_energy(a, bandwidths[a]) + device_energy(b, bandwidths[b])

                def pair_cost(x: float) -> float:
                    return device_energy(a, x * pair_bw) + device_energy(b, pair_bw - x * pair_bw)

                x, cost = golden_section(pair_cost, 1e-3, 1.0 - 1e-3, 1e-6)
                if cost < current - 1e-15:
                    new_a = x * pair_bw
                    bandwidths[a] = new_a
                    bandwidths[b] = pair_bw - new_a
                    improved += current - cost
        new_alloc = _assemble(selection, profiles, channel, sys, bandwidths)
        if new_alloc.feasible and new_alloc.total_energy <= total + 1e-12:
            alloc, total = new_alloc, new_alloc.total_energy
        if improved < tol:
            break
    return alloc


def feasibility(selection, profiles: list[DeviceProfile], channel: ChannelState,
                sys: SystemConfig) -> bool:
    """Whether the equal-split allocation can meet the QoS budget."""
    return allocate(selection, profiles, channel, sys, mode=EQUAL_SPLIT).feasible


def brute_force_device_oracle(profile: DeviceProfile, bandwidth: float,
                              gain: float, sys: SystemConfig, grid: int = 2001):
    """Exhaustive (f, p) grid oracle for one device at fixed bandwidth.

    Returns (freq, power, energy) at the minimum-energy feasible grid point,
    or None when no grid point is feasible. Grids are geometric over
    (0, f_max] and (0, p_max] since both quantities span decades and optimal
    powers can sit far below the cap. Independent search path from
    ``min_device_energy``; used to pin the solver's correctness.
    """
    if grid < 100:
        raise ValueError("grid too coarse to act as an oracle")
    cycles = profile.cycles_per_sample * profile.data_size * sys.local_iters
    # prune to the per-axis feasible ranges (closed-form necessary conditions):
    # any f below cycles/T_qos or p below the requirement at the slackest
    # possible upload window is infeasible for every combination.
    f_lo = cycles / sys.qos_time
    if f_lo > profile.f_max:
        return None
    slack = sys.qos_time - cycles / profile.f_max
    p_lo = invert_rate(profile.s_bits / slack, bandwidth, gain, sys.noise_psd)
    if p_lo > profile.p_max:
        return None
    p_lo = max(p_lo, profile.p_max * 1e-15)
    v_max = tx_rate(bandwidth, profile.p_max, gain, sys.noise_psd)
    tau_hi = sys.qos_time - profile.s_bits / v_max
    if tau_hi < cycles / profile.f_max:
        return None
    freqs = cycles / np.linspace(cycles / profile.f_max, tau_hi, grid)
    powers = np.geomspace(p_lo, profile.p_max, grid)
    t_cmp = cycles / freqs
    e_cmp = profile.kappa * cycles * freqs ** 2
    rates = bandwidth * np.log2(1.0 + powers * gain / (sys.noise_psd * bandwidth))
    t_com = profile.s_bits / rates
    e_com = powers * t_com
    feasible = t_cmp[:, None] + t_com[None, :] <= sys.qos_time
    if not feasible.any():
        return None
    energy = e_cmp[:, None] + e_com[None, :]
    energy[~feasible] = np.inf
    i, j = np.unravel_index(np.argmin(energy), energy.shape)
    return float(freqs[i]), float(powers[j]), float(energy[i, j])
