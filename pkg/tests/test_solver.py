import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_profile, random_sys
from wflsim import solver, wireless
from wflsim.solver import EQUAL_SPLIT, OPTIMIZED
from wflsim.wireless import ChannelState, DeviceProfile, SystemConfig


SYS = SystemConfig(total_bandwidth=2e6, noise_psd=3.98e-21, qos_time=15.0,
                   num_rounds=1, sigma=0.8, local_iters=5)
PROFILE = DeviceProfile(f_max=2e9, p_max=0.5, s_bits=1e6, data_size=1000,
                        cycles_per_sample=7e5, kappa=1e-28)


def test_golden_section_quadratic():
    x, fx = solver.golden_section(lambda x: (x - 2.0) ** 2, 0.0, 5.0, 1e-9)
    assert x == pytest.approx(2.0, abs=1e-6)
    assert fx == pytest.approx(0.0, abs=1e-12)


def test_golden_section_endpoint_guard():
    # decreasing function: the minimum is the right endpoint
    x, fx = solver.golden_section(lambda x: -x, 0.0, 3.0, 1e-9)
    assert x == 3.0 and fx == -3.0


def test_invert_rate_zero_and_hand_value():
    assert solver.invert_rate(0.0, 1e5, 1e-6, 3.98e-21) == 0.0
    v = wireless.tx_rate(1e5, 0.1, 1e-6, 3.98e-21)
    assert solver.invert_rate(v, 1e5, 1e-6, 3.98e-21) == pytest.approx(0.1, rel=1e-9)


@given(st.floats(1e4, 1e6), st.floats(1e-4, 1.0),
       st.floats(1e-7, 1e-6), st.floats(1e-21, 1e-20))
@settings(max_examples=100, deadline=None)
def test_invert_rate_round_trip(bandwidth, power, gain, noise):
    v = wireless.tx_rate(bandwidth, power, gain, noise)
    assert solver.invert_rate(v, bandwidth, gain, noise) == pytest.approx(power, rel=1e-9)


def test_min_device_energy_against_reference_grid():
    res = solver.min_device_energy(PROFILE, 1e5, 1e-6, SYS)
    oracle = solver.brute_force_device_oracle(PROFILE, 1e5, 1e-6, SYS, grid=2001)
    assert res is not None and oracle is not None
    assert abs(res[2] - oracle[2]) / oracle[2] < 1e-3


def test_min_device_energy_monotone_in_qos():
    rng = np.random.default_rng(0)
    for _ in range(30):
        prof = random_profile(rng)
        gain = float(np.exp(rng.uniform(np.log(1e-7), np.log(1e-6))))
        loose = SystemConfig(2e6, 3.98e-21, 20.0, 1, 0.8, 5)
        tight = SystemConfig(2e6, 3.98e-21, 15.0, 1, 0.8, 5)
        e_loose = solver.min_device_energy(prof, 5e5, gain, loose)
        e_tight = solver.min_device_energy(prof, 5e5, gain, tight)
        if e_tight is None:
            continue
        assert e_loose is not None
        assert e_loose[2] <= e_tight[2] + 1e-12


def test_min_device_energy_infeasible_corner():
    prof = DeviceProfile(f_max=1e8, p_max=0.001, s_bits=5e7, data_size=5000,
                         cycles_per_sample=7e5, kappa=1e-28)
    assert solver.min_device_energy(prof, 1e4, 1e-7, SYS) is None


def test_min_device_energy_beats_naive_feasible_point():
    rng = np.random.default_rng(1)
    for _ in range(20):
        prof = random_profile(rng)
        sys_cfg = random_sys(rng)
        gain = float(np.exp(rng.uniform(np.log(1e-7), np.log(1e-6))))
        t_cmp = wireless.compute_time(prof, sys_cfg.local_iters, prof.f_max)
        rate = wireless.tx_rate(5e5, prof.p_max, gain, sys_cfg.noise_psd)
        t_com, e_com = wireless.tx_time_energy(prof.s_bits, prof.p_max, rate)
        if t_cmp + t_com > sys_cfg.qos_time:
            continue
        naive = wireless.compute_energy(prof, sys_cfg.local_iters, prof.f_max) + e_com
        res = solver.min_device_energy(prof, 5e5, gain, sys_cfg)
        assert res is not None and res[2] <= naive + 1e-12


def test_allocation_respects_limits():
    rng = np.random.default_rng(2)
    profiles = [random_profile(rng) for _ in range(4)]
    channel = ChannelState(np.exp(rng.uniform(np.log(1e-7), np.log(1e-6), 4)))
    alloc = solver.allocate([0, 1, 2, 3], profiles, channel, SYS, EQUAL_SPLIT)
    if alloc.feasible:
        for da in alloc.devices:
            assert da.freq <= profiles[da.device].f_max * (1 + 1e-12)
            assert da.power <= profiles[da.device].p_max * (1 + 1e-12)
            assert da.time <= SYS.qos_time + 1e-9
        assert sum(d.bandwidth for d in alloc.devices) == pytest.approx(
            SYS.total_bandwidth, rel=1e-12)


def test_equal_split_shares():
    rng = np.random.default_rng(3)
    profiles = [random_profile(rng, s_bits=1e6) for _ in range(4)]
    channel = ChannelState(np.full(4, 5e-7))
    alloc = solver.allocate([0, 1, 2, 3], profiles, channel, SYS, EQUAL_SPLIT)
    assert alloc.feasible
    for da in alloc.devices:
        assert da.bandwidth == pytest.approx(5e5)
    single = solver.allocate([2], profiles, channel, SYS, EQUAL_SPLIT)
    assert single.devices[0].bandwidth == pytest.approx(2e6)


def test_allocate_validates_selection():
    rng = np.random.default_rng(4)
    profiles = [random_profile(rng) for _ in range(3)]
    channel = ChannelState(np.full(3, 5e-7))
    with pytest.raises(ValueError):
        solver.allocate([], profiles, channel, SYS)
    with pytest.raises(ValueError):
        solver.allocate([0, 0], profiles, channel, SYS)
    with pytest.raises(ValueError):
        solver.allocate([5], profiles, channel, SYS)


def test_optimized_never_worse_than_equal_split():
    rng = np.random.default_rng(5)
    checked = 0
    while checked < 100:
        n = int(rng.integers(2, 5))
        profiles = [random_profile(rng, s_bits=4e6) for _ in range(n)]
        channel = ChannelState(np.exp(rng.uniform(np.log(1e-7), np.log(1e-6), n)))
        sys_cfg = random_sys(rng, qos_range=(2.0, 10.0))
        equal = solver.allocate(list(range(n)), profiles, channel, sys_cfg, EQUAL_SPLIT)
        if not equal.feasible:
            continue
        opt = solver.allocate(list(range(n)), profiles, channel, sys_cfg, OPTIMIZED)
        assert opt.feasible
        assert opt.total_energy <= equal.total_energy + 1e-9
        assert sum(d.bandwidth for d in opt.devices) == pytest.approx(
            sys_cfg.total_bandwidth, rel=1e-12)
        checked += 1


def test_optimize_bandwidth_symmetric_devices_stay_equal():
    prof = PROFILE
    profiles = [prof, prof]
    channel = ChannelState(np.full(2, 5e-7))
    alloc = solver.optimize_bandwidth([0, 1], profiles, channel, SYS)
    assert alloc.feasible
    b = [d.bandwidth for d in alloc.devices]
    assert b[0] == pytest.approx(b[1], rel=1e-3)


def test_optimize_bandwidth_matches_simplex_grid():
    rng = np.random.default_rng(6)
    profiles = [random_profile(rng, s_bits=4e6) for _ in range(3)]
    channel = ChannelState(np.exp(rng.uniform(np.log(1e-7), np.log(1e-6), 3)))
    sys_cfg = SystemConfig(2e6, 3.98e-21, 6.0, 1, 0.8, 5)
    alloc = solver.allocate([0, 1, 2], profiles, channel, sys_cfg, OPTIMIZED)
    assert alloc.feasible

    def subset_energy(bws):
        total = 0.0
        for dev, bw in enumerate(bws):
            res = solver.min_device_energy(profiles[dev], bw, channel.gains[dev], sys_cfg)
            if res is None:
                return math.inf
            total += res[2]
        return total

    best = math.inf
    grid = np.linspace(0.005, 0.99, 200)
    for x in grid:
        for y in grid:
            if x + y >= 0.995:
                continue
            b = (x * 2e6, y * 2e6, (1 - x - y) * 2e6)
            best = min(best, subset_energy(b))
    assert alloc.total_energy <= best * (1 + 1e-2)


def test_feasibility_edges():
    rng = np.random.default_rng(7)
    profiles = [random_profile(rng, s_bits=1e6) for _ in range(4)]
    channel = ChannelState(np.full(4, 5e-7))
    tiny = SystemConfig(2e6, 3.98e-21, 1e-9, 1, 0.8, 5)
    assert not solver.feasibility([0, 1], profiles, channel, tiny)
    generous = SystemConfig(2e6, 3.98e-21, 100.0, 1, 0.8, 5)
    assert solver.feasibility([0], profiles, channel, generous)
    # dropping a device from a feasible equal split keeps it feasible
    if solver.feasibility([0, 1, 2, 3], profiles, channel, SYS):
        assert solver.feasibility([0, 1, 2], profiles, channel, SYS)


def test_oracle_agrees_with_solver_on_random_instances():
    rng = np.random.default_rng(8)
    agreements = 0
    while agreements < 10:
        prof = random_profile(rng)
        sys_cfg = random_sys(rng)
        bw = float(rng.uniform(2e5, 2e6))
        gain = float(np.exp(rng.uniform(np.log(1e-7), np.log(1e-6))))
        res = solver.min_device_energy(prof, bw, gain, sys_cfg)
        oracle = solver.brute_force_device_oracle(prof, bw, gain, sys_cfg, grid=801)
        assert (res is None) == (oracle is None)
        if res is None:
            continue
        assert abs(res[2] - oracle[2]) / oracle[2] < 5e-3  # coarse grid, looser tol
        agreements += 1


def test_oracle_grid_refinement_converges():
    coarse = solver.brute_force_device_oracle(PROFILE, 1e5, 1e-6, SYS, grid=201)
    fine = solver.brute_force_device_oracle(PROFILE, 1e5, 1e-6, SYS, grid=2001)
    assert abs(coarse[2] - fine[2]) / fine[2] < 1e-3


def test_oracle_rejects_coarse_grid():
    with pytest.raises(ValueError):
        solver.brute_force_device_oracle(PROFILE, 1e5, 1e-6, SYS, grid=50)
