import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wflsim import wireless
from wflsim.wireless import DeviceProfile, SystemConfig


PROFILE = DeviceProfile(f_max=2e9, p_max=0.5, s_bits=1e6, data_size=1000,
                        cycles_per_sample=7e5, kappa=1e-28)


def test_compute_time_hand_value():
    assert wireless.compute_time(PROFILE, 5, 1e9) == pytest.approx(3.5)


def test_compute_time_inverse_proportional():
    assert wireless.compute_time(PROFILE, 5, 2e9) == pytest.approx(
        wireless.compute_time(PROFILE, 5, 1e9) / 2)
    # f_max achieves the minimum
    assert wireless.compute_time(PROFILE, 5, PROFILE.f_max) <= \
        wireless.compute_time(PROFILE, 5, 0.3 * PROFILE.f_max)


def test_compute_energy_hand_value_and_quadratic():
    assert wireless.compute_energy(PROFILE, 5, 1e9) == pytest.approx(0.35)
    assert wireless.compute_energy(PROFILE, 5, 2e9) == pytest.approx(
        4 * wireless.compute_energy(PROFILE, 5, 1e9))
    assert wireless.compute_energy(PROFILE, 5, 1e3) < 1e-9


def test_time_energy_product_identity():
    for f in (1e8, 5e8, 1.7e9):
        t = wireless.compute_time(PROFILE, 5, f)
        e = wireless.compute_energy(PROFILE, 5, f)
        cycles = PROFILE.cycles_per_sample * PROFILE.data_size * 5
        assert t * e == pytest.approx(PROFILE.kappa * cycles ** 2 * f, rel=1e-12)


def test_frequency_bounds_enforced():
    with pytest.raises(ValueError):
        wireless.compute_time(PROFILE, 5, 3e9)
    with pytest.raises(ValueError):
        wireless.compute_energy(PROFILE, 5, 0.0)


def test_tx_rate_hand_value():
    v = wireless.tx_rate(1e5, 0.1, 1e-6, 3.98e-21)
    assert v == pytest.approx(2.79e6, rel=1e-3)


def test_tx_rate_zero_power_and_monotone():
    assert wireless.tx_rate(1e5, 0.0, 1e-6, 3.98e-21) == 0.0
    rates = [wireless.tx_rate(1e5, p, 1e-6, 3.98e-21) for p in (0.01, 0.1, 1.0)]
    assert rates[0] < rates[1] < rates[2]


def test_tx_rate_concave_in_power():
    rng = np.random.default_rng(0)
    for _ in range(100):
        b = float(rng.uniform(1e4, 1e6))
        g = float(np.exp(rng.uniform(np.log(1e-7), np.log(1e-6))))
        p1, p2 = sorted(rng.uniform(1e-4, 1.0, size=2))
        mid = wireless.tx_rate(b, (p1 + p2) / 2, g, 3.98e-21)
        avg = (wireless.tx_rate(b, p1, g, 3.98e-21)
               + wireless.tx_rate(b, p2, g, 3.98e-21)) / 2
        assert mid >= avg - 1e-9


def test_tx_time_energy_hand_values():
    t, e = wireless.tx_time_energy(1e6, 0.1, 2e6)
    assert t == pytest.approx(0.5)
    assert e == pytest.approx(0.05)
    assert wireless.tx_time_energy(0.0, 0.5, 1e6) == (0.0, 0.0)
    t_inf, e_inf = wireless.tx_time_energy(1e6, 0.5, 0.0)
    assert math.isinf(t_inf) and math.isinf(e_inf)


@given(st.floats(1e3, 1e8), st.floats(1e-3, 10.0), st.floats(1e5, 1e8))
@settings(max_examples=50, deadline=None)
def test_tx_energy_identity(s_bits, power, rate):
    t, e = wireless.tx_time_energy(s_bits, power, rate)
    assert e == pytest.approx(power * s_bits / rate, rel=1e-12)


def test_round_totals():
    per_dev = [(1.0, 2.0, 0.1, 0.2), (3.0, 2.0, 0.3, 0.4)]
    energy, time_total = wireless.round_totals(per_dev)
    assert energy == pytest.approx(1.0)
    assert time_total == pytest.approx(5.0)
    e1, t1 = wireless.round_totals(per_dev[:1])
    assert (e1, t1) == (pytest.approx(0.3), pytest.approx(3.0))
    # permutation invariance
    assert wireless.round_totals(per_dev[::-1]) == (energy, time_total)


def test_sample_channel_range_and_determinism():
    rng = np.random.default_rng(1)
    ch = wireless.sample_channel(rng, 1000, 1e-7, 1e-6)
    assert np.all((ch.gains >= 1e-7) & (ch.gains <= 1e-6))
    again = wireless.sample_channel(np.random.default_rng(1), 1000, 1e-7, 1e-6)
    assert np.array_equal(ch.gains, again.gains)
    const = wireless.sample_channel(rng, 5, 3e-7, 3e-7)
    assert np.all(const.gains == 3e-7)


def test_sample_channel_log_uniform_median():
    rng = np.random.default_rng(2)
    ch = wireless.sample_channel(rng, 100_000, 1e-7, 1e-6)
    geo_mid = math.sqrt(1e-7 * 1e-6)
    assert abs(np.median(ch.gains) - geo_mid) / geo_mid < 0.03


def test_profile_validation():
    with pytest.raises(ValueError):
        DeviceProfile(f_max=-1, p_max=0.5, s_bits=1e6, data_size=10,
                      cycles_per_sample=7e5, kappa=1e-28)
    with pytest.raises(ValueError):
        DeviceProfile(f_max=1e12, p_max=0.5, s_bits=1e6, data_size=10,
                      cycles_per_sample=7e5, kappa=1e-28)
    with pytest.raises(ValueError):
        SystemConfig(total_bandwidth=2e6, noise_psd=3.98e-21, qos_time=15,
                     num_rounds=10, sigma=1.5, local_iters=5)
