import numpy as np
import pytest

from wflsim import config as cfgmod
from wflsim import environment, flsim, wireless


def desk_config(**overrides):
    """Desk-small config with optional {section: {key: value}} overrides."""
    return cfgmod.load_config(preset="desk-small", overrides=overrides)


@pytest.fixture(scope="session")
def desk_env():
    """Shared read-only desk-small environment (reset per use)."""
    return cfgmod.make_env(desk_config())


@pytest.fixture()
def small_env():
    """Fast 6-round environment for episode-level tests."""
    cfg = desk_config(experiment={"rounds": 6})
    return cfgmod.make_env(cfg)


def make_tiny_env(qos=1.315, rounds=6, sigma=0.8, select_size=4, alloc_mode="equal"):
    cfg = desk_config(experiment={"rounds": rounds, "select_size": select_size},
                      wireless={"qos_s": qos, "sigma": sigma,
                                "alloc_mode": alloc_mode})
    return cfgmod.make_env(cfg)


def random_profile(rng, s_bits=4e6):
    return wireless.DeviceProfile(
        f_max=float(rng.uniform(0.5e9, 4e9)),
        p_max=float(rng.uniform(0.001, 1.0)),
        s_bits=s_bits,
        data_size=int(rng.integers(100, 3000)),
        cycles_per_sample=7e5,
        kappa=1e-28,
    )


def random_sys(rng, qos_range=(5.0, 20.0)):
    return wireless.SystemConfig(
        total_bandwidth=2e6, noise_psd=3.98e-21,
        qos_time=float(rng.uniform(*qos_range)),
        num_rounds=1, sigma=0.8, local_iters=5)
