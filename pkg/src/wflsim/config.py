"""Experiment configuration: typed schema, presets, fingerprinting, environment assembly.

Config files are INI-style text with one section per subsystem. Every key is
typed and validated against the schema below; unknown sections or keys are
rejected. A content fingerprint of the full configuration is embedded in
every output file so runs can be traced to their exact settings.

Presets:

- ``desk-small``: 8 devices, pick 4, 20 rounds, 2-feature 4-class blobs.
  The QoS budget is tuned so roughly 70% of uniform-random selections are
  feasible, and the reward's energy unit is pegged to a cheap selection's
  round energy. Sub-minute end-to-end runs.
- ``desk-robust``: full participation on a wide-margin binary task over 40
  rounds; the base configuration for the update-perturbation (quantization
  and differential-privacy) experiments.
- ``paper-default``: the published simulation constants (20 devices, 100
  rounds, 53.21 Mbit uploads, 15 s QoS) over a synthetic 10-class task.
- ``scenario-2``: desk-small population with shifted device capability
  ranges, for transfer experiments without retraining.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json

import numpy as np

from . import flsim, solver, wireless
from .environment import DPConfig, WirelessFLEnv

SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "experiment": {
        "seed": (int, 0),
        "output_dir": (str, "runs/out"),
        "num_devices": (int, 8),
        "select_size": (int, 4),
        "rounds": (int, 20),
    },
    "data": {
        "kind": (str, "synthetic-blobs"),      # synthetic-blobs | file
        "features": (int, 2),
        "classes": (int, 4),
        "train_samples": (int, 1200),
        "test_samples": (int, 400),
        "spread": (float, 0.55),
        "alpha": (float, 0.2),
        "reuse_partition": (bool, True),
        "data_seed": (int, 7),
        "train_file": (str, ""),
        "test_file": (str, ""),
    },
    "fl": {
        "local_iters": (int, 5),
        "learning_rate": (float, 0.1),
        "aggregation": (str, flsim.AGG_PARTICIPATING),
        "weight_decay": (float, 0.0),
        "quantize_bits": (int, 0),              # 0 disables quantization
        "dp_clip": (float, 0.0),                # 0 disables DP noise
        "dp_epsilon": (float, 1.0),
        "dp_delta": (float, 1e-5),
        "dp_rounds": (int, 1),
    },
    "wireless": {
        "bandwidth_hz": (float, 2e6),
        "noise_psd": (float, wireless.NOISE_PSD_174_DBM_HZ),
        "qos_s": (float, 1.315),
        "sigma": (float, 0.8),
        "gain_lo": (float, 1e-7),
        "gain_hi": (float, 1e-6),
        "model_bits": (float, 4e6),
        "fmax_lo": (float, 0.5e9),
        "fmax_hi": (float, 4e9),
        "pmax_lo": (float, 0.001),
        "pmax_hi": (float, 1.0),
        "cycles_per_sample": (float, 7e5),
        "kappa": (float, 1e-28),
        "alloc_mode": (str, solver.EQUAL_SPLIT),
        "energy_scale": (float, 0.02),
        "profile_seed": (int, 11),
    },
    "world": {
        "window": (int, 4),
        "hidden": (str, "128,128"),
        "epochs": (int, 150),
        "lr": (float, 1e-3),
        "batch": (int, 8),
        "trajectories": (int, 100),
        "holdout_fraction": (float, 0.1),
    },
    "policy": {
        "hidden": (str, "128,128"),
        "eps_greedy": (float, 0.1),
    },
    "train": {
        "algo": (str, "grpo"),                  # grpo | ppo
        "env": (str, "virtual"),                # virtual | real
        "iterations": (int, 60),
        "batch_episodes": (int, 16),
        "epochs": (int, 4),
        "lr": (float, 1e-3),
        "clip": (float, 0.2),
        "gamma": (float, 1.0),
        "std_floor": (float, 1e-8),
    },
}

PRESETS: dict[str, dict[str, dict[str, object]]] = {
    "desk-small": {},
    "desk-robust": {
        "experiment": {"select_size": 8, "rounds": 40},
        "data": {"classes": 2, "spread": 0.35, "alpha": 0.5, "data_seed": 21},
        "fl": {"learning_rate": 0.5, "weight_decay": 0.02},
        "wireless": {"qos_s": 3.0, "profile_seed": 24},
    },
    "paper-default": {
        "experiment": {"num_devices": 20, "select_size": 5, "rounds": 100},
        "data": {"features": 16, "classes": 10, "train_samples": 10000,
                 "test_samples": 2000},
        "wireless": {"qos_s": 15.0, "model_bits": 5.321e7, "energy_scale": 1.0},
        "world": {"trajectories": 600},
        "train": {"iterations": 200},
    },
    "scenario-2": {
        "wireless": {"fmax_lo": 0.3e9, "fmax_hi": 2e9, "pmax_lo": 5e-4,
                     "pmax_hi": 0.5, "profile_seed": 12},
    },
}

_BOOL_STRINGS = {"true": True, "false": False, "1": True, "0": False,
                 "yes": True, "no": False}


def default_config() -> dict:
    return {section: {key: default for key, (_, default) in keys.items()}
            for section, keys in SCHEMA.items()}


def _coerce(section: str, key: str, raw) -> object:
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ValueError(f"unknown config key [{section}] {key}")
    typ, _ = SCHEMA[section][key]
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        value = _BOOL_STRINGS.get(str(raw).strip().lower())
        if value is None:
            raise ValueError(f"[{section}] {key}: expected a boolean, got {raw!r}")
        return value
    try:
        return typ(raw)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"[{section}] {key}: expected {typ.__name__}, got {raw!r}") from exc


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    out = copy.deepcopy(cfg)
    for section, keys in overrides.items():
        for key, raw in keys.items():
            out[section][key] = _coerce(section, key, raw)
    return out


def load_config(path=None, preset: str = "desk-small",
                overrides: dict | None = None) -> dict:
    """Assemble a validated config from preset, optional file, and overrides."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = apply_overrides(default_config(), PRESETS[preset])
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        with open(path, "r", encoding="ascii") as fh:
            parser.read_file(fh)
        file_overrides = {s: dict(parser.items(s)) for s in parser.sections()}
        cfg = apply_overrides(cfg, file_overrides)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    _validate(cfg)
    return cfg


def save_config(cfg: dict, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, keys in cfg.items():
        parser[section] = {k: repr(v) if isinstance(v, float) else str(v)
                           for k, v in keys.items()}
    with open(path, "w", encoding="ascii") as fh:
        parser.write(fh)


def _validate(cfg: dict) -> None:
    exp, data = cfg["experiment"], cfg["data"]
    if not (1 <= exp["select_size"] <= exp["num_devices"]):
        raise ValueError("select_size must be in [1, num_devices]")
    if data["kind"] not in ("synthetic-blobs", "file"):
        raise ValueError(f"unknown data kind {data['kind']!r}")
    if data["kind"] == "file" and not data["train_file"]:
        raise ValueError("data kind 'file' needs train_file")
    if cfg["train"]["algo"] not in ("grpo", "ppo"):
        raise ValueError("train algo must be grpo or ppo")
    if cfg["train"]["env"] not in ("virtual", "real"):
        raise ValueError("train env must be virtual or real")
    if cfg["wireless"]["alloc_mode"] not in (solver.EQUAL_SPLIT, solver.OPTIMIZED):
        raise ValueError("alloc_mode must be equal or optimized")


def fingerprint(cfg: dict) -> str:
    """Stable 12-hex-digit digest of the full configuration content."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("ascii")).hexdigest()[:12]


def parse_hidden(spec: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in str(spec).split(",") if tok.strip())


def load_datasets(cfg: dict):
    data = cfg["data"]
    if data["kind"] == "file":
        train = flsim.load_dataset(data["train_file"])
        test = flsim.load_dataset(data["test_file"] or data["train_file"])
    else:
        train = flsim.synthetic_blobs(data["train_samples"], data["features"],
                                      data["classes"], seed=data["data_seed"],
                                      spread=data["spread"])
        test = flsim.synthetic_blobs(data["test_samples"], data["features"],
                                     data["classes"], seed=data["data_seed"] + 1,
                                     spread=data["spread"])
    return train, test


def make_profiles(cfg: dict, partition_sizes: list[int]):
    w = cfg["wireless"]
    rng = np.random.default_rng(w["profile_seed"])
    return wireless.sample_profiles(
        rng, cfg["experiment"]["num_devices"], partition_sizes,
        (w["fmax_lo"], w["fmax_hi"]), (w["pmax_lo"], w["pmax_hi"]),
        w["model_bits"], w["cycles_per_sample"], w["kappa"])


def make_env(cfg: dict) -> WirelessFLEnv:
    """Build the real environment described by a validated config."""
    exp, data, fl, w = cfg["experiment"], cfg["data"], cfg["fl"], cfg["wireless"]
    train, test = load_datasets(cfg)
    fl_cfg = flsim.FLConfig(
        num_devices=exp["num_devices"], local_iters=fl["local_iters"],
        learning_rate=fl["learning_rate"], alpha=data["alpha"],
        num_classes=data["classes"], aggregation_mode=fl["aggregation"],
        weight_decay=fl["weight_decay"])
    partition_seed = data["data_seed"] + 2
    parts = flsim.partition_dirichlet(train, exp["num_devices"], data["alpha"],
                                      partition_seed)
    profiles = make_profiles(cfg, [len(p) for p in parts])
    sys_cfg = wireless.SystemConfig(
        total_bandwidth=w["bandwidth_hz"], noise_psd=w["noise_psd"],
        qos_time=w["qos_s"], num_rounds=exp["rounds"], sigma=w["sigma"],
        local_iters=fl["local_iters"])
    dp = None
    if fl["dp_clip"] > 0:
        dp = DPConfig(clip_norm=fl["dp_clip"], epsilon=fl["dp_epsilon"],
                      delta=fl["dp_delta"], rounds=fl["dp_rounds"])
    return WirelessFLEnv(
        fl_cfg, sys_cfg, profiles, train, test,
        select_size=exp["select_size"], gain_range=(w["gain_lo"], w["gain_hi"]),
        alloc_mode=w["alloc_mode"], energy_scale=w["energy_scale"],
        quantize_bits=fl["quantize_bits"], dp=dp,
        reuse_partition=data["reuse_partition"], data_seed=partition_seed,
        fingerprint=fingerprint(cfg))
