"""Command-line experiment runner.

Subcommands: collect, train-world, train-policy, evaluate, compare, solve,
verify. Every CSV written starts with a `# fingerprint=... seed=...` comment
line followed by a header row; numbers use repr formatting, so equal
configurations and seeds produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats as sstats

from . import config as cfgmod
from . import environment, grpo, policy, solver, verification, wireless, worldmodel


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows, fingerprint: str, seed: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="ascii") as fh:
        fh.write(f"# fingerprint={fingerprint} seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _load_cfg(args) -> dict:
    overrides = {}
    for item in args.set or []:
        target, _, value = item.partition("=")
        section, _, key = target.partition(".")
        if not (section and key and value != ""):
            raise SystemExit(f"--set expects section.key=value, got {item!r}")
        overrides.setdefault(section, {})[key] = value
    return cfgmod.load_config(path=args.config, preset=args.preset,
                              overrides=overrides)


def _add_common(parser) -> None:
    parser.add_argument("--config", default=None, help="config file path")
    parser.add_argument("--preset", default="desk-small",
                        choices=sorted(cfgmod.PRESETS))
    parser.add_argument("--set", action="append", metavar="section.key=value",
                        help="override a single config entry")
    parser.add_argument("--out", default=None, help="output directory override")


def _outdir(cfg: dict, args) -> Path:
    out = Path(args.out or cfg["experiment"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _collect_worker(cfg: dict, seed: int) -> environment.Trajectory:
    env = cfgmod.make_env(cfg)
    select = environment.random_selector(env.num_devices, env.select_size)
    return environment.run_episode(env, select, seed)


def cmd_collect(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args)
    n_traj = args.trajectories or cfg["world"]["trajectories"]
    base_seed = cfg["experiment"]["seed"]
    fp = cfgmod.fingerprint(cfg)
    seeds = [base_seed + i for i in range(n_traj)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            trajs = list(pool.map(_collect_worker, [cfg] * n_traj, seeds))
    else:
        env = cfgmod.make_env(cfg)
        select = environment.random_selector(env.num_devices, env.select_size)
        trajs = [environment.run_episode(env, select, s) for s in seeds]
    files = []
    for i, traj in enumerate(trajs):
        name = f"traj_{i:05d}.jsonl"
        environment.write_trajectory(out / name, traj)
        files.append(name)
    manifest = {
        "fingerprint": fp,
        "seed": base_seed,
        "num_devices": cfg["experiment"]["num_devices"],
        "rounds": cfg["experiment"]["rounds"],
        "trajectories": files,
    }
    with open(out / "manifest.json", "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"collected {n_traj} trajectories -> {out}")
    return 0


def _read_manifest(path: Path):
    with open(path / "manifest.json", "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    trajs = [environment.read_trajectory(path / name)
             for name in manifest["trajectories"]]
    return manifest, trajs


def cmd_train_world(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args)
    manifest, trajs = _read_manifest(Path(args.trajectories))
    n = manifest["num_devices"]
    samples = [worldmodel.samples_from_trajectory(t, n) for t in trajs]
    world = cfg["world"]
    model = worldmodel.TransitionModel(
        n, window=world["window"], hidden=cfgmod.parse_hidden(world["hidden"]),
        seed=cfg["experiment"]["seed"])
    history = model.fit(samples, epochs=world["epochs"], lr=world["lr"],
                        batch=world["batch"], seed=cfg["experiment"]["seed"],
                        holdout_fraction=world["holdout_fraction"])
    model.save(out / "world_model.bin")
    fp = cfgmod.fingerprint(cfg)
    _write_csv(out / "world_mse.csv",
               ["epoch", "train_mse", "holdout_mse", "holdout_accuracy_mse"],
               [(h.epoch, h.train_mse, h.holdout_mse, h.holdout_accuracy_mse)
                for h in history],
               fp, cfg["experiment"]["seed"])
    baseline = model.holdout_persistence_mse
    final = history[-1].holdout_accuracy_mse
    print(f"holdout accuracy MSE {final:.6f} vs persistence {baseline:.6f}")
    print(f"model -> {out / 'world_model.bin'}")
    if final >= baseline:
        print("FAIL: model does not beat the persistence baseline", file=sys.stderr)
        return 1
    return 0


def cmd_train_policy(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args)
    env = cfgmod.make_env(cfg)
    mode = args.env or cfg["train"]["env"]
    if mode == "virtual":
        if not args.world:
            print("virtual training needs --world MODEL", file=sys.stderr)
            return 2
        model = worldmodel.TransitionModel.load(args.world)
        train_env = worldmodel.VirtualFLEnv(env, model)
    else:
        train_env = env
    pol = policy.SelectionPolicy(
        env.num_devices, env.select_size,
        hidden=cfgmod.parse_hidden(cfg["policy"]["hidden"]),
        seed=cfg["experiment"]["seed"])
    tcfg = grpo.TrainConfig(
        iterations=args.iterations or cfg["train"]["iterations"],
        batch_episodes=cfg["train"]["batch_episodes"],
        epochs=cfg["train"]["epochs"], lr=cfg["train"]["lr"],
        clip=cfg["train"]["clip"], gamma=cfg["train"]["gamma"],
        std_floor=cfg["train"]["std_floor"], seed=cfg["experiment"]["seed"])
    algo = args.algo or cfg["train"]["algo"]
    trainer = grpo.train if algo == "grpo" else grpo.train_ppo
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    def progress(row):
        pol.save(ckpt_dir / f"policy_it{row['iteration']:04d}.bin")
        if args.verbose:
            print(f"iter {row['iteration']:4d}  reward {row['mean_reward']:.4f}  "
                  f"cwpem {row['mean_cwpem']:.3f}  clip {row['clip_fraction']:.3f}")

    trainer(pol, train_env, tcfg, metrics_path=out / "policy_metrics.csv",
            progress=progress)
    pol.save(out / "policy.bin")
    print(f"policy -> {out / 'policy.bin'}  metrics -> {out / 'policy_metrics.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args)
    env = cfgmod.make_env(cfg)
    select, name = _resolve_policy(args.policy, env, cfg)
    results = environment.evaluate_policy(env, select, args.trials,
                                          cfg["experiment"]["seed"] + 10_000)
    fp = cfgmod.fingerprint(cfg)
    path = out / f"evaluate_{name}.csv"
    _write_eval_csv(path, results, fp, cfg["experiment"]["seed"])
    cw = np.array([r["cwpem"] for r in results])
    lo, hi = _t_ci(cw)
    print(f"{name}: CWPEM mean {cw.mean():.4f}  95% CI [{lo:.4f}, {hi:.4f}]  -> {path}")
    return 0


def _t_ci(values: np.ndarray, level: float = 0.95):
    n = len(values)
    if n < 2:
        return float(values.mean()), float(values.mean())
    half = sstats.t.ppf(0.5 + level / 2, n - 1) * values.std(ddof=1) / np.sqrt(n)
    return float(values.mean() - half), float(values.mean() + half)


def _write_eval_csv(path, results, fingerprint, seed) -> None:
    rows = []
    for r in results:
        for t, (acc, e, tt, rew) in enumerate(zip(r["accuracies"], r["energies"],
                                                  r["times"], r["rewards"])):
            cw = r["cwpem"] if t == len(r["rewards"]) - 1 else ""
            rows.append((r["seed"], t, acc, e, tt, rew, cw))
    cw = np.array([r["cwpem"] for r in results])
    lo, hi = _t_ci(cw)
    rows.append(("summary_mean", "", "", "", "", "", float(cw.mean())))
    rows.append(("summary_ci95_lo", "", "", "", "", "", lo))
    rows.append(("summary_ci95_hi", "", "", "", "", "", hi))
    _write_csv(path, ["trial", "round", "accuracy", "energy_J", "time_s",
                      "reward", "cwpem"], rows, fingerprint, seed)


def _resolve_policy(spec: str, env, cfg):
    if spec == "random":
        return environment.random_selector(env.num_devices, env.select_size), "random"
    if spec == "greedy":
        return policy.epsilon_greedy_selector(
            env.profiles, env.sys_cfg, cfg["policy"]["eps_greedy"]), "greedy"
    if spec.startswith("backend:"):
        endpoint = policy.SubprocessBackend(spec.split(":", 1)[1].split())
        return policy.backend_selector(endpoint), "backend"
    pol = policy.SelectionPolicy.load(spec)
    return pol.selector(), Path(spec).stem


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    if args.scenario_2:
        cfg = cfgmod.apply_overrides(cfg, cfgmod.PRESETS["scenario-2"])
    out = _outdir(cfg, args)
    qos_values = [cfg["wireless"]["qos_s"]]
    if args.qos_sweep:
        qos_values = [15.0, 20.0]
    fp = cfgmod.fingerprint(cfg)
    seed = cfg["experiment"]["seed"]
    summary_rows = []
    for qos in qos_values:
        run_cfg = cfgmod.apply_overrides(cfg, {"wireless": {"qos_s": qos}})
        env = cfgmod.make_env(run_cfg)
        per_policy = {}
        for spec in args.policies:
            select, name = _resolve_policy(spec, env, run_cfg)
            results = environment.evaluate_policy(env, select, args.trials,
                                                  seed + 10_000)
            per_policy[name] = results
            _write_eval_csv(out / f"evaluate_{name}_qos{qos:g}.csv", results,
                            fp, seed)
            cw = np.array([r["cwpem"] for r in results])
            lo, hi = _t_ci(cw)
            acc_final = np.mean([r["accuracies"][-1] for r in results])
            e_mean = np.mean([np.mean(r["energies"]) for r in results])
            summary_rows.append((qos, name, float(cw.mean()), lo, hi,
                                 float(acc_final), float(e_mean)))
        rounds = range(run_cfg["experiment"]["rounds"])
        series_header = ["round"]
        series_cols = []
        for name, results in per_policy.items():
            series_header += [f"{name}_accuracy", f"{name}_energy_J",
                              f"{name}_reward"]
            acc = np.mean([r["accuracies"] for r in results], axis=0)
            en = np.mean([r["energies"] for r in results], axis=0)
            rew = np.mean([r["rewards"] for r in results], axis=0)
            series_cols.append((acc, en, rew))
        series_rows = []
        for t in rounds:
            row = [t]
            for acc, en, rew in series_cols:
                row += [float(acc[t]), float(en[t]), float(rew[t])]
            series_rows.append(tuple(row))
        _write_csv(out / f"compare_rounds_qos{qos:g}.csv", series_header,
                   series_rows, fp, seed)
    _write_csv(out / "compare_summary.csv",
               ["qos_s", "policy", "cwpem_mean", "cwpem_ci95_lo",
                "cwpem_ci95_hi", "final_accuracy_mean", "energy_per_round_J"],
               summary_rows, fp, seed)
    print(f"comparison -> {out}")
    return 0


def cmd_solve(args) -> int:
    cfg = _load_cfg(args)
    env_cfg = cfgmod.make_env(cfg)
    selection = [int(tok) for tok in args.select.split(",")]
    rng = np.random.default_rng(cfg["experiment"]["seed"])
    channel = wireless.sample_channel(rng, env_cfg.num_devices,
                                      cfg["wireless"]["gain_lo"],
                                      cfg["wireless"]["gain_hi"])
    mode = args.mode or cfg["wireless"]["alloc_mode"]
    alloc = solver.allocate(selection, env_cfg.profiles, channel,
                            env_cfg.sys_cfg, mode)
    print(f"selection {selection}  mode {mode}  fingerprint {cfgmod.fingerprint(cfg)}")
    if not alloc.feasible:
        print("INFEASIBLE: no allocation meets the QoS budget")
        return 1
    for da in alloc.devices:
        print(f"device {da.device}: f={da.freq:.6g} Hz  p={da.power:.6g} W  "
              f"B={da.bandwidth:.6g} Hz  T={da.time:.6g} s  E={da.energy:.6g} J")
    print(f"total energy {alloc.total_energy:.6g} J  round time {alloc.total_time:.6g} s")
    return 0


def cmd_verify(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args)
    seed = cfg["experiment"]["seed"]
    quick = args.quick
    failures = []
    lines = []
    ratio_rows = []

    # simulation bound corpus
    rng = np.random.default_rng(seed)
    n_tuples = 50 if quick else 1000
    max_ratio = 0.0
    violations = 0
    for i in range(n_tuples):
        n_s = int(rng.integers(2, 6))
        n_a = int(rng.integers(2, 4))
        m = verification.random_toy_mdp(rng, n_s, n_a)
        m_hat = verification.perturb_mdp(m, rng, scale=float(rng.uniform(0, 0.5)))
        pols = [verification.random_policy(rng, n_s, n_a)]
        ks = [int(rng.integers(1, 7))]
        rep = verification.check_simulation_bound(m, m_hat, pols, ks)
        violations += len(rep.violations)
        if rep.max_ratio > max_ratio:
            max_ratio = rep.max_ratio
        ratio_rows.append((i, rep.epsilon, rep.max_ratio))
    ok = violations == 0
    lines.append(("simulation-bound", ok,
                  f"{n_tuples} tuples, max ratio {max_ratio:.4f}"))
    if not ok:
        failures.append("simulation-bound")

    # decoupling
    n_inst = 2 if quick else 20
    grid = 101
    bad = 0
    for i in range(n_inst):
        inst = verification.build_decoupling_instance(seed + i, n_devices=3 if quick else int(3 + (i % 3)))
        rep = verification.check_decoupling(inst, grid=grid)
        if not rep.passed:
            bad += 1
    ok = bad == 0
    lines.append(("decoupling", ok, f"{n_inst} instances, {bad} mismatches"))
    if not ok:
        failures.append("decoupling")

    # gradient integrity
    checks = verification.run_gradient_checks(seed=seed, points=3 if quick else 25)
    worst = max(checks.values())
    ok = worst < 1e-4
    lines.append(("gradients", ok,
                  ", ".join(f"{k}={v:.2e}" for k, v in checks.items())))
    if not ok:
        failures.append("gradients")

    # solver oracle
    n_prof = 3 if quick else 20
    rng = np.random.default_rng(seed + 1)
    worst_gap = 0.0
    count = 0
    while count < n_prof:
        prof = wireless.DeviceProfile(
            f_max=float(rng.uniform(0.5e9, 4e9)), p_max=float(rng.uniform(0.001, 1.0)),
            s_bits=4e6, data_size=int(rng.integers(100, 2000)),
            cycles_per_sample=7e5, kappa=1e-28)
        sys_cfg = wireless.SystemConfig(2e6, cfg["wireless"]["noise_psd"],
                                        float(rng.uniform(5, 20)), 1, 0.8, 5)
        bw = float(rng.uniform(2e5, 2e6))
        gain = float(np.exp(rng.uniform(np.log(1e-7), np.log(1e-6))))
        res = solver.min_device_energy(prof, bw, gain, sys_cfg)
        oracle = solver.brute_force_device_oracle(prof, bw, gain, sys_cfg,
                                                  grid=501 if quick else 2001)
        if res is None or oracle is None:
            if (res is None) != (oracle is None):
                worst_gap = np.inf
                break
            continue
        count += 1
        worst_gap = max(worst_gap, abs(res[2] - oracle[2]) / oracle[2])
    ok = worst_gap < (5e-3 if quick else 1e-3)
    lines.append(("solver-oracle", ok, f"{count} profiles, worst gap {worst_gap:.2e}"))
    if not ok:
        failures.append("solver-oracle")

    _write_csv(out / "verify_ratios.csv", ["case", "epsilon", "max_ratio"],
               ratio_rows, cfgmod.fingerprint(cfg), seed)
    for name, ok, detail in lines:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if failures:
        print(f"verification FAILED: {', '.join(failures)}", file=sys.stderr)
        return 1
    print("all verification checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wflsim",
        description="Energy-aware device selection for wireless federated learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="record random-policy trajectories")
    _add_common(p)
    p.add_argument("--trajectories", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train-world", help="fit the transition model")
    _add_common(p)
    p.add_argument("--trajectories", required=True,
                   help="directory containing manifest.json")
    p.set_defaults(func=cmd_train_world)

    p = sub.add_parser("train-policy", help="optimize the selection policy")
    _add_common(p)
    p.add_argument("--world", default=None, help="transition-model checkpoint")
    p.add_argument("--env", choices=["virtual", "real"], default=None)
    p.add_argument("--algo", choices=["grpo", "ppo"], default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("evaluate", help="run seeded trials on the real simulator")
    _add_common(p)
    p.add_argument("--policy", required=True,
                   help="random | greedy | backend:CMD | checkpoint path")
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="evaluate several policies on shared seeds")
    _add_common(p)
    p.add_argument("--policies", nargs="+", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--qos-sweep", action="store_true",
                   help="run QoS budgets 15 s and 20 s")
    p.add_argument("--scenario-2", action="store_true",
                   help="switch to the scenario-2 device population")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("solve", help="print the allocation for one selection")
    _add_common(p)
    p.add_argument("--select", required=True, help="comma-separated device indices")
    p.add_argument("--mode", choices=[solver.EQUAL_SPLIT, solver.OPTIMIZED],
                   default=None)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("verify", help="run the theory verification suite")
    _add_common(p)
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
