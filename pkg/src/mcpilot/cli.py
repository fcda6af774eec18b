"""Command-line interface.

Each subcommand reads its inputs from explicit paths or, by default, from
the files a previous step wrote into ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .baselines import BallisticPolicy, train_mlp
from .config import Config, dump_config, load_config, parse_config
from .gpmodel import ThrowDynamicsModel
from .harness import (
    LearnerState,
    SimulatedSystem,
    TrialConfig,
    _stream,
    command_time,
    compare_baselines,
    estimate_delay,
    eval_targets,
    evaluate,
    explore,
    fit_model,
    load_delay,
    mlp_dataset,
    mlp_experiment,
    optimize,
    plot_accuracy_box,
    plot_scatter,
    retarget,
    run_trial,
    save_artifacts,
    save_delay,
    write_summary_csv,
    write_results_csv,
)
from .delayest import DelayModel
from .mcopt import write_trace_csv
from .policy import RBFPolicy
from .world import read_throw_csv, write_throw_csv

log = logging.getLogger("mcpilot")

FILES = {
    "throws": "throws.csv",
    "model": "model.txt",
    "delay": "delay.txt",
    "policy": "policy.txt",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides the configuration)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--no-delay-model", action="store_true", help="ignore release delays during optimization")
    p.add_argument("--baseline", choices=("ballistic", "mlp"), help="evaluate a baseline instead of a policy")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcpilot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, *inputs):
        p = sub.add_parser(name, help=help_)
        _common(p)
        for key in inputs:
            p.add_argument(f"--{key}", type=Path, help=f"{key} file (default: OUT/{FILES[key]})")
        return p

    add("simulate", "throw at random targets and record full trajectories", "policy")
    add("explore", "collect exploration throws with the ballistic policy")
    add("fit-model", "fit the dynamics model to recorded throws", "throws")
    add("estimate-delay", "estimate the release-delay distribution", "throws", "model")
    add("optimize", "optimize the throwing policy on the learned model", "model", "delay")
    add("evaluate", "evaluate a policy or baseline on random targets", "policy", "delay")
    add("trial", "run the full learning loop")
    p = add("retarget", "re-optimize for a new target height without new throws", "model", "delay", "policy")
    p.add_argument("--dz", type=float, default=0.3, help="change of the target plane height [m]")
    p = add("compare-baselines", "accuracy comparison over several seeds")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--mlp-sizes", type=int, nargs="*", default=[], help="also run the network baseline")
    return parser


def _config(args) -> Config:
    cfg = load_config(args.config)
    if args.set:
        cfg = parse_config("\n".join(args.set), cfg)
    if args.seed is not None:
        cfg = cfg.updated(seed=args.seed)
    if args.no_delay_model:
        cfg = cfg.updated(use_delay=False)
    return cfg


def _path(args, key: str) -> Path:
    given = getattr(args, key, None)
    return given if given is not None else args.out / FILES[key]


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise SystemExit(f"mcpilot: missing {what} file {path}")
    return path


def _load_delay_or_zero(args, cfg: Config) -> DelayModel:
    path = _path(args, "delay")
    if not cfg.use_delay:
        return DelayModel()
    if not path.exists():
        log.warning("no delay file at %s; assuming zero delay", path)
        return DelayModel()
    return load_delay(path)


def _thrower(args, cfg: Config, seed: int):
    """Callable thrower and its command time for ``simulate`` and ``evaluate``."""
    tc = TrialConfig(cfg)
    if args.baseline == "ballistic" or (args.baseline is None and args.command == "simulate"
                                        and not _path(args, "policy").exists()):
        return BallisticPolicy(cfg.release_geometry(), cfg.constants(), cfg.u_M), cfg.t_release, "ballistic"
    if args.baseline == "mlp":
        data = mlp_dataset(cfg, cfg.mlp_samples, seed)
        data.save(args.out / "regression_set.csv")
        net = train_mlp(data, cfg.N_h, cfg.mlp_epochs, _stream(seed, "mlp-train", cfg.mlp_samples), cfg.mlp_lr,
                        cfg.u_M, cfg.mlp_hidden)
        return net, cfg.t_release, "mlp"
    policy = RBFPolicy.load(_require(_path(args, "policy"), "policy"))
    delay = _load_delay_or_zero(args, cfg)
    return policy, command_time(tc, delay, cfg.use_delay), "mcpilot"


def cmd_simulate(args, cfg: Config):
    thrower, t_cmd, name = _thrower(args, cfg, cfg.seed)
    system = SimulatedSystem(cfg.world(), cfg, cfg.seed)
    targets = eval_targets(cfg, cfg.seed)
    report, records = evaluate(thrower, system, targets, cfg.hit_radius, t_cmd)
    write_throw_csv(args.out / "trajectories.csv", records)
    write_results_csv(args.out / "results.csv", report)
    return f"{name}: {len(records)} throws, accuracy {report.accuracy:.3f}"


def cmd_explore(args, cfg: Config):
    tc = TrialConfig(cfg)
    records = explore(tc, SimulatedSystem(cfg.world(), cfg, cfg.seed), cfg.seed)
    write_throw_csv(args.out / FILES["throws"], records)
    return f"{len(records)} exploration throws"


def cmd_fit_model(args, cfg: Config):
    records = read_throw_csv(_require(_path(args, "throws"), "throws"), cfg.hit_radius)
    model = fit_model(TrialConfig(cfg), records, cfg.seed)
    model.save(args.out / FILES["model"])
    return f"model on {len(model.dataset_)} transitions"


def cmd_estimate_delay(args, cfg: Config):
    records = read_throw_csv(_require(_path(args, "throws"), "throws"), cfg.hit_radius)
    model = ThrowDynamicsModel.load(_require(_path(args, "model"), "model"))
    delay, _ = estimate_delay(TrialConfig(cfg), records, model, cfg.seed, trace_path=args.out / "bo_trace.csv")
    save_delay(args.out / FILES["delay"], delay)
    return f"a = {delay.a:.4f} s, b = {delay.b:.4f} s"


def cmd_optimize(args, cfg: Config):
    model = ThrowDynamicsModel.load(_require(_path(args, "model"), "model"))
    delay = _load_delay_or_zero(args, cfg)
    policy, trace = optimize(TrialConfig(cfg), model, delay, cfg.use_delay, cfg.seed,
                             trace_path=args.out / "opt_trace.csv", log_every=50 if args.verbose else 0)
    policy.save(args.out / FILES["policy"])
    return f"final J = {trace[-1][1]:.4f}" if trace else "no optimization steps"


def cmd_evaluate(args, cfg: Config):
    thrower, t_cmd, name = _thrower(args, cfg, cfg.seed)
    system = SimulatedSystem(cfg.world(), cfg, cfg.seed)
    report, _ = evaluate(thrower, system, eval_targets(cfg, cfg.seed), cfg.hit_radius, t_cmd)
    write_results_csv(args.out / "results.csv", report)
    plot_scatter(report, args.out / "scatter.svg", cfg.domain(), f"{name}: accuracy {report.accuracy:.2f}")
    return f"{name}: accuracy {report.accuracy:.3f}"


def cmd_trial(args, cfg: Config):
    tc = TrialConfig(cfg)
    system = SimulatedSystem(cfg.world(), cfg, cfg.seed)
    state = LearnerState()
    for _ in range(max(cfg.N_trials, 1)):
        res = run_trial(tc, system, state, cfg.seed, out_dir=args.out, log_every=50 if args.verbose else 0)
        if res.opt_trace:
            write_trace_csv(args.out / "opt_trace.csv", res.opt_trace)
        log.info("trial %d: test accuracy %.2f", state.trial - 1, res.report.accuracy)
    save_artifacts(args.out, state)
    t_cmd = command_time(tc, state.delay, cfg.use_delay)
    report, _ = evaluate(state.policy, SimulatedSystem(cfg.world(), cfg, cfg.seed), eval_targets(cfg, cfg.seed),
                         cfg.hit_radius, t_cmd)
    write_results_csv(args.out / "results.csv", report)
    plot_scatter(report, args.out / "scatter.svg", cfg.domain(), f"accuracy {report.accuracy:.2f}")
    return f"delay a = {state.delay.a:.4f}, b = {state.delay.b:.4f}; accuracy {report.accuracy:.3f}"


def cmd_retarget(args, cfg: Config):
    tc = TrialConfig(cfg)
    model = ThrowDynamicsModel.load(_require(_path(args, "model"), "model"))
    delay = _load_delay_or_zero(args, cfg)
    state = LearnerState(model=model, delay=delay)
    domain = cfg.domain().with_height(cfg.z_P + args.dz)
    policy = retarget(tc, state, domain, cfg.seed, cfg.use_delay, trace_path=args.out / "opt_trace_retarget.csv")
    policy.save(args.out / "policy_retarget.txt")
    moved = cfg.updated(z_P=cfg.z_P + args.dz)
    report, _ = evaluate(policy, SimulatedSystem(moved.world(), moved, cfg.seed), eval_targets(moved, cfg.seed),
                         cfg.hit_radius, command_time(tc, delay, cfg.use_delay))
    write_results_csv(args.out / "results_retarget.csv", report)
    plot_scatter(report, args.out / "scatter_retarget.svg", domain, f"z_P = {domain.z_P:.2f} m")
    return f"retargeted to z_P = {domain.z_P:.2f} m: accuracy {report.accuracy:.3f}"


def cmd_compare(args, cfg: Config):
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    res = compare_baselines(cfg, seeds, args.out, log=log.info)
    table = dict(res["accuracy"])
    for n in args.mlp_sizes:
        acc = mlp_experiment(cfg, sizes=(n,), seeds=seeds)
        table[f"mlp-{n}"] = acc[n]
    write_summary_csv(args.out / "summary.csv", table, seeds)
    plot_accuracy_box(table, args.out / "accuracy.svg")
    return "  ".join(f"{k} {np.median(v):.3f}" for k, v in table.items())


COMMANDS = {
    "simulate": cmd_simulate,
    "explore": cmd_explore,
    "fit-model": cmd_fit_model,
    "estimate-delay": cmd_estimate_delay,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "trial": cmd_trial,
    "retarget": cmd_retarget,
    "compare-baselines": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    cfg = _config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(dump_config(cfg))
    print(COMMANDS[args.command](args, cfg))
    return 0


if __name__ == "__main__":
    sys.exit(main())
