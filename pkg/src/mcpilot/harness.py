"""Experiment orchestration: the outer learning loop, evaluation and reporting.

The learner only touches the simulator through :class:`SimulatedSystem`,
which executes commanded throws and returns records.  The planted release
delay never leaves that object.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import BallisticPolicy, RegressionSet, random_throws, train_mlp
from .config import Config
from .core import RngStream, TargetDomain, sample_targets
from .delayest import BOConfig, DelayEstimator, DelayModel, recompute_command_time
from .gpmodel import ThrowDynamicsModel, augment_trajectory
from .kinematics import plan_throw
from .mcopt import OptState, RolloutConfig, optimize_policy
from .policy import RBFPolicy, init_policy, policy_eval
from .world import ThrowRecord, WorldConfig, execute_throws, write_throw_csv

__all__ = [
    "TrialConfig",
    "EvalRow",
    "EvalReport",
    "SimulatedSystem",
    "LearnerState",
    "TrialResult",
    "explore",
    "fit_model",
    "estimate_delay",
    "optimize",
    "evaluate",
    "run_trial",
    "retarget",
    "MCPilot",
    "mlp_experiment",
    "compare_baselines",
    "write_results_csv",
    "read_results_csv",
    "plot_scatter",
    "plot_accuracy_box",
]


def _stream(seed: int, purpose: str, index: int = 0):
    return RngStream.derive(seed, purpose, index).generator()


@dataclass(frozen=True)
class TrialConfig:
    """Outer-loop settings plus the full configuration they refer to."""

    config: Config = field(default_factory=Config)

    def __post_init__(self):
        if self.config.N_exp < 1:
            raise ValueError("N_exp must be at least 1")

    N_exp = property(lambda self: self.config.N_exp)
    N_test = property(lambda self: self.config.N_test)
    N_a = property(lambda self: self.config.N_a)
    N_trials = property(lambda self: self.config.N_trials)
    hit_radius = property(lambda self: self.config.hit_radius)

    def rollout(self, delay: DelayModel | None, use_delay: bool, domain: TargetDomain | None = None) -> RolloutConfig:
        c = self.config
        delay = delay or DelayModel()
        t_cmd = recompute_command_time(c.t_release, delay.a) if use_delay else c.t_release
        return RolloutConfig(M=c.M, T=c.T, T_s=c.T_s, a=delay.a, b=delay.b, use_delay=use_delay, l_c=c.l_c,
                             timing=c.timing(), t_command=t_cmd)

    def bo(self) -> BOConfig:
        c = self.config
        return BOConfig((c.a_lo, c.a_hi), (c.b_lo, c.b_hi), c.sigma_ucb, c.bo_init, c.bo_iter, c.bo_starts, c.M_d)


# --------------------------------------------------------------------------- #
# evaluation records


@dataclass(frozen=True)
class EvalRow:
    target: np.ndarray
    landing: np.ndarray
    error: float
    hit: bool


@dataclass(frozen=True)
class EvalReport:
    rows: tuple
    hit_radius: float = 0.1

    @classmethod
    def from_records(cls, records, hit_radius: float) -> "EvalReport":
        rows = []
        for r in records:
            P = r.target.as_array()
            err = math.hypot(r.landing[0] - P[0], r.landing[1] - P[1])
            rows.append(EvalRow(P, np.asarray(r.landing, dtype=float), err, bool(err <= hit_radius)))
        return cls(tuple(rows), hit_radius)

    def __len__(self):
        return len(self.rows)

    @property
    def accuracy(self) -> float:
        return sum(r.hit for r in self.rows) / len(self.rows) if self.rows else 0.0

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.rows])

    def error_quantiles(self, q=(0.25, 0.5, 0.75)) -> np.ndarray:
        return np.quantile(self.errors, q) if self.rows else np.full(len(q), np.nan)

    def to_csv(self, path) -> None:
        write_results_csv(path, self)


def write_results_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_x", "target_y", "landing_x", "landing_y", "error", "hit"])
        for r in report.rows:
            w.writerow([format(v, ".9g") for v in (r.target[0], r.target[1], r.landing[0], r.landing[1], r.error)]
                       + [int(r.hit)])


def read_results_csv(path, hit_radius: float = 0.1) -> EvalReport:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            P = np.array([float(rec["target_x"]), float(rec["target_y"]), np.nan])
            L = np.array([float(rec["landing_x"]), float(rec["landing_y"]), np.nan])
            rows.append(EvalRow(P, L, float(rec["error"]), rec["hit"] == "1"))
    return EvalReport(tuple(rows), hit_radius)


# --------------------------------------------------------------------------- #
# system access


class SimulatedSystem:
    """The learner's only handle on the simulator.

    Each call to :meth:`throw` consumes a fresh delay stream so repeated
    runs with the same seed replay the same delays.
    """

    def __init__(self, world: WorldConfig, cfg: Config, seed: int):
        self._world = world
        self.arm = cfg.arm()
        self.timing = cfg.timing()
        self.seed = seed
        self.n_throws = 0
        self._batches = 0

    def throw(self, speeds, targets, t_command: float | None = None, gammas=None, purpose: str = "throw"):
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        speeds = np.atleast_1d(np.asarray(speeds, dtype=float))
        if gammas is None:
            gammas = np.arctan2(targets[:, 1], targets[:, 0])
        plans = [plan_throw(g, v, self.arm, self.timing, t_command) for g, v in zip(gammas, speeds)]
        rng = _stream(self.seed, f"world-{purpose}", self._batches)
        self._batches += 1
        self.n_throws += len(plans)
        return execute_throws(plans, targets, self._world, self.arm, rng, seed=self.seed)


@dataclass
class LearnerState:
    """Everything the learner carries between phases and trials."""

    records: list = field(default_factory=list)
    model: ThrowDynamicsModel | None = None
    delay: DelayModel | None = None
    policy: RBFPolicy | None = None
    trial: int = 0


@dataclass(frozen=True)
class TrialResult:
    policy: RBFPolicy
    delay: DelayModel
    report: EvalReport
    state: LearnerState
    opt_trace: list
    bo_trace: list
    timings: dict


# --------------------------------------------------------------------------- #
# phases


def explore(tc: TrialConfig, system: SimulatedSystem, seed: int) -> list[ThrowRecord]:
    """Ballistic throws toward ``N_exp`` random targets."""
    c = tc.config
    targets = sample_targets(c.domain(), c.N_exp, _stream(seed, "explore"))
    bp = BallisticPolicy(c.release_geometry(), c.constants(), c.u_M)
    return system.throw(bp(targets), targets, purpose="explore")


def training_trajectories(records, N_a: int, seed: int):
    if N_a == 0:
        return list(records)
    out = []
    for i, r in enumerate(records):
        out.extend(augment_trajectory(r, N_a, _stream(seed, "augment", i)))
    return out


def fit_model(tc: TrialConfig, records, seed: int) -> ThrowDynamicsModel:
    c = tc.config
    model = ThrowDynamicsModel(T_s=c.T_s, input_map=c.gp_input, n_iter=c.gp_iters, max_points=c.gp_max_points)
    return model.fit(training_trajectories(records, c.N_a, seed))


def estimate_delay(tc: TrialConfig, records, model, seed: int, trace_path=None):
    c = tc.config
    est = DelayEstimator(tc.bo(), T=c.T, T_s=c.T_s, random_state=_stream(seed, "bo"))
    est.fit(records, model, c.arm(), c.timing(), trace_path=trace_path)
    return est.delay_model_, est.result_.history


def optimize(tc: TrialConfig, model, delay: DelayModel | None, use_delay: bool, seed: int,
             policy: RBFPolicy | None = None, domain: TargetDomain | None = None, trace_path=None,
             log_every: int = 0):
    c = tc.config
    domain = domain or c.domain()
    if policy is None:
        policy = init_policy(domain, c.u_M, c.N_b, _stream(seed, "policy-init"), shape=c.sigma_pi,
                             weight_scale=c.weight_scale())
    res = optimize_policy(policy, model, tc.rollout(delay, use_delay), c.arm(), domain, c.N_opt,
                          _stream(seed, "optimize"), OptState(lr=c.lr), c.p_drop, c.dropout_off,
                          trace_path=trace_path, log_every=log_every)
    return res.policy, res.trace


def evaluate(policy, system: SimulatedSystem, targets, hit_radius: float = 0.1, t_command: float | None = None,
             purpose: str = "eval") -> tuple[EvalReport, list[ThrowRecord]]:
    """Throw once at each target with ``policy`` (any callable on an ``(n, 3)`` batch)."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    speeds = np.asarray(policy(targets), dtype=float).reshape(-1)
    records = system.throw(speeds, targets, t_command, purpose=purpose)
    return EvalReport.from_records(records, hit_radius), records


def command_time(tc: TrialConfig, delay: DelayModel | None, use_delay: bool) -> float:
    t_r = tc.config.t_release
    return recompute_command_time(t_r, delay.a) if (use_delay and delay is not None) else t_r


def run_trial(tc: TrialConfig, system: SimulatedSystem, state: LearnerState | None = None, seed: int = 0,
              use_delay: bool | None = None, out_dir=None, log_every: int = 0) -> TrialResult:
    """One pass of the outer loop.

    Exploration runs only when ``state`` holds no data.  The ``N_test``
    policy throws join the dataset for the next trial.
    """
    c = tc.config
    use_delay = c.use_delay if use_delay is None else use_delay
    state = state or LearnerState()
    out = Path(out_dir) if out_dir is not None else None
    k = state.trial
    timings = {}

    def phase(name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except Exception as exc:
            raise type(exc)(f"trial {k}, {name}: {exc}") from exc
        finally:
            timings[name] = time.perf_counter() - t0

    if not state.records:
        state.records = phase("explore", lambda: explore(tc, system, seed))
    state.model = phase("fit-model", lambda: fit_model(tc, state.records, seed + 7919 * k))
    bo_trace = []
    if use_delay:
        trace = out / f"bo_trace_{k}.csv" if out else None
        state.delay, bo_trace = phase("estimate-delay", lambda: estimate_delay(tc, state.records, state.model,
                                                                               seed + 7919 * k, trace))
    else:
        state.delay = DelayModel()
    trace = out / f"opt_trace_{k}.csv" if out else None
    state.policy, opt_trace = phase("optimize", lambda: optimize(tc, state.model, state.delay, use_delay,
                                                                 seed + 7919 * k, trace_path=trace,
                                                                 log_every=log_every))
    t_cmd = command_time(tc, state.delay, use_delay)
    targets = sample_targets(c.domain(), c.N_test, _stream(seed, "test-targets", k))
    report, recs = phase("test", lambda: evaluate(state.policy, system, targets, c.hit_radius, t_cmd,
                                                  purpose=f"test-{k}"))
    state.records = state.records + recs
    state.trial += 1
    if out:
        save_artifacts(out, state, suffix=f"_{k}")
        write_results_csv(out / f"test_results_{k}.csv", report)
    return TrialResult(state.policy, state.delay, report, state, opt_trace, bo_trace, timings)


def retarget(tc: TrialConfig, state: LearnerState, domain: TargetDomain, seed: int, use_delay: bool = True,
             trace_path=None) -> RBFPolicy:
    """Re-run policy optimization for a new target domain on the existing model and delay."""
    if state.model is None:
        raise ValueError("retargeting needs a fitted model")
    policy, _ = optimize(tc, state.model, state.delay, use_delay, seed + 104729, domain=domain,
                         trace_path=trace_path)
    return policy


def save_artifacts(out: Path, state: LearnerState, suffix: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_throw_csv(out / f"throws{suffix}.csv", state.records)
    if state.model is not None:
        state.model.save(out / f"model{suffix}.txt")
    if state.delay is not None:
        save_delay(out / f"delay{suffix}.txt", state.delay)
    if state.policy is not None:
        state.policy.save(out / f"policy{suffix}.txt")


def save_delay(path, delay: DelayModel) -> None:
    Path(path).write_text(f"a {delay.a!r}\nb {delay.b!r}\n")


def load_delay(path) -> DelayModel:
    vals = dict(line.split() for line in Path(path).read_text().splitlines() if line.strip())
    return DelayModel(float(vals["a"]), float(vals["b"]))


# --------------------------------------------------------------------------- #
# estimator facade


class MCPilot(BaseEstimator):
    """Learn a throwing policy on a simulated system.

    Parameters
    ----------
    config : Config, optional
    use_delay : bool, default=True
        Estimate the release delay and model it during optimization.
    random_state : int, default=0
    """

    def __init__(self, config: Config | None = None, use_delay: bool = True, random_state: int = 0):
        self.config = config
        self.use_delay = use_delay
        self.random_state = random_state

    def fit(self, system: SimulatedSystem, out_dir=None):
        tc = TrialConfig(self.config or Config())
        state = LearnerState()
        self.reports_ = []
        for _ in range(max(tc.N_trials, 1)):
            res = run_trial(tc, system, state, int(self.random_state), self.use_delay, out_dir)
            self.reports_.append(res.report)
        self.state_ = state
        self.policy_ = state.policy
        self.delay_ = state.delay
        self.command_time_ = command_time(tc, state.delay, self.use_delay)
        return self

    def predict(self, X):
        check_is_fitted(self, "policy_")
        return policy_eval(self.policy_, np.atleast_2d(np.asarray(X, dtype=float)))

    def score(self, system: SimulatedSystem, targets=None) -> float:
        check_is_fitted(self, "policy_")
        c = self.config or Config()
        if targets is None:
            targets = sample_targets(c.domain(), c.N_eval, _stream(int(self.random_state), "eval-targets"))
        return evaluate(self.predict, system, targets, c.hit_radius, self.command_time_)[0].accuracy


# --------------------------------------------------------------------------- #
# comparison experiments


def eval_targets(cfg: Config, seed: int, domain: TargetDomain | None = None) -> np.ndarray:
    return sample_targets(domain or cfg.domain(), cfg.N_eval, _stream(seed, "eval-targets"))


def compare_seed(cfg: Config, seed: int, variants=("mcpilot", "mcpilot-no-delay", "ballistic"),
                 out_dir=None) -> dict:
    """Accuracy of each variant on one seed; all share exploration data and evaluation targets.

    Returns a dict with per-variant :class:`EvalReport` objects plus the
    delay estimate, the learner state and the wall time per phase.
    """
    tc = TrialConfig(cfg)
    world = cfg.world()
    targets = eval_targets(cfg, seed)
    out = {"reports": {}, "timings": {}}
    explore_system = SimulatedSystem(world, cfg, seed)
    records = explore(tc, explore_system, seed)
    for name in variants:
        t0 = time.perf_counter()
        system = SimulatedSystem(world, cfg, seed)
        if name == "ballistic":
            bp = BallisticPolicy(cfg.release_geometry(), cfg.constants(), cfg.u_M)
            out["reports"][name] = evaluate(bp, system, targets, cfg.hit_radius, purpose="eval")[0]
        else:
            use_delay = name == "mcpilot"
            state = LearnerState(records=list(records))
            if "model" in out:
                state.model = out["model"]
            res = _run_variant(tc, state, system, seed, use_delay)
            out["model"] = state.model
            if use_delay:
                out["delay"] = state.delay
                out["state"] = state
            t_cmd = command_time(tc, state.delay, use_delay)
            out["reports"][name] = evaluate(res, system, targets, cfg.hit_radius, t_cmd, purpose="eval")[0]
            out.setdefault("policies", {})[name] = res
        out["timings"][name] = time.perf_counter() - t0
        if out_dir is not None:
            d = Path(out_dir)
            d.mkdir(parents=True, exist_ok=True)
            write_results_csv(d / f"results_{name}_seed{seed}.csv", out["reports"][name])
    out["records"] = records
    return out


def _run_variant(tc: TrialConfig, state: LearnerState, system, seed: int, use_delay: bool) -> RBFPolicy:
    if state.model is None:
        state.model = fit_model(tc, state.records, seed)
    if use_delay:
        state.delay, _ = estimate_delay(tc, state.records, state.model, seed)
    else:
        state.delay = DelayModel()
    state.policy, _ = optimize(tc, state.model, state.delay, use_delay, seed)
    return state.policy


def mlp_dataset(cfg: Config, n: int, seed: int) -> RegressionSet:
    """Random bearings and speeds thrown into the world; landings become inputs."""
    system = SimulatedSystem(cfg.world(), cfg, seed)
    gamma, speed = random_throws(cfg.domain(), n, cfg.u_M, _stream(seed, "mlp-data", n))
    # the aim point only fixes the landing plane here
    aim = np.column_stack([np.cos(gamma), np.sin(gamma), np.full(n, cfg.z_P)])
    recs = system.throw(speed, aim, gammas=gamma, purpose=f"mlp-data-{n}")
    return RegressionSet.from_records(recs)


def mlp_experiment(cfg: Config, sizes=(20, 60, 180), seeds=range(5), N_h: int | None = None) -> dict:
    """Accuracy of the network baseline per training-set size and seed."""
    acc = {n: [] for n in sizes}
    for seed in seeds:
        targets = eval_targets(cfg, seed)
        for n in sizes:
            data = mlp_dataset(cfg, n, seed)
            net = train_mlp(data, N_h or cfg.N_h, cfg.mlp_epochs, _stream(seed, "mlp-train", n), cfg.mlp_lr,
                            cfg.u_M, cfg.mlp_hidden)
            system = SimulatedSystem(cfg.world(), cfg, seed)
            acc[n].append(evaluate(net, system, targets, cfg.hit_radius, purpose="eval")[0].accuracy)
    return acc


def mlp_trials(cfg: Config, train_targets, n_trials: int, seed: int, N_h: int | None = None):
    """Trial-based retraining: throw at the training targets, add the landings, retrain."""
    system = SimulatedSystem(cfg.world(), cfg, seed)
    bp = BallisticPolicy(cfg.release_geometry(), cfg.constants(), cfg.u_M)
    train_targets = np.atleast_2d(train_targets)
    data = RegressionSet.from_records(system.throw(bp(train_targets), train_targets, purpose="mlp-trial-0"))
    nets = []
    for k in range(n_trials):
        net = train_mlp(data, N_h or cfg.N_h, cfg.mlp_epochs, _stream(seed, "mlp-trial", k), cfg.mlp_lr, cfg.u_M,
                        cfg.mlp_hidden)
        nets.append(net)
        recs = system.throw(net(train_targets), train_targets, purpose=f"mlp-trial-{k + 1}")
        data = data + RegressionSet.from_records(recs)
    return nets, data


def compare_baselines(cfg: Config, seeds, out_dir=None, variants=("mcpilot", "mcpilot-no-delay", "ballistic"),
                      log=None) -> dict:
    """Accuracy table ``{variant: [accuracy per seed]}`` plus per-seed details."""
    table = {v: [] for v in variants}
    details = {}
    for seed in seeds:
        res = compare_seed(cfg, seed, variants, out_dir)
        for v in variants:
            table[v].append(res["reports"][v].accuracy)
        details[seed] = res
        if log:
            log(f"seed {seed}: " + ", ".join(f"{v} {table[v][-1]:.2f}" for v in variants))
    if out_dir is not None:
        write_summary_csv(Path(out_dir) / "summary.csv", table, list(seeds))
    return {"accuracy": table, "details": details}


def write_summary_csv(path, table: dict, seeds) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", *table])
        for i, s in enumerate(seeds):
            w.writerow([s, *(format(table[v][i], ".9g") for v in table)])


# --------------------------------------------------------------------------- #
# plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mcpilot"
    return plt


def _save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_scatter(report: EvalReport, path, domain: TargetDomain | None = None, title: str = "") -> None:
    """Targets on the ground plane, green when hit and red when missed."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    P = np.array([r.target for r in report.rows]).reshape(-1, 3)
    hit = np.array([r.hit for r in report.rows], dtype=bool)
    ax.scatter(P[hit, 0], P[hit, 1], c="tab:green", s=14, label="hit")
    ax.scatter(P[~hit, 0], P[~hit, 1], c="tab:red", s=14, label="miss")
    if domain is not None:
        g = np.linspace(-domain.gamma_max, domain.gamma_max, 100)
        for ell in (domain.l_min, domain.l_max):
            ax.plot(ell * np.cos(g), ell * np.sin(g), "k-", lw=0.8)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title or f"accuracy {report.accuracy:.2f}")
    ax.legend(loc="upper left")
    _save_svg(fig, path)
    plt.close(fig)


def plot_accuracy_box(table: dict, path, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(table)
    ax.boxplot([table[n] for n in names])
    ax.set_xticks(range(1, len(names) + 1), names, rotation=20)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)
