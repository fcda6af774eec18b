import filecmp

import pytest

from mcpilot.cli import build_parser, main

TINY = ["M=8", "N_opt=3", "N_b=10", "gp_iters=20", "gp_max_points=60", "bo_init=3", "bo_iter=2", "bo_starts=4",
        "M_d=2", "N_eval=10", "N_test=3", "mlp_epochs=20", "mlp_hidden=16", "mlp_samples=10"]


def _run(out, *argv):
    args = list(argv) + ["--out", str(out), "--seed", "5"]
    for kv in TINY:
        args += ["--set", kv]
    assert main(args) == 0


def _pipeline(out):
    _run(out, "explore")
    _run(out, "fit-model")
    _run(out, "estimate-delay")
    _run(out, "optimize")
    _run(out, "evaluate")
    _run(out, "retarget")
    _run(out / "sim", "simulate")
    _run(out / "ball", "evaluate", "--baseline", "ballistic")
    _run(out / "mlp", "evaluate", "--baseline", "mlp")


@pytest.fixture(scope="module")
def twice(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    _pipeline(a)
    _pipeline(b)
    return a, b


def test_subcommands_registered():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"simulate", "explore", "fit-model", "estimate-delay", "optimize", "evaluate", "trial",
                        "retarget", "compare-baselines"}


def test_pipeline_outputs(twice):
    a, _ = twice
    for name in ("throws.csv", "model.txt", "delay.txt", "policy.txt", "bo_trace.csv", "opt_trace.csv",
                 "results.csv", "scatter.svg", "results_retarget.csv", "policy_retarget.txt", "config.txt"):
        assert (a / name).exists(), name
    assert (a / "results.csv").read_text().startswith("target_x,target_y,landing_x,landing_y,error,hit\n")
    assert (a / "sim" / "trajectories.csv").exists()
    assert (a / "mlp" / "regression_set.csv").exists()


def test_csv_outputs_are_byte_identical(twice):
    a, b = twice
    csvs = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert len(csvs) >= 9
    for rel in csvs:
        assert filecmp.cmp(a / rel, b / rel, shallow=False), rel


def test_trial_and_compare_are_byte_identical(tmp_path):
    for d in ("x", "y"):
        _run(tmp_path / d, "trial", "--no-delay-model")
        _run(tmp_path / d / "cmp", "compare-baselines", "--seeds", "1", "--mlp-sizes", "5")
    for rel in ("results.csv", "test_results_0.csv", "opt_trace.csv", "cmp/summary.csv"):
        assert (tmp_path / "x" / rel).read_bytes() == (tmp_path / "y" / rel).read_bytes(), rel
    assert (tmp_path / "x" / "cmp" / "summary.csv").read_text().startswith(
        "seed,mcpilot,mcpilot-no-delay,ballistic,mlp-5\n")


def test_missing_input_is_reported(tmp_path):
    with pytest.raises(SystemExit, match="missing throws file"):
        _run(tmp_path, "fit-model")


def test_config_file_is_read(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("N_exp = 2\n")
    _run(tmp_path, "explore", "--config", str(conf))
    assert (tmp_path / "throws.csv").read_text().count("# throw=") == 2
    assert "N_exp = 2" in (tmp_path / "config.txt").read_text()
