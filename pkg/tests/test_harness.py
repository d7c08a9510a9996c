import json

import numpy as np
import pytest
import yaml

from phisd import cli, harness
from phisd.errors import ConfigError
from phisd.problems import GridSpec, allen_cahn_problem

MINIMAL = {
    "name": "tiny",
    "problem": {"name": "quadratic", "spectrum": [-1.0, 2.0, 4.0]},
    "solver": {"k": 1, "eta": "auto", "tau": 0.1, "grad_tol": 1e-10, "max_iters": 200},
    "initial": {"point": "unit_gradient_start"},
}


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def cfg_with(tmp_path, **changes):
    data = json.loads(json.dumps(MINIMAL))
    for dotted, value in changes.items():
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    data.setdefault("output", {})["dir"] = str(tmp_path / "runs")
    return data


# -- schema --------------------------------------------------------------------


@pytest.mark.parametrize("name", [n for n in harness.bundled_configs() if n != "exp3_scaling"])
def test_bundled_configs_validate(name):
    cfg = harness.load_config(name)
    assert cfg.name == name
    harness.prepare(cfg)


def test_bundled_manifest_validates():
    manifest, path = harness.load_manifest("exp3_scaling")
    assert len(manifest.members) == 3
    for m in manifest.members:
        harness.load_config(str(path.parent / m))


def test_unknown_keys_rejected_with_field_path(tmp_path):
    with pytest.raises(ConfigError, match="bogus: unknown key"):
        harness.parse_config(cfg_with(tmp_path, bogus=1))
    with pytest.raises(ConfigError, match=r"solver\.stepsize: unknown key"):
        harness.parse_config(cfg_with(tmp_path, **{"solver.stepsize": 0.1}))
    bad = cfg_with(tmp_path)
    bad["metric"] = {"stages": [{"type": "jacobi", "eps": 1.0, "colour": "red"}]}
    with pytest.raises(ConfigError, match="colour"):
        harness.parse_config(bad)


@pytest.mark.parametrize(
    "change, message",
    [
        ({"solver.tau": -1.0}, "tau"),
        ({"solver.eta": "fast"}, "eta"),
        ({"problem.name": "nope"}, "problem"),
        ({"initial.file": "x.npy"}, "exactly one of point and file"),
        ({"stage_switch": {"eta": 1.0}}, "second metric stage"),
    ],
)
def test_invalid_values_rejected(tmp_path, change, message):
    with pytest.raises(ConfigError, match=message):
        harness.parse_config(cfg_with(tmp_path, **change))


def test_spectral_needs_one_parameter(tmp_path):
    bad = cfg_with(tmp_path)
    bad["metric"] = {"stages": [{"type": "spectral", "eps": 1.0, "target_kappa": 2.0}]}
    with pytest.raises(ConfigError, match="exactly one"):
        harness.parse_config(bad)


def test_yaml_syntax_error_reports_line(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("name: x\nproblem: {name: quadratic\nsolver: [\n")
    with pytest.raises(ConfigError, match="line"):
        harness.load_config(str(path))


def test_missing_config():
    with pytest.raises(ConfigError, match="no config"):
        harness.resolve_config_path("does_not_exist_anywhere")


def test_unknown_point_and_operator(tmp_path):
    with pytest.raises(ConfigError, match="no point"):
        harness.prepare(harness.parse_config(cfg_with(tmp_path, **{"initial.point": "mars"})))
    bad = cfg_with(tmp_path)
    bad["metric"] = {"stages": [{"type": "shifted_operator", "operator": "laplacian", "shift": 1.0}]}
    with pytest.raises(ConfigError, match="operator"):
        harness.prepare(harness.parse_config(bad))


def test_initial_state_from_file_and_perturbation(tmp_path):
    np.save(tmp_path / "x0.npy", np.array([0.1, 0.2, 0.3]))
    data = cfg_with(tmp_path)
    data["initial"] = {"file": "x0.npy", "perturbation_std": 0.01}
    path = write_yaml(tmp_path / "c.yaml", data)
    cfg = harness.load_config(str(path))
    a = harness.prepare(cfg).x0
    b = harness.prepare(cfg).x0
    assert np.array_equal(a, b) and np.allclose(a, [0.1, 0.2, 0.3], atol=0.05)
    assert not np.array_equal(a, [0.1, 0.2, 0.3])


def test_mass_weight_scales_operator_metric():
    p = allen_cahn_problem(GridSpec(6, 0.3))
    w = p.operators["weight"]
    spec = harness.ShiftedOperatorSpec(type="shifted_operator", operator="laplacian", shift=2.0)
    M = harness.metric_source(spec, p).build(None, None)
    expected = w * (p.operators["laplacian"].toarray() + 2.0 * np.eye(36))
    assert np.allclose(M.to_dense(), expected)


def test_eta_auto_resolves(tmp_path):
    prepared = harness.prepare(harness.parse_config(cfg_with(tmp_path)))
    assert prepared.solver.eta == pytest.approx(2 / (4 + 1))


def test_overrides_do_not_mutate(tmp_path):
    cfg = harness.parse_config(cfg_with(tmp_path))
    new = harness.with_overrides(cfg, seed=9, out="elsewhere", max_iters=3)
    assert (new.seed, new.output.dir, new.solver.max_iters) == (9, "elsewhere", 3)
    assert cfg.seed == 0 and cfg.solver.max_iters == 200


# -- traces --------------------------------------------------------------------


def test_trace_round_trip(tmp_path):
    res = harness.run_experiment(harness.parse_config(cfg_with(tmp_path)))
    text = res.trace_path.read_text()
    tf = harness.parse_trace(text)
    assert harness.format_trace(tf) == text
    assert tf == harness.trace_file(res.config, res.trace)
    assert tf.rows.shape == (res.trace.iterations + 1, 5)
    assert np.array_equal(tf.rows[:, 1], res.trace.grad_norms)
    assert tf.status == "ConvergedIndexK" and tf.morse_index == 1


def test_trace_rows_have_17_significant_digits(tmp_path):
    res = harness.run_experiment(harness.parse_config(cfg_with(tmp_path)))
    lines = [line for line in res.trace_path.read_text().splitlines() if line and line[0].isdigit()]
    mantissa = lines[1].split(",")[1].split("e")[0]
    assert len(mantissa.replace(".", "").lstrip("-")) == 17


def test_trace_missing_header_rejected():
    with pytest.raises(ValueError):
        harness.parse_trace("# status: x\n1,2,3\n")


def test_runs_are_bit_identical_and_config_echo_reruns(tmp_path):
    cfg = harness.with_overrides(harness.load_config("exp3_ic"), out=str(tmp_path / "a"))
    first = harness.run_experiment(cfg).trace_path.read_bytes()
    again = harness.run_experiment(harness.load_config("exp3_ic").model_copy(update={"output": cfg.output}))
    assert first == again.trace_path.read_bytes()
    echo = harness.parse_trace(first.decode()).config
    echo["output"]["dir"] = str(tmp_path / "c")
    replay = harness.run_experiment(harness.parse_config(echo)).trace_path.read_text()
    # identical apart from the echoed output directory
    assert replay.replace(str(tmp_path / "c"), "") == first.decode().replace(str(tmp_path / "a"), "")


def test_summary_record(tmp_path):
    res = harness.run_experiment(harness.parse_config(cfg_with(tmp_path)))
    summary = json.loads((res.trace_path.parent / "summary.json").read_text())
    assert summary["status"] == "ConvergedIndexK" and summary["exit_code"] == 0
    assert summary["wall_time"] >= 0 and summary["n"] == 3


def test_degenerate_start_at_saddle(tmp_path):
    cfg = harness.parse_config(cfg_with(tmp_path, **{"initial.point": "origin"}))
    res = harness.run_experiment(cfg)
    assert res.summary["status"] == "ConvergedIndexK" and res.summary["iterations"] == 0


def test_exp1_hisd_example(tmp_path):
    res = harness.run_experiment(harness.with_overrides(harness.load_config("exp1_hisd"), out=str(tmp_path)))
    assert res.exit_code == 0
    assert abs(res.summary["iterations"] - 923) <= 0.05 * 923
    assert res.summary["rate"] == pytest.approx(0.980, abs=0.005)


# -- suites --------------------------------------------------------------------


def test_singleton_suite_wraps_run(tmp_path):
    path = write_yaml(tmp_path / "one.yaml", cfg_with(tmp_path))
    manifest = harness.SuiteManifest(name="single", members=[str(path)])
    rows, code = harness.run_suite(manifest, out=tmp_path / "suite")
    single = harness.run_experiment(harness.load_config(str(path)), write=False).summary
    assert code == 0 and len(rows) == 1
    for key in ("name", "iterations", "status", "rate"):
        assert rows[0][key] == single[key]
    table = (tmp_path / "suite" / "single" / "comparison.csv").read_text().splitlines()
    assert table[0] == ",".join(harness.SUITE_COLUMNS) and len(table) == 2


def test_suite_isolates_failures(tmp_path):
    good = write_yaml(tmp_path / "good.yaml", cfg_with(tmp_path))
    bad_data = cfg_with(tmp_path, name="oversized", **{"solver.eta": 5.0})
    bad = write_yaml(tmp_path / "bad.yaml", bad_data)
    broken = tmp_path / "broken.yaml"
    broken.write_text("name: broken\nsolver: {k: 1}\n")
    manifest = harness.SuiteManifest(name="mixed", members=["good.yaml", "bad.yaml", "broken.yaml"])
    rows, code = harness.run_suite(manifest, base_dir=tmp_path, out=tmp_path / "suite")
    assert [r["status"] for r in rows] == ["ConvergedIndexK", "Diverged", "Error"]
    assert code == 3
    assert rows[0]["iterations"] == harness.run_experiment(harness.load_config(str(good)), write=False).summary["iterations"]


def test_suite_parallel_matches_serial(tmp_path):
    members = []
    for i, eta in enumerate([0.2, 0.3]):
        members.append(str(write_yaml(tmp_path / f"m{i}.yaml", cfg_with(tmp_path, name=f"m{i}", **{"solver.eta": eta}))))
    serial, _ = harness.run_suite(harness.SuiteManifest(name="s", members=members), out=tmp_path / "s")
    parallel, _ = harness.run_suite(harness.SuiteManifest(name="p", members=members, jobs=2), out=tmp_path / "p")
    assert [r["iterations"] for r in serial] == [r["iterations"] for r in parallel]


# -- command line ------------------------------------------------------------------


def test_cli_lists(capsys):
    assert cli.main(["list-problems"]) == 0
    out = capsys.readouterr().out
    assert "allen_cahn" in out and "butterfly" in out
    assert cli.main(["list-metrics"]) == 0
    assert "shifted_ic" in capsys.readouterr().out
    assert cli.main(["list-configs"]) == 0
    assert "exp4_two_stage" in capsys.readouterr().out


def test_cli_run_exit_codes(tmp_path, capsys):
    out = str(tmp_path)
    assert cli.main(["run", "exp1_spectral_kappa2", "--out", out, "--quiet"]) == 0
    assert capsys.readouterr().out == ""
    assert cli.main(["run", "exp3_hisd_unstable", "--out", out, "--quiet"]) == 3
    assert cli.main(["run", "exp1_hisd", "--out", out, "--max-iters", "5", "--quiet"]) == 4
    path = write_yaml(tmp_path / "wrong.yaml", cfg_with(tmp_path, **{"solver.k": 0, "initial.point": "origin"}))
    assert cli.main(["run", str(path), "--quiet"]) == 2


def test_cli_config_error_exit_1(tmp_path, capsys):
    path = write_yaml(tmp_path / "bad.yaml", cfg_with(tmp_path, typo=True))
    assert cli.main(["run", str(path)]) == 1
    err = capsys.readouterr().err
    assert "typo" in err and "invalid config" in err


def test_cli_seed_override(tmp_path):
    out = tmp_path / "o"
    cli.main(["run", "exp3_frozen_spectral", "--out", str(out), "--seed", "5", "--quiet"])
    tf = harness.read_trace(out / "exp3_frozen_spectral" / "trace.csv")
    assert tf.seed == 5 and tf.config["seed"] == 5


def test_cli_seed_range():
    with pytest.raises(SystemExit):
        cli.main(["run", "exp1_hisd", "--seed", "-1"])


def test_cli_verify(capsys):
    assert cli.main(["verify", "exp3_block_jacobi"]) == 0
    out = capsys.readouterr().out
    assert "SPD probe ok" in out and "verify: ok" in out


def test_cli_suite(tmp_path, capsys):
    path = write_yaml(tmp_path / "c.yaml", cfg_with(tmp_path))
    manifest = write_yaml(tmp_path / "m.yaml", {"name": "mini", "members": ["c.yaml"]})
    assert cli.main(["suite", str(manifest), "--out", str(tmp_path / "o")]) == 0
    assert "tiny" in capsys.readouterr().out


def test_exp3_scaling_manifest_bands(tmp_path):
    manifest, path = harness.load_manifest("exp3_scaling")
    rows, code = harness.run_suite(manifest, path.parent, out=tmp_path)
    assert code == 0
    for row, expected in zip(rows, (157, 52, 171)):
        assert 0.5 * expected <= row["iterations"] <= 1.5 * expected, row
    # each member uses the metric the selection heuristic picks for its size
    from phisd.preconditioners import select_metric

    for row in rows:
        cfg = harness.load_config(row["name"])
        p = cfg.problem.build()
        H = p.hessian(p.point("alternating"))
        assert row["metric"] == select_metric(p.n, H.nnz / p.n**2, p.block_sizes is not None)
