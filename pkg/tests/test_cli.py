"""End-to-end tests of the command-line experiment runner.

Covers the exit-code contract (0 pass / 1 metric failure / 2 usage error),
config-file handling with flag overrides, seeded byte-level reproducibility
of the data files, and the catalog round trip: every listed name must be
accepted by ``run``.
"""
from __future__ import annotations

import json
from pathlib import Path

import yaml
from click.testing import CliRunner

from skellab.cli import CATALOG, ExperimentConfig, main


def invoke(*args: str, env: dict | None = None):
    return CliRunner().invoke(main, list(args), env=env)


def read_report(out_dir: Path) -> dict:
    return json.loads((out_dir / "report.json").read_text())


def test_catalog_lists_the_shipped_names() -> None:
    result = invoke("catalog")
    assert result.exit_code == 0
    assert "running-max" in result.output
    assert "fbm-put" in result.output
    for section in ("functionals", "payoffs", "estimators"):
        assert section in result.output


def _configs_exercising_every_catalog_name(out_root: Path) -> list[dict]:
    configs: list[dict] = []
    for name in CATALOG["functionals"]:
        configs.append(
            {
                "subcommand": "probe",
                "functional": name,
                "mode": "derivative",
                "level_k": 3,
                "paths": 1000,
                "seed": 5,
            }
        )
    for name in CATALOG["payoffs"]:
        if name == "fbm-put":
            configs.append(
                {
                    "subcommand": "fbm-snell",
                    "payoff": name,
                    "hurst": 0.7,
                    "sigma": 0.3,
                    "rate": 0.05,
                    "strike": 1.05,
                    "level_k": 2,
                    "horizon": 0.25,
                    "paths": 1000,
                    "seed": 5,
                }
            )
        else:
            configs.append(
                {
                    "subcommand": "snell",
                    "payoff": name,
                    "estimator": "binomial",
                    "strike": 0.25,
                    "level_k": 2,
                    "horizon": 0.5,
                    "seed": 5,
                }
            )
    for name in CATALOG["estimators"]:
        configs.append(
            {
                "subcommand": "snell",
                "payoff": "put",
                "estimator": name,
                "strike": 0.25,
                "level_k": 2,
                "horizon": 0.5,
                # the one-percent accuracy band needs a real sample size
                "paths": 20000,
                "seed": 5,
            }
        )
    for i, cfg in enumerate(configs):
        cfg["out_dir"] = str(out_root / f"run{i}")
    return configs


def test_every_catalog_name_is_accepted_by_run(tmp_path: Path) -> None:
    for i, cfg in enumerate(_configs_exercising_every_catalog_name(tmp_path)):
        file = tmp_path / f"cfg{i}.yaml"
        file.write_text(yaml.safe_dump(cfg))
        result = invoke("run", "--config", str(file))
        assert result.exit_code == 0, (cfg, result.output)
        assert (Path(cfg["out_dir"]) / "report.json").is_file()


def test_run_with_missing_config_exits_2_and_writes_nothing(tmp_path: Path) -> None:
    out_dir = tmp_path / "never"
    result = invoke(
        "run", "--config", str(tmp_path / "absent.yaml"), "--out-dir", str(out_dir)
    )
    assert result.exit_code == 2
    assert "does not exist" in result.output
    assert not out_dir.exists()


def test_run_requires_a_subcommand_key(tmp_path: Path) -> None:
    file = tmp_path / "nosub.yaml"
    file.write_text(yaml.safe_dump({"seed": 1}))
    result = invoke("run", "--config", str(file))
    assert result.exit_code == 2
    assert "subcommand" in result.output


def test_unknown_config_keys_are_rejected(tmp_path: Path) -> None:
    file = tmp_path / "bogus.yaml"
    file.write_text(yaml.safe_dump({"subcommand": "skeleton-stats", "seed": 1, "bogus_knob": 3}))
    result = invoke("run", "--config", str(file))
    assert result.exit_code == 2
    assert "bogus_knob" in result.output


def test_seed_is_mandatory(tmp_path: Path) -> None:
    result = invoke("skeleton-stats", "--paths", "50", "--out-dir", str(tmp_path / "o"))
    assert result.exit_code == 2
    assert "--seed is mandatory" in result.output


def test_same_seed_reproduces_data_files_byte_for_byte(tmp_path: Path) -> None:
    dirs = [tmp_path / "a", tmp_path / "b"]
    for out in dirs:
        result = invoke(
            "skeleton-stats", "--k", "4", "--paths", "2000", "--seed", "7",
            "--out-dir", str(out),
        )
        assert result.exit_code == 0
    for name in ("metrics.csv", "survival.csv"):
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
    reports = [read_report(out) for out in dirs]
    for report in reports:
        report.pop("wall_clock_s")
        report["config"].pop("out_dir")
    assert reports[0] == reports[1]


def test_different_seeds_give_different_data(tmp_path: Path) -> None:
    outputs = []
    for seed in ("7", "8"):
        out = tmp_path / seed
        invoke("skeleton-stats", "--k", "4", "--paths", "500", "--seed", seed,
               "--out-dir", str(out))
        outputs.append((out / "survival.csv").read_bytes())
    assert outputs[0] != outputs[1]


def test_flags_override_config_file_values(tmp_path: Path) -> None:
    file = tmp_path / "cfg.yaml"
    file.write_text(
        yaml.safe_dump(
            {"subcommand": "skeleton-stats", "seed": 7, "level_k": 4, "paths": 5000}
        )
    )
    out = tmp_path / "o"
    result = invoke("run", "--config", str(file), "--paths", "600",
                    "--out-dir", str(out))
    assert result.exit_code == 0
    config = read_report(out)["config"]
    assert config["paths"] == 600
    assert config["level_k"] == 4
    assert config["seed"] == 7


def test_config_round_trips_losslessly_through_yaml() -> None:
    original = ExperimentConfig(
        subcommand="derivative-convergence",
        seed=11,
        levels=[3, 4, 5],
        paths=250,
        window=0.5,
        out_dir="/tmp/x",
    )
    revived = ExperimentConfig.from_dict(
        yaml.safe_load(yaml.safe_dump(original.to_dict()))
    )
    assert revived == original


def test_metric_failure_exits_1_but_still_reports(tmp_path: Path) -> None:
    # a constant-only regression basis genuinely misprices the put
    out = tmp_path / "o"
    result = invoke(
        "snell", "--payoff", "put", "--K", "0.25", "--k", "2", "--T", "0.75",
        "--estimator", "regression", "--basis-degree", "0", "--paths", "1000",
        "--seed", "3", "--out-dir", str(out),
    )
    assert result.exit_code == 1
    assert "FAIL estimator_value" in result.output
    report = read_report(out)
    failed = [m for m in report["metrics"] if m["passed"] is False]
    assert failed and failed[0]["name"] == "estimator_value"


def test_infeasible_tree_exits_2_without_outputs(tmp_path: Path) -> None:
    out = tmp_path / "never"
    result = invoke(
        "snell", "--payoff", "put", "--K", "0.25", "--k", "2", "--T", "1",
        "--estimator", "tree", "--m", "3", "--seed", "1", "--out-dir", str(out),
    )
    assert result.exit_code == 2
    assert "infeasible configuration" in result.output
    assert not out.exists()


def test_basic_validation_exits_2(tmp_path: Path) -> None:
    out = str(tmp_path / "o")
    cases = [
        ("skeleton-stats", "--k", "-1", "--seed", "1", "--out-dir", out),
        ("skeleton-stats", "--paths", "0", "--seed", "1", "--out-dir", out),
        ("skeleton-stats", "--T", "0", "--seed", "1", "--out-dir", out),
        ("skeleton-stats", "--threads", "0", "--seed", "1", "--out-dir", out),
        ("derivative-convergence", "--levels", "4,x", "--seed", "1", "--out-dir", out),
        ("derivative-convergence", "--levels", "5,4", "--seed", "1", "--out-dir", out),
        ("tanaka", "--x", "0.3", "--k", "2", "--seed", "1", "--out-dir", out),
        ("probe", "--functional", "unheard-of", "--seed", "1", "--out-dir", out),
        ("snell", "--estimator", "unheard-of", "--seed", "1", "--out-dir", out),
    ]
    for case in cases:
        result = invoke(*case)
        assert result.exit_code == 2, (case, result.output)


def test_env_var_sets_the_default_output_directory(tmp_path: Path) -> None:
    target = tmp_path / "from_env"
    result = invoke(
        "skeleton-stats", "--k", "3", "--paths", "200", "--seed", "2",
        env={"SKELLAB_OUT_DIR": str(target)},
    )
    assert result.exit_code == 0
    assert (target / "report.json").is_file()
    assert read_report(target)["config"]["out_dir"] == str(target)


def test_report_carries_config_echo_version_and_metric_schema(tmp_path: Path) -> None:
    out = tmp_path / "o"
    result = invoke(
        "snell", "--payoff", "put", "--K", "0.25", "--k", "2", "--T", "0.5",
        "--estimator", "tree", "--seed", "7", "--out-dir", str(out),
    )
    assert result.exit_code == 0
    report = read_report(out)
    assert report["artifact_version"] == "0.1.0"
    assert report["config"]["subcommand"] == "snell"
    assert report["wall_clock_s"] >= 0.0
    for metric in report["metrics"]:
        assert set(metric) == {
            "name", "value", "se", "target", "tolerance", "target_basis", "passed",
        }
    asserted = [m for m in report["metrics"] if m["passed"] is not None]
    assert asserted, "each run must assert at least one metric"
    for metric in asserted:
        assert metric["target"] is not None and metric["tolerance"] is not None
        assert metric["target_basis"] != "informational"
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "name,value,se,target,tolerance,target_basis,passed"


def test_localtime_writes_the_field_csv(tmp_path: Path) -> None:
    out = tmp_path / "o"
    result = invoke(
        "localtime", "--k", "3", "--T", "0.5", "--paths", "40", "--seed", "4",
        "--out-dir", str(out),
    )
    assert result.exit_code == 0
    lines = (out / "localtime.csv").read_text().splitlines()
    assert lines[0] == "j,level,u,d,L"
    assert len(lines) > 1


def test_fbm_snell_writes_the_path_csv(tmp_path: Path) -> None:
    out = tmp_path / "o"
    result = invoke(
        "fbm-snell", "--payoff", "fbm-put", "--K", "1.05", "--hurst", "0.7",
        "--sigma", "0.3", "--r", "0.05", "--k", "2", "--T", "0.25",
        "--paths", "1000", "--seed", "7", "--out-dir", str(out),
    )
    assert result.exit_code == 0
    lines = (out / "path.csv").read_text().splitlines()
    assert lines[0] == "n,time,A,B_H,W_H,payoff"
    first = lines[1].split(",")
    assert first[:3] == ["0", "0.0", "0.0"]
    # price starts at one, so the first discounted payoff is the strike excess
    assert float(first[4]) == 1.0
    assert float(first[5]) == 0.050000000000000044


def test_snell_reports_the_exact_lattice_value_inline(tmp_path: Path) -> None:
    out = tmp_path / "o"
    result = invoke(
        "snell", "--payoff", "put", "--K", "0.25", "--k", "2", "--T", "0.75",
        "--estimator", "binomial", "--seed", "7", "--out-dir", str(out),
    )
    assert result.exit_code == 0
    report = read_report(out)
    named = {m["name"]: m for m in report["metrics"]}
    assert named["binomial_value"]["value"] == 0.4915771484375
