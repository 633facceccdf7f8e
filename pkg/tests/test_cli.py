import json
import subprocess
import sys

import pytest

from gridembed.cli import (EXIT_INFEASIBLE, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_OK, EXIT_STAGE, RunConfig,
                           build_parser, main)
from gridembed.dataset import DatasetConfig
from gridembed.embedding import EmbeddingConfig
from gridembed.grid import to_matpower
from gridembed.neural import TrainConfig

TINY = ["--max-instances", "12", "--epochs", "3"]


def test_solve_case14(capsys, tmp_path):
    out = tmp_path / "sol.json"
    assert main(["solve", "case14", "--out", str(out)]) == EXIT_OK
    assert "objective=" in capsys.readouterr().out
    assert json.loads(out.read_text())["status"] == "Optimal"


def test_solve_missing_file(capsys):
    assert main(["solve", "/nonexistent/case.m"]) == EXIT_INPUT
    assert "not found" in capsys.readouterr().err


def test_solve_infeasible(case2, tmp_path):
    net, loads = case2
    path = tmp_path / "heavy.m"
    path.write_text(to_matpower(net, loads.scaled(50.0)))
    assert main(["solve", str(path)]) == EXIT_INFEASIBLE


def test_feas_tol_flag_overrides_config(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(RunConfig(embed=EmbeddingConfig()).dumps())
    seen = {}
    import gridembed.acopf as acopf
    real = acopf.solve_acopf

    def spy(net, loads, config=None, **kw):
        seen["tol"] = config.feas_tol
        return real(net, loads, config, **kw)

    monkeypatch.setattr(acopf, "solve_acopf", spy)
    assert main(["solve", "case2", "--config", str(cfg), "--feas-tol", "1e-7"]) == EXIT_OK
    assert seen["tol"] == 1e-7


def test_bad_flag_exits_1():
    assert main(["solve", "case14", "--no-such-flag"]) == EXIT_INPUT
    assert main([]) == EXIT_INPUT


@pytest.mark.parametrize("cmd", ["solve", "embed", "gen-data", "train-encoder", "train-opf", "evaluate",
                                 "pipeline"])
def test_help_per_subcommand(cmd, capsys):
    assert main([cmd, "--help"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "--seed" in out and "--config" in out


def test_embed_case14(capsys, tmp_path):
    out = tmp_path / "emb.json"
    assert main(["embed", "case14", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "Joint (%)" in text
    record = json.loads(out.read_text())
    assert abs(record["opf_error"]) <= 0.5


def test_max_iter_one_records_one_subproblem(tmp_path):
    out = tmp_path / "emb.json"
    code = main(["embed", "case30", "--max-iter", "1", "--out", str(out)])
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    assert len(json.loads(out.read_text())["trace"]) <= 1


def test_tighter_beta_needs_at_least_as_many_iterations(tmp_path):
    counts = []
    for beta in ("0.005", "0.001"):
        out = tmp_path / f"{beta}.json"
        main(["embed", "case14", "--beta", beta, "--out", str(out)])
        counts.append(len(json.loads(out.read_text())["trace"]))
    assert counts[1] >= counts[0]


def test_run_config_round_trip():
    cfg = RunConfig("case30", "x", EmbeddingConfig(beta=0.001), DatasetConfig(max_instances=5),
                    TrainConfig(epochs=7), ("full", "none"), 0.5, True)
    again = RunConfig.from_dict(json.loads(cfg.dumps()))
    assert again == cfg
    assert again.variants == ("none", "full")
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        RunConfig(variants=())


def test_pipeline_none_only_trains_no_encoders(tmp_path):
    out = tmp_path / "run"
    assert main(["pipeline", "--case", "case14", "--out", str(out), "--variants", "none"] + TINY) == EXIT_OK
    assert not (out / "encoders").exists()
    assert sorted(p.name for p in (out / "models").iterdir()) == ["none"]
    for name in ("compression", "dimensions", "dispatch_l1", "combined_mse", "gen_voltage_l1", "curves"):
        assert (out / "report" / f"{name}.csv").is_file()
    cfg = RunConfig.from_dict(json.loads((out / "effective_config.json").read_text()))
    assert cfg.variants == ("none",) and cfg.data.max_instances == 12


def test_pipeline_stage_failure_exits_5(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(RunConfig(data=DatasetConfig(max_instances=4, min_feasible=50)).dumps())
    code = main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "run"), "--epochs", "2"])
    assert code == EXIT_STAGE
    assert "gen-data" in capsys.readouterr().err


def test_unknown_variant_is_usage_error(tmp_path):
    assert main(["pipeline", "--out", str(tmp_path), "--variants", "none,huge"]) == EXIT_INPUT


def test_stagewise_commands(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "case14", "--out", str(data), "--max-instances", "12"]) == EXIT_OK
    enc = tmp_path / "enc" / "linear.json"
    assert main(["train-encoder", str(data), "--kind", "linear", "--out", str(enc), "--epochs", "3"]) == EXIT_OK
    models = tmp_path / "models"
    assert main(["train-opf", str(data), "--out", str(models / "none"), "--epochs", "3"]) == EXIT_OK
    assert main(["train-opf", str(data), "--encoder", str(enc), "--out", str(models / "linear"),
                 "--epochs", "3"]) == EXIT_OK
    report = tmp_path / "report"
    assert main(["evaluate", str(data), "--models", str(models), "--encoders", str(enc.parent),
                 "--out", str(report)]) == EXIT_OK
    rows = (report / "dispatch_l1.csv").read_text().splitlines()
    assert rows[0] == "Network,No Enc.,Linear Enc.,Full Enc."
    assert rows[1].endswith(",absent")
    assert main(["train-opf", str(tmp_path / "missing"), "--out", str(models / "x")]) == EXIT_INPUT


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "gridembed", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "pipeline" in res.stdout
    assert build_parser().prog == "gridembed"
