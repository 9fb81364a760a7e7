from __future__ import annotations

import json
from pathlib import Path

import pytest

from matryoshka.cli import main, parse_args

TRAIN_FAST = ["--epochs", "3", "--seed", "0", "--threads", "1"]


def run_ok(argv):
    assert main([str(a) for a in argv]) == 0


def files(d: Path) -> dict[str, bytes]:
    skip = {"manifest.json", "timing.json"}
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name not in skip}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run_ok(["gen-data", "--preset", "tiny", "--seed", 7, "--out", root / "data"])
    run_ok(["train", "--data", root / "data", "--dims", "4,8,16", *TRAIN_FAST, "--out", root / "run"])
    return root


def test_gen_data_is_deterministic(tmp_path):
    run_ok(["gen-data", "--preset", "default", "--seed", 7, "--out", tmp_path / "a"])
    run_ok(["gen-data", "--preset", "default", "--seed", 7, "--out", tmp_path / "b"])
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert set(a) == {"train.mrem", "test.mrem", "superclasses.tsv"}
    assert a == b
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and "timestamp" in manifest
    assert manifest["resolved"]["synthetic_spec"]["seed"] == 7


def test_ff_and_singleton_mrl_traces_agree(workspace, tmp_path):
    data = workspace / "data"
    run_ok(["train", "--data", data, "--variant", "ff", "--dims", "16", *TRAIN_FAST, "--out", tmp_path / "ff"])
    run_ok(["train", "--data", data, "--variant", "mrl", "--dims", "16", *TRAIN_FAST, "--out", tmp_path / "mrl"])
    ff = (tmp_path / "ff" / "trace-ff-16.csv").read_text()
    mrl = (tmp_path / "mrl" / "trace.csv").read_text()
    assert ff == mrl
    assert mrl.splitlines()[0] == "epoch,loss,acc@16"
    assert (tmp_path / "ff" / "ff-16.mrlh").read_bytes() == (tmp_path / "mrl" / "checkpoint.mrlh").read_bytes()


def test_funnel_cost_only(capsys):
    argv = "retrieve --mode funnel --ds 16 --cascade 32,64,128,256,2048 --shortlists 200,100,50,25,10 --n-override 1281167 --cost-only"
    assert main(argv.split()) == 0
    row = json.loads(capsys.readouterr().out.strip())
    assert row["MFLOPs"] == 20.54


def test_single_cost_only(capsys):
    assert main("retrieve --mode single --dims 8,2048 --n-override 1281167 --cost-only".split()) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["MFLOPs"] for r in rows] == [10.25, 2623.83]


def test_errors_are_one_json_line(tmp_path, capsys):
    assert main(["retrieve", "--mode", "adaptive", "--cost-only"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and json.loads(err[0])["error"] == "UsageError"
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.mrlh"), "--train", "x", "--test", "y", "--out", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"
    assert main(["train", "--bogus-flag"]) != 0


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults for this run\nepochs = 7\nlr=0.05\nnormalize=true\n")
    args = parse_args(["train", "--config", str(cfg), "--lr", "0.2", "--out", "o"])
    assert args.epochs == 7 and args.lr == 0.2 and args.normalize is True
    assert parse_args(["train", "--out", "o"]).epochs == 60
    cfg.write_text("not_a_flag = 3\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    monkeypatch.setenv("MRL_THREADS", "2")
    assert parse_args(["train", "--out", "o"]).threads == 2
    assert parse_args(["train", "--out", "o", "--threads", "1"]).threads == 1


def test_eval_tables(workspace, tmp_path):
    run_ok([
        "eval", "--data", workspace / "data", "--checkpoint", workspace / "run" / "checkpoint.mrlh",
        "--table", "1,2,9,15,16,superclass,trends", "--trials", 2, "--shots", "1", "--ways", 3, "--out", tmp_path,
    ])
    report = json.loads((tmp_path / "report.json").read_text())
    assert [r["m"] for r in report["table1_linear"]] == [4, 8, 16]
    assert (tmp_path / "table15.csv").read_text().splitlines()[0] == "4,8,16,always_wrong"
    assert report["table16_oracle"]["oracle_top1"] >= report["table16_oracle"]["best_single_top1"]


def test_eval_interpolated_dims_for_untied_head(workspace, tmp_path):
    run_ok([
        "eval", "--data", workspace / "data", "--checkpoint", workspace / "run" / "checkpoint.mrlh",
        "--dims", "4,6,8,12,16", "--epochs", 2, "--out", tmp_path,
    ])
    rows = json.loads((tmp_path / "report.json").read_text())["table1_linear"]
    assert [r["m"] for r in rows] == [4, 6, 8, 12, 16]


def test_cascade_outputs(workspace, tmp_path):
    run_ok(["cascade", "--data", workspace / "data", "--checkpoint", workspace / "run" / "checkpoint.mrlh",
            "--splits", 3, "--out", tmp_path])
    policy = json.loads((tmp_path / "policy.json").read_text())
    assert policy["dims"] == [4, 8, 16] and len(policy["thresholds"]) == 2
    report = json.loads((tmp_path / "cascade_report.json").read_text())
    assert len(report["splits"]) == 3
    assert {"expected_rep_size_final", "expected_rep_size_cumulative"} <= set(report["splits"][0])


@pytest.mark.parametrize(
    "extra",
    [
        ["--mode", "single", "--dims", "4,16", "--ks", "10,25", "--write-results"],
        ["--mode", "adaptive", "--ds", "4", "--dr", "16", "--k", "50", "--ks", "10"],
        ["--mode", "adaptive", "--ds", "4", "--dr", "16", "--k", "50", "--ks", "10", "--hnsw", "--M", "8"],
        ["--mode", "funnel", "--ds", "4", "--cascade", "8,16", "--shortlists", "40,10", "--ks", "10"],
        ["--mode", "sweep", "--ds", "4", "--dr", "16", "--sweep-k", "10,50", "--ks", "10"],
    ],
)
def test_retrieve_modes(workspace, tmp_path, extra):
    run_ok(["retrieve", "--data", workspace / "data", "--checkpoint", workspace / "run" / "checkpoint.mrlh",
            *extra, "--out", tmp_path])
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("config,D_s,D_r") and "mAP@10" in header


def test_bench(workspace, tmp_path):
    run_ok(["bench", "--data", workspace / "data", "--M", 8, "--ef-construction", 40, "--ef-search", "10,20",
            "--save-index", tmp_path / "idx.mrhn", "--out", tmp_path])
    stats = json.loads((tmp_path / "index_stats.json").read_text())
    assert stats["invariant_violations"] == [] and stats["hnsw_index_size_mb"] > stats["exact_index_size_mb"]
    assert (tmp_path / "idx.mrhn").read_bytes()[:6] == b"MRHN1\0"
    assert "build_time_s" in json.loads((tmp_path / "timing.json").read_text())
