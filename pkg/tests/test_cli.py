import json
import os

import pytest

from atmlab.cli import build_parser, main
from atmlab.config import DEFAULTS, RunConfig
from atmlab.util import ConfigError

MICRO = {
    "corpus": {"n_entities": 10, "n_attrs": 3, "questions_per_fact": 1,
               "n_train": 24, "n_test": 6, "held_out_facts": 2},
    "train": {"batch_size": 8, "n_f": 2, "n_r": 1, "n_docs": 3,
              "init_epochs": 1, "attacker_epochs": 1, "queries_per_round": 6,
              "fab_max_new": 6, "init_list_lengths": [4, 2]},
    "benchmark": {"k_ret": 3, "k_fab": 3, "total": 6, "max_new": 4},
}


def write_micro_config(tmp_path, **extra):
    tree = json.loads(json.dumps(MICRO))
    tree.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tree))
    return str(path)


def test_help_lists_all_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in ("gen-corpus", "pretrain-attacker", "init-tune", "loop",
                 "eval", "sweep", "analyze"):
        assert name in out


def test_unknown_flag_is_error():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["eval", "--nonsense"])
    assert exc.value.code == 2


def test_unknown_config_keys_listed(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"alpa": 0.1}, "extra_top": 1}))
    code = main(["gen-corpus", "--config", str(path), "--run-dir", str(tmp_path / "r")])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"
    assert "train.alpa" in err["message"] and "extra_top" in err["message"]


def test_missing_run_dir_is_error(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("ATM_RUN_DIR", raising=False)
    code = main(["gen-corpus"])
    assert code == 1
    assert "run directory" in json.loads(capsys.readouterr().err)["message"]


def test_env_var_run_dir(tmp_path, capsys, monkeypatch):
    cfg = write_micro_config(tmp_path)
    monkeypatch.setenv("ATM_RUN_DIR", str(tmp_path / "envrun"))
    assert main(["gen-corpus", "--config", cfg]) == 0
    assert os.path.exists(tmp_path / "envrun" / "corpus" / "qa_train.jsonl")


def test_loop_without_init_is_dependency_error(tmp_path, capsys):
    cfg = write_micro_config(tmp_path)
    run_dir = str(tmp_path / "run")
    assert main(["gen-corpus", "--config", cfg, "--run-dir", run_dir]) == 0
    code = main(["loop", "--config", cfg, "--run-dir", run_dir])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "StageDependencyError"


def test_eval_without_rounds_is_dependency_error(tmp_path, capsys):
    cfg = write_micro_config(tmp_path)
    run_dir = str(tmp_path / "run")
    main(["gen-corpus", "--config", cfg, "--run-dir", run_dir])
    code = main(["eval", "--config", cfg, "--run-dir", run_dir])
    assert code == 1


def test_config_mismatch_detected(tmp_path, capsys):
    cfg = write_micro_config(tmp_path)
    run_dir = str(tmp_path / "run")
    assert main(["gen-corpus", "--config", cfg, "--run-dir", run_dir]) == 0
    code = main(["gen-corpus", "--config", cfg, "--run-dir", run_dir, "--seed", "99"])
    assert code == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_full_micro_pipeline(tmp_path, capsys):
    cfg = write_micro_config(tmp_path)
    run_dir = str(tmp_path / "run")
    for cmd in ("gen-corpus", "pretrain-attacker", "init-tune", "loop",
                "eval", "sweep", "analyze"):
        code = main([cmd, "--config", cfg, "--run-dir", run_dir])
        assert code == 0, cmd
    out = capsys.readouterr().out
    assert os.path.exists(os.path.join(run_dir, "round_1", "metrics.json"))
    assert os.path.exists(os.path.join(run_dir, "round_1", "sweep.csv"))
    assert os.path.exists(os.path.join(run_dir, "recall_curve.csv"))
    assert os.path.exists(os.path.join(run_dir, "analysis.json"))
    assert "round" in out


def test_eval_matches_loop_snapshot(tmp_path):
    """Re-evaluating a committed round reproduces its metrics file byte-for-byte."""
    cfg = write_micro_config(tmp_path)
    run_dir = str(tmp_path / "run")
    for cmd in ("gen-corpus", "pretrain-attacker", "init-tune", "loop"):
        assert main([cmd, "--config", cfg, "--run-dir", run_dir]) == 0
    path = os.path.join(run_dir, "round_1", "metrics.json")
    want = open(path, "rb").read()
    assert main(["eval", "--config", cfg, "--run-dir", run_dir, "--round", "1"]) == 0
    assert open(path, "rb").read() == want


def test_config_defaults_round_trip():
    cfg = RunConfig.from_file(None)
    assert cfg.tree["train"]["alpha"] == DEFAULTS["train"]["alpha"]
    assert cfg.dims().vocab_size == 512
    with pytest.raises(ConfigError):
        RunConfig({**cfg.tree, "loop": {"dpo_reference": "bogus"}})
