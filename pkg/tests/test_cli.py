import json

import numpy as np
import pytest

from snnprune.checkpoint import load_checkpoint
from snnprune.cli import cmd_eval, main
from snnprune.config import ConfigError, RunConfig, dump_config, load_config, parse_pairs

SYNTHETIC = """\
# small separable problem
arch = fc:64-256-4
dataset = synthetic
synthetic_features = 64
synthetic_n = 1000
synthetic_test_n = 200
timesteps = 4
lr = 1e-2
finetune_lr = 1e-2
prune_min_connections = 0
epochs = 5
total_epochs = 14
finetune_policy = fixed
finetune_epochs = 1
budgets = 0.5, 0.25
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "synthetic.cfg"
    path.write_text(SYNTHETIC)
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_config_file_and_overrides(cfg_file):
    cfg = load_config(cfg_file, [("lr", "0.5"), ("budgets", "0.3,0.2")])
    assert cfg.lr == 0.5 and cfg.budgets == [0.3, 0.2]
    assert cfg.arch == "fc:64-256-4" and cfg.epochs == 5
    assert parse_pairs([("prune_min_connections", "1e4")]).prune_min_connections == 10000
    assert parse_pairs([("detach-reset", "false")]).detach_reset is False
    assert parse_pairs([("budgets", "")]).budgets == []


@pytest.mark.parametrize("pair,field", [
    (("lr", "-1"), "lr"),
    (("budgets", "0.1,0.25"), "budgets"),
    (("nonsense", "1"), "nonsense"),
    (("timesteps", "2.5"), "timesteps"),
    (("resource", "latency"), "resource"),
])
def test_config_errors_name_the_field(pair, field):
    with pytest.raises(ConfigError) as e:
        load_config(None, [pair])
    assert e.value.key == field and field in str(e.value)


def test_dump_config_round_trip():
    cfg = RunConfig(budgets=[0.3, 0.01], arch="conv6fc2", seed=4)
    pairs = [tuple(line.split(" = ", 1)) for line in dump_config(cfg).splitlines()]
    assert parse_pairs(pairs) == cfg


def test_exit_codes(tmp_path, cfg_file, capsys):
    assert run("train", "--config", cfg_file, "--out", tmp_path / "a", "--lr=-1") == 1
    assert "lr" in capsys.readouterr().err
    assert run("compress", "--config", cfg_file, "--out", tmp_path / "b",
               "--init=pretrained:" + str(tmp_path / "missing.ckpt")) == 1
    assert run("train", "--config", cfg_file, "--out", tmp_path / "c", "--arch=fc:10-4") == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage" * 4)
    assert run("eval", "--checkpoint", bad) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "synthetic.cfg"
    cfg.write_text(SYNTHETIC)
    assert main(["train", "--config", str(cfg), "--out", str(root / "base")]) == 0
    assert main(["compress", "--config", str(cfg), "--out", str(root / "comp"),
                 f"--init=pretrained:{root / 'base' / 'baseline.ckpt'}"]) == 0
    return root, cfg


def test_train_reaches_high_accuracy(trained):
    root, _ = trained
    ck = load_checkpoint(root / "base" / "baseline.ckpt")
    assert ck.meta["acc"] > 0.95
    assert ck.meta["counted_sparsity"] == 0.0


def test_compress_writes_budget_checkpoints(trained):
    root, _ = trained
    for budget in ("0.5", "0.25"):
        report = cmd_eval(root / "comp" / f"budget_{budget}.ckpt")
        n = sum(r["connections"] for r in report["layers"] if r["prunable"])
        assert abs(report["resource"] - float(budget)) <= 1 / n + 1e-12
        assert report["tag"] == budget


def test_eval_reproduces_logged_accuracy(trained, capsys):
    root, _ = trained
    for name in ("base/baseline.ckpt", "comp/budget_0.25.ckpt", "comp/final.ckpt"):
        path = root / name
        assert cmd_eval(path)["accuracy"] == load_checkpoint(path).meta["acc"]
    assert run("eval", "--checkpoint", root / "comp" / "final.ckpt") == 0
    assert "top-1 accuracy" in capsys.readouterr().out


def test_layer_table_sums_to_global(trained):
    root, _ = trained
    report = cmd_eval(root / "comp" / "budget_0.25.ckpt")
    rows = [r for r in report["layers"] if r["prunable"]]
    total = sum(r["connections"] for r in rows)
    assert sum(r["zeros"] for r in rows) / total == report["counted_sparsity"]


def test_same_seed_same_metrics(trained, tmp_path):
    root, cfg = trained
    assert run("compress", "--config", cfg, "--out", tmp_path / "again",
               f"--init=pretrained:{root / 'base' / 'baseline.ckpt'}") == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (root / "comp" / "metrics.csv").read_bytes()


def test_empty_budgets_behave_as_train(trained, tmp_path):
    root, cfg = trained
    assert run("compress", "--config", cfg, "--out", tmp_path / "plain", "--budgets=",
               "--total_epochs=5") == 0
    got = load_checkpoint(tmp_path / "plain" / "final.ckpt").tensors
    want = load_checkpoint(root / "base" / "baseline.ckpt").tensors
    for k, v in want.items():
        assert np.array_equal(got[k], v)


def test_export_metrics_json(trained, tmp_path):
    root, _ = trained
    dest = tmp_path / "m.json"
    assert run("export-metrics", "--run", root / "comp", "--format", "json", "--dest", dest) == 0
    rows = json.loads(dest.read_text())
    assert rows and set(rows[0]) >= {"epoch", "s", "y", "z", "resource", "counted_sparsity"}
    s = [r["s"] for r in rows]
    assert s[0] < s[-1]


def test_cli_resume_continues_a_cut_run(cfg_file, tmp_path):
    assert run("compress", "--config", cfg_file, "--out", tmp_path / "full") == 0
    assert run("compress", "--config", cfg_file, "--out", tmp_path / "cut", "--total_epochs=6") == 0
    assert run("compress", "--out", tmp_path / "cut", "--resume", "--total_epochs=14") == 0
    assert (tmp_path / "cut" / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()
    assert run("compress", "--config", cfg_file, "--out", tmp_path / "none", "--resume") == 1
