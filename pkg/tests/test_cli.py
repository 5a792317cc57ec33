import json

import numpy as np
import pytest

from afd import checkpoint
from afd.cli import load_data, main, sweep_cells
from afd.config import load_config
from afd.diagnostics import MetricsRecord, accuracy, read_feature_dump

TINY = [
    "data.num_classes=3", "data.samples_per_class=20", "data.input_shape=3,6,6", "data.test_size=15",
    "data.separation=0.1", "model.feature_dim=8", "model.channels=4,4",
    "pretrain.epochs=2", "pretrain.milestones=1", "pretrain.batch_size=16", "pretrain.lr=0.05",
    "finetune.epochs=1", "finetune.batch_size=16", "attack.iterations=2", "eval.iterations=2",
]


def run(cmd, out, *extra, seed=None):
    argv = [cmd, "--out", str(out)]
    for s in TINY + list(extra):
        argv += ["--set", s]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return main(argv)


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert run("pretrain", out) == 0
    return out / "pretrained.afdc"


@pytest.fixture(scope="module")
def finetuned(tmp_path_factory, pretrained):
    out = tmp_path_factory.mktemp("ft")
    assert run("finetune", out, f"run.pretrained={pretrained}") == 0
    return out


def test_missing_cifar_path_exits_2(tmp_path, capsys):
    assert run("pretrain", tmp_path, "data.source=cifar10") == 2
    assert "data.train" in capsys.readouterr().err
    assert list(tmp_path.iterdir()) == []


def test_unknown_key_exits_2(tmp_path, capsys):
    assert run("pretrain", tmp_path, "pretrain.epochz=3") == 2
    assert "epochz" in capsys.readouterr().err


def test_print_config(capsys):
    assert main(["finetune", "--print-config", "--set", "finetune.gamma=30"]) == 0
    assert "finetune.gamma = 30.0" in capsys.readouterr().out


def test_pretrain_outputs_and_rerun_identical(pretrained, tmp_path):
    files = sorted(p.name for p in pretrained.parent.iterdir())
    assert files == ["pretrain.jsonl", "pretrained.afdc"]
    assert len((pretrained.parent / "pretrain.jsonl").read_text().splitlines()) == 2  # one line per epoch
    assert run("pretrain", tmp_path) == 0
    assert (tmp_path / "pretrained.afdc").read_bytes() == pretrained.read_bytes()
    assert run("pretrain", tmp_path / "s1", seed=1) == 0
    assert (tmp_path / "s1" / "pretrained.afdc").read_bytes() != pretrained.read_bytes()


def test_finetune_outputs(finetuned):
    names = {p.name for p in finetuned.iterdir()}
    assert names == {"live.afdc", "ema.afdc", "merged.afdc", "finetune.jsonl"}
    ema, meta = checkpoint.load(finetuned / "ema.afdc")
    merged, mmeta = checkpoint.load(finetuned / "merged.afdc")
    assert meta["kind"] == "ema" and mmeta["kind"] == "merged" and meta["mode"] == "afd"
    _, test = load_data(load_config(None, TINY))
    assert accuracy(merged, test) == accuracy(ema, test, "through_D1")
    rec = json.loads((finetuned / "finetune.jsonl").read_text().splitlines()[-1])
    assert rec["metrics"]["robust_acc"] <= 1.0


def test_evaluate_eps_zero(finetuned, tmp_path):
    ck = finetuned / "ema.afdc"
    assert run("evaluate", tmp_path, f"run.checkpoint={ck}", "eval.epsilon=0") == 0
    res = json.loads((tmp_path / "metrics.json").read_text())
    m = res["metrics"]
    assert set(m) == set(MetricsRecord(0, 0).to_dict())
    assert m["robust_acc"] == m["clean_acc"]
    assert set(m["feature_gap"].values()) == {0.0}


def test_dump_features(finetuned, tmp_path):
    ck = finetuned / "merged.afdc"
    assert run("dump-features", tmp_path, f"run.checkpoint={ck}", "run.samples=10") == 0
    raw = (tmp_path / "features.afdf").read_bytes()
    assert raw[:4] == b"AFDF"
    d = read_feature_dump(tmp_path / "features.afdf")
    assert len(d["labels"]) == 10 and d["natural"].shape == (10, 8)


def test_missing_and_corrupt_checkpoint(tmp_path, capsys):
    assert run("evaluate", tmp_path, f"run.checkpoint={tmp_path / 'nope.afdc'}") == 2
    assert "run.checkpoint" in capsys.readouterr().err
    bad = tmp_path / "bad.afdc"
    bad.write_bytes(b"AFDC\x01\x00\x00\x00garbage")
    assert run("evaluate", tmp_path, f"run.checkpoint={bad}") == 3


def test_architecture_mismatch_exits_2(pretrained, tmp_path):
    assert run("finetune", tmp_path, f"run.pretrained={pretrained}", "model.feature_dim=12") == 2


def test_finetune_rejects_finetuned_checkpoint(finetuned, tmp_path):
    assert run("finetune", tmp_path, f"run.pretrained={finetuned / 'live.afdc'}") == 2


def test_sweep_cells_default_grid():
    cells = sweep_cells(load_config(None, []))
    assert len(cells) == 8 and len(set(cells)) == 8
    assert (0.05, 0.25, 25.0) in cells
    gammas = sorted(c[2] for c in cells if c[:2] == (0.05, 0.25))
    assert gammas == [10.0, 25.0, 30.0, 35.0]


def test_sweep_writes_one_row_per_cell(pretrained, tmp_path):
    extra = [f"run.pretrained={pretrained}", "sweep.alpha=0.05", "sweep.beta=0.25", "sweep.gamma=25,30"]
    assert run("sweep", tmp_path, *extra) == 0
    rows = (tmp_path / "sweep.jsonl").read_text().splitlines()
    assert len(rows) == 2
    assert sorted(json.loads(r)["gamma"] for r in rows) == [25.0, 30.0]
    assert len(list(tmp_path.glob("sweep-*merged.afdc"))) == 2


def test_synthetic_split_sizes():
    train, test = load_data(load_config(None, TINY))
    assert len(train) == 45 and len(test) == 15
    assert not np.shares_memory(train.images, test.images)
