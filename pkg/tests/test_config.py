import pytest

from afd.config import RunConfig, load_config, parse_text
from afd.errors import ConfigError


def test_defaults_match_training_configs():
    cfg = RunConfig()
    ft = cfg.finetune_config()
    assert (ft.alpha, ft.beta, ft.gamma, ft.lr) == (0.05, 0.25, 25.0, 0.0025)
    assert cfg.eval_attack().iterations == 20 and cfg.eval_attack().step_size == 0.003
    assert cfg.pretrain_config().milestones == (75, 90)


def test_parse_types_and_comments():
    cfg = parse_text("""
        # a comment
        finetune.mode = vaft   # trailing
        finetune.ema_covers_d2 = false
        attack.epsilon = 8/255
        pretrain.milestones = 3, 5
        model.channels = 4,6
        finetune.lr_schedule = 0:0.01, 5:0.001
    """)
    assert cfg.get("finetune.mode") == "vaft"
    assert cfg.get("finetune.ema_covers_d2") is False
    assert cfg.get("attack.epsilon") == pytest.approx(8 / 255)
    assert cfg.get("pretrain.milestones") == (3, 5)
    assert cfg.get("model.channels") == (4, 6)
    assert cfg.finetune_config().lr_schedule == ((0, 0.01), (5, 0.001))


def test_unknown_key_and_bad_value():
    with pytest.raises(ConfigError, match="finetune.alpah"):
        parse_text("finetune.alpah = 1")
    with pytest.raises(ConfigError, match="pretrain.epochs"):
        parse_text("pretrain.epochs = many")
    with pytest.raises(ConfigError, match="line|:1:"):
        parse_text("no equals sign here")


def test_override_order(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("finetune.alpha = 0.1\nfinetune.seed = 4\n")
    cfg = load_config(p, ["finetune.alpha=0.2"], seed=9)
    assert cfg.get("finetune.alpha") == 0.2
    assert cfg.get("finetune.seed") == 9 and cfg.get("pretrain.seed") == 9


def test_dumps_round_trip():
    cfg = load_config(None, ["finetune.lr_schedule=0:0.1,3:0.01", "data.train=a.bin,b.bin", "finetune.mode=vaft"])
    again = parse_text(cfg.dumps())
    assert again.to_dict() == cfg.to_dict()


def test_require_names_missing_key(tmp_path):
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="data.train"):
        cfg.require("data.train")
    cfg.set("run.checkpoint", str(tmp_path / "nope.afdc"))
    with pytest.raises(ConfigError, match="run.checkpoint"):
        cfg.require("run.checkpoint")


def test_invalid_mode_surfaces_as_config_error():
    with pytest.raises(ConfigError):
        load_config(None, ["finetune.mode=bogus"]).finetune_config()
