import pytest

from posr.config import RunConfig, config_text, flatten, load_config, parse_config, write_config
from posr.errors import ConfigError
from posr.optim import CosineSchedule


def test_defaults():
    cfg = RunConfig()
    assert (cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma_reg) == (0.1, 0.001, 0.001)
    assert (cfg.train.lr, cfg.train.lr_min, cfg.train.epochs, cfg.train.batch_size) == (0.005, 0.0, 100, 32)
    assert cfg.loso.eval_session == 3 and cfg.loso.train_fraction == 0.8
    assert cfg.synth.n_subjects == 6 and cfg.synth.n_channels == 8 and cfg.synth.n_samples == 200


def test_echo_lists_every_key_and_round_trips(tmp_path):
    cfg = RunConfig().replace(**{"loss.clf_kind": "ARPL", "loss.ossr_kind": "ARPL", "loso.pool": (1, 4, 5), "synth.class_freq_hz": (9.5, 21.0)})
    text = config_text(cfg)
    for key in flatten(cfg):
        assert f"\n{key} = " in text
    write_config(cfg, tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg
    assert config_text(parse_config(text)) == text


def test_parse_partial_and_comments():
    cfg = parse_config("# comment\nloss.alpha = 0.0  # baseline\n\ntrain.epochs=5\n")
    assert cfg.loss.alpha == 0.0 and cfg.train.epochs == 5 and cfg.loss.beta == 0.001


@pytest.mark.parametrize(
    "text",
    ["loss.nope = 1", "train.epochs = five", "just words", "loss.clf_kind = SVM", "synth.n_sessions = 1", "train.lr = -1"],
)
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_schedule_defaults_from_echo():
    cfg = parse_config(config_text(RunConfig()))
    s = CosineSchedule(cfg.train.epochs, cfg.train.lr, cfg.train.lr_min)
    assert s(0) == 0.005 and s(cfg.train.epochs) == pytest.approx(0.0, abs=1e-18)


def test_heads_from_arch():
    cfg = RunConfig()
    assert cfg.arch.style_head(5, cfg.loss) is None
    sem = cfg.arch.semantic_head(2, cfg.loss)
    assert sem.head_kind == "plain_logits" and sem.embed_dim == 2
    g = RunConfig().replace(**{"loss.clf_kind": "GCPL", "loss.ossr_kind": "RPL"})
    assert g.arch.style_head(5, g.loss).point_role == "reciprocal_point"
