import pytest

from bird.config import SEED_ENV, ConfigError, RunConfig


def test_defaults_follow_reference_settings():
    cfg = RunConfig()
    assert (cfg.n_train, cfg.n_infer, cfg.lr, cfg.epochs, cfg.batch_size) == (5, 8, 2e-4, 20, 2)
    assert (cfg.lam, cfg.eta, cfg.groups, cfg.kernel_size, cfg.channels) == (5.0, 1.0, 64, 3, 64)


def test_text_roundtrip(tmp_path):
    cfg = RunConfig(lr=3.3e-4, enable_gtmf=False, seed=9, data="some/dir")
    assert RunConfig.from_text(cfg.to_text()) == cfg
    cfg.save(tmp_path / "config.txt")
    assert RunConfig.load(tmp_path / "config.txt") == cfg


def test_parse_errors_name_line():
    with pytest.raises(ConfigError, match=r"cfg:2: unknown key"):
        RunConfig.from_text("seed=1\nbogus=2\n", "cfg")
    with pytest.raises(ConfigError, match=r"cfg:1: bad value"):
        RunConfig.from_text("enable_bp=maybe\n", "cfg")
    with pytest.raises(ConfigError, match=r"cfg:3: expected key=value"):
        RunConfig.from_text("# comment\n\nseed\n", "cfg")


@pytest.mark.parametrize("bad", [dict(n_train=2), dict(n_infer=0), dict(height=60), dict(lr=0.0), dict(groups=48)])
def test_validation(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad).validate()


def test_stf_flag_zeroes_eta():
    assert RunConfig(enable_stf=False).effective_eta == 0.0
    assert RunConfig().effective_eta == 1.0


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "42")
    assert RunConfig(seed=1).with_env().seed == 42
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigError):
        RunConfig().with_env()
    monkeypatch.delenv(SEED_ENV)
    assert RunConfig(seed=1).with_env().seed == 1


def test_model_config_carries_flags():
    mc = RunConfig(enable_ltmf=False, channels=32, groups=16).model_config()
    assert not mc.enable_ltmf and mc.channels == 32 and mc.groups == 16
