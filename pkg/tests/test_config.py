import pytest

from melt.config import ConfigError, ModelConfig, RunConfig, dump_config, parse_config_text


def test_round_trip():
    cfg = RunConfig(task="modular_add", teacher_steps=7)
    assert parse_config_text(dump_config(cfg)) == cfg


def test_comments_and_types():
    cfg = parse_config_text("# hi\nloops = 5  # T\nbeta=0.5\nalign_token_mean = false\n")
    assert cfg.model.loops == 5 and cfg.schedule.beta == 0.5 and cfg.schedule.align_token_mean is False


@pytest.mark.parametrize("text,key", [
    ("lopos = 3", "lopos"),
    ("loops = three", "loops"),
    ("chunk_size = 0", "chunk_size"),
    ("task = sort", "task"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config_text(text)


def test_missing_equals():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("loops 3")


def test_model_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(hidden_dim=30, n_heads=4)
    with pytest.raises(ConfigError, match="even"):
        ModelConfig(hidden_dim=12, n_heads=4)
    assert ModelConfig().head_dim == 16
