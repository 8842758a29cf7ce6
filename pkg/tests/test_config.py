import dataclasses

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpool.config import (
    ConfigError,
    ExperimentConfig,
    coerce,
    format_config,
    load_config,
    parse_config,
    save_config,
)


def test_defaults_follow_the_published_settings():
    cfg = ExperimentConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.iterations, cfg.init_strength) == (32, 1e-4, 10, 0.1)
    assert cfg.eval_every == 100 and cfg.eval_size == 1000


def test_parse_skips_comments_and_blank_lines():
    cfg = parse_config("# a run\n\ntask = mnist\n  pooling=max  \nlearning_rate=3e-4\n")
    assert (cfg.task, cfg.pooling, cfg.learning_rate) == ("mnist", "max", 3e-4)
    assert cfg.batch_size == 32


@pytest.mark.parametrize("text,field", [
    ("colour=red", "colour"),
    ("steps=ten", "steps"),
    ("pooling=median", "pooling"),
    ("batch_size=0", "batch_size"),
    ("learning_rate=-1", "learning_rate"),
    ("limit_sq=1", "limit_sq"),
    ("head_scaling=whiten", "head_scaling"),
    ("steps=-3", "steps"),
    ("just words", "line 1"),
])
def test_bad_entries_name_their_field(text, field):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.field == field
    assert str(err.value).startswith(field)


def test_file_round_trip(tmp_path):
    cfg = ExperimentConfig(task="distance", pooling="continuous_sum", init_strength=0.1 + 0.2,
                           seed=9, output_dir="runs/x y")
    save_config(tmp_path / "c.txt", cfg)
    assert load_config(tmp_path / "c.txt") == cfg


configs = st.builds(
    ExperimentConfig,
    task=st.sampled_from(["distance", "distance_limited", "mnist"]),
    pooling=st.sampled_from(["max", "avg", "continuous_sum", "continuous_max"]),
    iterations=st.integers(1, 50),
    init_strength=st.floats(1e-6, 2, allow_nan=False),
    steps=st.integers(0, 10**6),
    seed=st.integers(0, 2**32),
    learning_rate=st.floats(1e-9, 1, allow_nan=False),
    limit_sq=st.floats(1.5, 2000, allow_nan=False),
    output_dir=st.text("abc/_-.", min_size=1, max_size=12),
)


@given(configs)
def test_text_round_trip_is_lossless(cfg):
    assert parse_config(format_config(cfg)) == cfg


def test_every_field_is_written():
    keys = [line.split("=")[0] for line in format_config(ExperimentConfig()).splitlines()]
    assert keys == [f.name for f in dataclasses.fields(ExperimentConfig)]


def test_coerce():
    assert coerce("steps", " 12 ") == 12
    assert coerce("init_strength", "0.25") == 0.25
    with pytest.raises(ConfigError):
        coerce("nope", "1")
