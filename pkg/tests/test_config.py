import pytest

from rrgen.config import (
    ConfigError,
    PAPER_PROFILE,
    RunConfig,
    apply_overrides,
    config_hash,
    default_config,
    dump_config,
    get_key,
    known_keys,
    load_config,
    parse_kv_text,
    set_key,
)


def test_desk_profile_defaults():
    config = default_config("desk")
    assert config.profile == "desk"
    assert config.model.d_model == 64
    assert config.model.n_layers == 2
    assert config.model.n_heads == 4


def test_paper_profile_matches_reference_sheet():
    config = default_config("paper")
    for key, expected in PAPER_PROFILE.items():
        assert get_key(config, key) == expected, key


def test_paper_profile_round_trips_through_dump():
    config = default_config("paper")
    dumped = parse_kv_text(dump_config(config))
    for key, expected in PAPER_PROFILE.items():
        got = dumped[key]
        if isinstance(expected, float):
            assert float(got) == pytest.approx(expected), key
        elif isinstance(expected, int):
            assert int(got) == expected, key
        else:
            assert got == str(expected), key


def test_specific_paper_values():
    config = default_config("paper")
    assert config.retriever.train_batch_size == 128
    assert config.retriever.epochs == 50
    assert config.retriever.learning_rate == pytest.approx(4e-5)
    assert config.retriever.warmup_steps == 1000
    assert config.retriever.gradient_checkpoint_segments == 32
    assert config.reranker.passages == 20
    assert config.reranker.accumulation_steps == 32
    assert config.generator.max_input_length == 1024
    assert config.generator.max_output_length == 128
    assert config.generator.beam_size == 3
    assert config.generator.passages4gen == 5
    assert config.generator.max_grad_norm == 1.0
    assert config.generator.preKturns == 2


def test_unknown_keys_are_rejected():
    config = RunConfig()
    with pytest.raises(ConfigError, match="unknown config key"):
        set_key(config, "retriever.nonsense", 1)
    with pytest.raises(ConfigError, match="unknown config key"):
        set_key(config, "nonsense.learning_rate", 1)
    with pytest.raises(ConfigError, match="unknown config key"):
        get_key(config, "bogus")


def test_type_coercion_from_strings():
    config = RunConfig()
    set_key(config, "retriever.learning_rate", "3e-4")
    assert config.retriever.learning_rate == pytest.approx(3e-4)
    set_key(config, "retriever.epochs", "7")
    assert config.retriever.epochs == 7
    set_key(config, "fgm.enabled", "true")
    assert config.fgm.enabled is True
    set_key(config, "fgm.enabled", "0")
    assert config.fgm.enabled is False
    with pytest.raises(ConfigError, match="invalid int"):
        set_key(config, "retriever.epochs", "seven")


def test_parse_kv_text_handles_comments_and_errors():
    parsed = parse_kv_text("a.b = 1\n# comment\n\nc.d = x # trailing\n")
    assert parsed == {"a.b": "1", "c.d": "x"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_kv_text("not a pair")


def test_apply_overrides_profile_first():
    config = default_config("desk")
    config = apply_overrides(config, {"profile": "paper", "retriever.epochs": "3"})
    assert config.retriever.epochs == 3
    assert config.retriever.train_batch_size == 128  # paper profile value


def test_load_config_merges_file_and_flags(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("retriever.epochs = 5\nseed = 11\n", encoding="utf-8")
    config = load_config(path, {"retriever.epochs": "9"})
    assert config.retriever.epochs == 9
    assert config.seed == 11


def test_config_hash_tracks_content():
    a = default_config("desk")
    b = default_config("desk")
    assert config_hash(a) == config_hash(b)
    set_key(b, "retriever.epochs", 1)
    assert config_hash(a) != config_hash(b)


def test_known_keys_cover_sections():
    keys = known_keys()
    assert "retriever.learning_rate" in keys
    assert "generator.passages4gen" in keys
    assert "fgm.epsilon" in keys
    assert "model.d_model" in keys
    assert "seed" in keys


def test_train_step_mapping():
    from rrgen.config import train_step_for

    config = default_config("paper")
    step = train_step_for(config, "generator")
    assert step.learning_rate == pytest.approx(2e-4)
    assert step.max_grad_norm == 1.0
    assert step.accumulation_steps == 1
    assert step.warmup_steps == 1000
    step = train_step_for(config, "retriever")
    assert step.accumulation_steps == 1  # no accumulation key in that section
    assert step.max_grad_norm == 0.0
