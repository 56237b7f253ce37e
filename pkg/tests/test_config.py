import pytest
from hypothesis import given
from hypothesis import strategies as st

from byol import config as C
from byol.grid import WHITELIST


def test_text_round_trip_is_idempotent():
    cfg = C.preset_config("desk")
    C.apply_overrides(cfg, {"loss.beta": 0.5, "loss.family": "infonce", "arch.encoder_hidden": [32, 16]})
    text = C.to_text(cfg)
    back = C.from_text(text)
    assert back == cfg
    assert C.to_text(back) == text


@given(beta=st.floats(0, 1), lam=st.floats(0, 50), steps=st.integers(1, 10_000))
def test_round_trip_numbers_exactly(beta, lam, steps):
    cfg = C.apply_overrides(C.preset_config(), {"loss.beta": beta, "optim.predictor_lr_mult": lam,
                                                "optim.total_steps": steps})
    assert C.from_text(C.to_text(cfg)) == cfg


def test_unknown_key_lists_valid_keys():
    with pytest.raises(C.ConfigError, match="loss.beta"):
        C.apply_overrides(C.RunConfig(), ["loss.bta=1"])
    with pytest.raises(C.ConfigError):
        C.apply_overrides(C.RunConfig(), ["loss=1"])


@pytest.mark.parametrize("kv", ["loss.beta=2", "loss.target_mode=\"phi\"", "optim.tau_schedule=\"step\"",
                                "train.accumulation=0", "aug1.flip_prob=1.5", "optim.batch_size=1",
                                "loss.use_predictor=3"])
def test_invalid_values_rejected(kv):
    with pytest.raises(C.ConfigError):
        C.apply_overrides(C.RunConfig(), [kv])


def test_presets_and_unknown_preset():
    assert C.preset_config("full").optim.tau_base == 0.996
    assert C.preset_config("small-batch").optim.tau_base == 0.9995
    with pytest.raises(C.ConfigError):
        C.preset_config("huge")


def test_every_ablation_axis_is_a_config_key():
    keys = set(C.valid_keys())
    assert set(WHITELIST) <= keys


def test_sync_propagates_image_size():
    cfg = C.apply_overrides(C.RunConfig(), {"dataset.image_size": 24})
    assert cfg.arch.input_shape == (3, 24, 24) and cfg.aug2.target_size == (24, 24)


def test_comments_and_blank_lines(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# note\n\npreset = \"full\"\nseed = 3\n")
    cfg = C.load(p)
    assert cfg.seed == 3 and cfg.optim.base_lr == 0.2
    C.save(cfg, p)
    assert C.load(p) == cfg
