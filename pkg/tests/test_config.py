import json

import pytest

from rotshield.config import ConfigError, RunConfig


def test_defaults_are_valid_and_round_trip():
    cfg = RunConfig()
    assert cfg.alpha == 6.0 and cfg.ber == 3e-4
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="^bogus: unknown"):
        RunConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize("key,value", [
    ("alpha", "six"), ("trials", 2.5), ("requantize", 1), ("dims", "256"), ("m_max", "3"),
    ("alpha", -1.0), ("ber", 1.5), ("trials", 0), ("dims", [256, 4, 32]), ("dims", [256, 32]),
    ("outliers", [[0, 999, 32.0]]), ("outliers", [[0, 7]]), ("outliers", [[0, 7, "x"]]),
    ("policy", "gradient"), ("dtype", "fp8"), ("m_max", -1), ("lossless_tol", 0.0),
    ("alphas", []), ("n_flips", -1), ("fail_rel", 0.0),
])
def test_invalid_values_name_the_field(key, value):
    with pytest.raises(ConfigError, match=f"^{key}:"):
        RunConfig.from_dict({key: value})


def test_int_accepted_for_float_fields():
    assert RunConfig.from_dict({"alpha": 3, "m_max": 4}).defense().cap(1000) == 4


def test_load_and_update(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"trials": 7, "ber": 0.0}))
    cfg = RunConfig.load(path)
    assert cfg.trials == 7 and cfg.ber == 0.0
    assert cfg.updated(trials=None, ber=1e-3).ber == 1e-3
    with pytest.raises(ConfigError, match="^trials:"):
        cfg.updated(trials=-2)
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(path)
    path.write_text("[1]")
    with pytest.raises(ConfigError, match="JSON object"):
        RunConfig.load(path)


def test_derived_objects():
    cfg = RunConfig.from_dict({"alpha": 9.0, "requantize": False, "fail_abs": 50.0})
    d = cfg.defense()
    assert d.alpha == 9.0 and not d.requantize_fused
    assert cfg.failure_rule().threshold(1.0) == 50.0
