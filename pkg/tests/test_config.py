import json

import pytest

from dtnforward.config import ConfigError, load_config, parse_config
from dtnforward.mcsim import InitialAssignment, TruncatedPowerLaw
from dtnforward.model import power_penalties
from dtnforward.policy import Threshold
from tests.conftest import SMALL_CONFIG


def doc(**sections):
    payload = json.loads(json.dumps(SMALL_CONFIG))
    payload.update(sections)
    return payload


def test_parse_small_config():
    cfg = parse_config(doc())
    assert cfg.model.B == 2
    assert cfg.model.penalties == power_penalties(2, 2)
    assert list(cfg.init.S) == [0, 0, 0.9]
    assert cfg.policy is None
    assert cfg.search.resolution == 11
    assert cfg.montecarlo.N == 40
    # The ensemble is seeded from the root seed
    assert cfg.montecarlo.seed == 3
    assert cfg.seed == 3


def test_parse_policy_and_contact():
    cfg = parse_config(
        doc(
            policy={"kind": "threshold", "times": [1, 2]},
            montecarlo={
                "N": 20,
                "assignment": "multinomial",
                "contact": {"kind": "power-law", "alpha": 0.5},
            },
            stopping={"exponent": 3},
        )
    )
    assert cfg.policy == Threshold((1, 2))
    assert cfg.montecarlo.assignment is InitialAssignment.MULTINOMIAL
    assert cfg.montecarlo.contact == TruncatedPowerLaw(alpha=0.5)
    assert cfg.stopping.exponent == 3


def test_explicit_penalty_list():
    model = dict(SMALL_CONFIG["model"], penalties=[5, 2, 0])
    cfg = parse_config(doc(model=model))
    assert cfg.model.penalties == (5, 2, 0)


@pytest.mark.parametrize(
    "sections, message",
    [
        (dict(schema_version=2), "schema_version"),
        (dict(colour="red"), "Unknown key config.colour"),
        (dict(search={"resolution": 11, "speed": 2}), "Unknown key search.speed"),
        (dict(montecarlo={"seed": 1}), "montecarlo.seed"),
        (dict(montecarlo={"contact": {"kind": "bursty"}}), "contact.kind"),
        (dict(montecarlo={"assignment": "random"}), "montecarlo.assignment"),
        (dict(init={"S": [0, 0, 0.95], "I": [0, 0, 0.1]}), "init"),
        (dict(policy={"kind": "threshold", "times": [1, 2, 3]}), "policy"),
        (dict(init={"S": [0, 0.9], "I": [0, 0.1]}), "init"),
        (dict(policy={"kind": "flooding"}), "policy"),
        (dict(seed=-1), "seed"),
        (dict(search={"resolution": 1}), "search"),
        (dict(experiment={"variable": "noise"}), "experiment"),
    ],
)
def test_bad_configs(sections, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(doc(**sections))


def test_bad_model_values():
    model = dict(SMALL_CONFIG["model"], r=3)
    with pytest.raises(ConfigError, match="model"):
        parse_config(doc(model=model))
    model = dict(SMALL_CONFIG["model"], penalties={"form": "cubic"})
    with pytest.raises(ConfigError, match="form"):
        parse_config(doc(model=model))


def test_missing_sections():
    payload = doc()
    del payload["init"]
    with pytest.raises(ConfigError, match="model and init"):
        parse_config(payload)


def test_overrides():
    cfg = parse_config(doc()).with_overrides(seed=9, threads=2)
    assert cfg.seed == 9
    assert cfg.montecarlo.seed == 9
    assert cfg.search.threads == 2
    assert cfg.montecarlo.threads == 2
    plain = parse_config(doc())
    assert plain.with_overrides() is plain


def test_load_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc()))
    assert load_config(path).model.horizon == 5.0
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="Cannot read"):
        load_config(path)
    with pytest.raises(ConfigError, match="Cannot read"):
        load_config(tmp_path / "missing.json")
