import dataclasses

import pytest
import yaml

from iap.config import RunConfig, dump_config, from_dict, load_config, replace, to_dict
from iap.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert (cfg.gate.mode, cfg.gate.temperature, cfg.gate.noise_clamp) == ("hard", 3.0, 1e-6)
    assert (cfg.routing.lower, cfg.routing.upper, cfg.routing.top_k) == (0.2, 0.8, 5)
    assert (cfg.routing.task_reg, cfg.routing.class_reg) == (1e-7, 1e-3)
    assert (cfg.prompt.length, cfg.prompt.text_layers) == (8, 8)
    assert (cfg.optim.epochs, cfg.optim.batch_size, cfg.optim.eval_batch_size) == (10, 32, 64)
    assert (cfg.stream.num_domains, cfg.stream.classes_per_domain) == (4, 8)
    assert (cfg.stream.train_per_class, cfg.stream.test_per_class) == (64, 32)


def test_yaml_round_trip(tmp_path):
    cfg = replace(RunConfig(), **{"gate.mode": "soft", "stream.few_shot": 16, "seed": 7})
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert to_dict(from_dict(to_dict(cfg))) == to_dict(cfg)


def test_partial_file_uses_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("optim:\n  epochs: 2\n")
    cfg = load_config(path)
    assert cfg.optim.epochs == 2 and cfg.optim.batch_size == 32 and cfg.gate == RunConfig().gate


def test_empty_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("")
    assert load_config(path) == RunConfig()


@pytest.mark.parametrize("data, where", [
    ({"gate": {"colour": 1}}, "gate: unknown key"),
    ({"bogus": 1}, "config: unknown key"),
    ({"optim": {"epochs": "ten"}}, "optim.epochs: expected an integer"),
    ({"optim": {"epochs": True}}, "optim.epochs: expected an integer"),
    ({"routing": {"use_cddp": "yes"}}, "routing.use_cddp: expected a boolean"),
    ({"routing": {"lower": 0.9}}, "routing"),
    ({"stream": {"order": "order-3"}}, "stream"),
    ({"stream": {"few_shot": 0}}, "stream"),
    ({"gate": "hard"}, "gate: expected a mapping"),
])
def test_rejections_name_the_field(data, where):
    with pytest.raises(ConfigError, match=where):
        from_dict(data)


def test_int_accepted_for_float():
    assert from_dict({"optim": {"lr": 3}}).optim.lr == 3.0


def test_replace_unknown_field():
    with pytest.raises(ConfigError):
        replace(RunConfig(), **{"gate.colour": 1})


def test_invalid_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("gate: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(path)


def test_every_field_documented_in_dump():
    text = dump_config(RunConfig())
    data = yaml.safe_load(text)
    for f in dataclasses.fields(RunConfig):
        assert f.name in data
