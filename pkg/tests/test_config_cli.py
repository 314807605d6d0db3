import json

import pytest

from dreamda.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from dreamda.config import ConfigError, RunConfig, from_dict, load_config, parse_override


def test_defaults_validate_and_hash_is_stable():
    a, b = RunConfig().validate(), RunConfig().validate()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    assert a.amst.lam == 0.001 and a.amst.tau == 0.01 and a.perturb.sigma_h == 3.0
    assert a.to_dict()["amst"]["lambda"] == 0.001


def test_precedence_cli_over_file_over_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"perturb": {"sigma_h": 1.0, "n_variants": 4}, "amst": {"lambda": 0.01}}))
    cfg = load_config(path, ["perturb.sigma_h=5"])
    assert cfg.perturb.sigma_h == 5.0 and cfg.perturb.n_variants == 4
    assert cfg.amst.lam == 0.01 and cfg.amst.tau == 0.01


def test_overrides_parse_json_values():
    cfg = load_config(None, ["eval.seeds=[4, 5]", "amst.augment_labeled=true", "diffusion.optimizer=sgd"])
    assert cfg.eval.seeds == [4, 5] and cfg.amst.augment_labeled is True and cfg.diffusion.optimizer == "sgd"
    assert load_config(None, ["perturb.sigma_h=0"]).hash() != RunConfig().hash()


@pytest.mark.parametrize("override, key", [
    ("perturb.nope=1", "perturb.nope"),
    ("bogus.x=1", "bogus"),
    ("perturb.sigma_h=-1", "perturb.sigma_h"),
    ("perturb.site=mid", "perturb.site"),
    ("amst.K=1", "amst.K"),
    ("amst.K=abc", "amst.K"),
    ("diffusion.epochs=1.5", "diffusion.epochs"),
    ("amst.augment_labeled=1", "amst.augment_labeled"),
])
def test_invalid_values_name_the_key(override, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        load_config(None, [override])


def test_malformed_overrides_and_documents(tmp_path):
    for bad in ("sigma_h=3", "perturb.sigma_h", "a.b.c=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)
    with pytest.raises(ConfigError):
        from_dict({"perturb": 3})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["generate", "--set", "perturb.bogus=1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "perturb.bogus" in capsys.readouterr().err
    assert main(["generate", "--out", str(tmp_path)]) == EXIT_DATA
    assert "missing" in capsys.readouterr().err
    assert not any(tmp_path.rglob("*.ddt"))
    assert main(["evaluate", "--workers", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_cli_print_config(capsys):
    assert main(["make-data", "--print-config", "--set", "perturb.sigma_h=1"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["perturb"]["sigma_h"] == 1.0


def test_cli_rejects_unknown_command():
    with pytest.raises(SystemExit):
        main(["train-everything"])
