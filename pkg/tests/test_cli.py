import json
import os

import pytest

from calderon_lab import cli
from calderon_lab.cli import ConfigError, main, parse_config, serialize_config
from calderon_lab.report import file_hash

SMALL = {
    "kind": "forward",
    "seed": 0,
    "domain": {"center": [0.0, 0.0], "radius_samples": [0.5], "x1_interval": [-0.5, 0.5], "grid_resolution": [8, 8, 16]},
    "params": {"q": 0.0, "g": "x1"},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return str(p)


def test_parse_and_serialize_round_trip():
    cfg = parse_config(json.dumps(SMALL))
    again = parse_config(serialize_config(cfg))
    assert again.to_dict() == cfg.to_dict()
    assert again.hash() == cfg.hash()


def test_unknown_key_names_key_and_line():
    text = json.dumps(dict(SMALL, taus=[1, 2]), indent=2)
    with pytest.raises(ConfigError, match=r"'taus'.*line \d+"):
        parse_config(text)


@pytest.mark.parametrize("bad", [{"seed": None}, {"seed": -1}, {"seed": 1.5}, {"kind": "nonsense"}])
def test_invalid_values(bad):
    cfg = dict(SMALL, **bad)
    if bad.get("seed", 0) is None:
        del cfg["seed"]
    with pytest.raises(ConfigError):
        parse_config(json.dumps(cfg))


def test_malformed_json():
    with pytest.raises(ConfigError, match="line"):
        parse_config('{"kind": "forward",\n "seed": }')


def test_forward_run_is_deterministic(tmp_path, capsys):
    path = _write(tmp_path, SMALL)
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["forward", "--config", path, "--out", out, "--formats", "csv,json"]) == 0
        outs.append(out)
    csvs = sorted(f for f in os.listdir(outs[0]) if f.endswith(".csv"))
    assert csvs
    for f in csvs + ["report.json", "config.json"]:
        assert file_hash(os.path.join(outs[0], f)) == file_hash(os.path.join(outs[1], f))
    man = json.load(open(os.path.join(outs[0], "manifest.json")))
    assert man["seed"] == 0 and man["kind"] == "forward"
    for f, h in man["files"].items():
        assert file_hash(os.path.join(outs[0], f)) == h
    assert abs(man["scalars"]["max_abs_neumann_lateral"]) < 1e-8


def test_exit_code_2_for_validation_errors(tmp_path, capsys):
    bad = _write(tmp_path, dict(SMALL, taus=[1]), "bad.json")
    assert main(["forward", "--config", bad, "--out", str(tmp_path / "o")]) == 2
    assert "taus" in capsys.readouterr().err
    good = _write(tmp_path, SMALL)
    assert main(["cgo", "--config", good, "--out", str(tmp_path / "o")]) == 2
    assert main(["forward", "--config", good, "--out", str(tmp_path / "o"), "--formats", "pdf"]) == 2
    assert main(["forward", "--config", str(tmp_path / "missing.json")]) == 2


def test_exit_code_3_for_numerical_failures(tmp_path, monkeypatch, capsys):
    def broken(cfg, params):
        with cli._Stage("solve"):
            raise FloatingPointError("diverged")

    monkeypatch.setitem(cli.RUNNERS, "forward", broken)
    good = _write(tmp_path, SMALL)
    assert main(["forward", "--config", good, "--out", str(tmp_path / "o")]) == 3
    assert "numerical failure" in capsys.readouterr().err
