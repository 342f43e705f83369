import re

import pytest

from salguard.cli import main, split_overrides
from salguard.config import KEYS, format_value, load_config
from salguard.errors import ConfigError

SMALL = ["--harness.samples", "8", "--max-new", "10"]


def strip_latency(text):
    return re.sub(r"[0-9.]+\n?$", "", text)


def test_split_overrides():
    assert split_overrides(["--locore.beta", "0", "--sgrs.alpha=0.3"]) == [("locore.beta", "0"), ("sgrs.alpha", "0.3")]
    with pytest.raises(ConfigError):
        split_overrides(["--locore.beta"])
    with pytest.raises(ConfigError):
        split_overrides(["stray"])


def test_config_file_and_overrides(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nsgrs.alpha = 0.3\nharness.alphas = 0, 0.6\n")
    cfg = load_config(f, [("sgrs.alpha", "0.5")])
    assert cfg["sgrs.alpha"] == 0.5 and cfg["harness.alphas"] == (0.0, 0.6)
    assert "sgrs.alpha = 0.5" in cfg.dump()


def test_config_errors_name_key(tmp_path):
    with pytest.raises(ConfigError) as err:
        load_config(None, [("sgrs.alpah", "1")])
    assert err.value.key == "sgrs.alpah"
    with pytest.raises(ConfigError) as err:
        load_config(None, [("sgrs.top_k", "many")])
    assert err.value.key == "sgrs.top_k"


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for key, spec in KEYS.items():
        assert key in text and format_value(spec.default) in text


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["decode", "--out", str(tmp_path), "--sgrs.bogus", "1"]) == 2
    assert "sgrs.bogus" in capsys.readouterr().err


def test_io_error_exit_code(tmp_path):
    assert main(["decode", "--out", str(tmp_path), "--harness.checkpoint", str(tmp_path / "missing.nmdl")]) == 3


def test_verify_exits_zero(tmp_path):
    assert main(["verify", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "verify.txt").read_text().splitlines()
    assert lines[0] == "# seed=0" and all(l.startswith("PASS") for l in lines[1:])


def test_locore_beta_zero_decode_matches_baseline(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["decode", "--out", str(a), "--mode", "baseline", *SMALL]) == 0
    assert main(["decode", "--out", str(b), "--mode", "locore", "--locore.beta", "0", *SMALL]) == 0
    assert (a / "decode_baseline.txt").read_text() == (b / "decode_locore.txt").read_text()


def test_map_one_token(tmp_path):
    assert main(["map", "--out", str(tmp_path), "--tokens", "5", "--layer", "0"]) == 0
    assert (tmp_path / "map_l0_p0.csv").read_text().splitlines()[0] == "i,j,value"
    assert len((tmp_path / "map_l0_p0.csv").read_text().splitlines()) == 2
    assert (tmp_path / "map_l0_p0.svg").exists()


def test_map_bad_layer(tmp_path):
    assert main(["map", "--out", str(tmp_path), "--layer", "99"]) == 2


def test_reruns_are_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        assert main(["decode", "--out", str(d), "--mode", "sgrs+locore", "--seed", "3", *SMALL]) == 0
        assert main(["sweep", "--out", str(d), "--seed", "3", "--harness.samples", "4", "--max-new", "8",
                     "--harness.modes", "baseline,locore", "--harness.betas", "0.15"]) == 0
        outs.append(d)
    for name in ("decode_sgrs_locore.txt", "traces_sgrs_locore.jsonl"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    rows = [(d / "sweep.csv").read_text().splitlines() for d in outs]
    assert rows[0][0] == "# seed=3"
    assert [strip_latency(r) for r in rows[0]] == [strip_latency(r) for r in rows[1]]
