import json
import subprocess
import sys

import pytest

from twistlab.cli import RunConfig, main, run
from twistlab.config import Settings, format_config, parse_config
from twistlab.data import Dataset, save_csv
from twistlab.errors import ConfigError, InvalidInputError

FAST = """
# tiny run for tests
epochs = 2
mixture_n = 256
backbone_widths = 16, 16
head_widths = 16, 16
selflabel_epochs = 1
probe_epochs = 50
"""


def test_empty_config_is_default():
    s = parse_config("")
    assert s == Settings()
    assert (s.alpha, s.beta) == (1.0, 1.0)
    assert s.global_scale == (0.4, 1.0)
    cfg = s.train_config()
    assert (cfg.coefficients.alpha, cfg.coefficients.beta) == (1.0, 1.0)


def test_alpha_override():
    c = parse_config("alpha = 0.4\n").train_config().coefficients
    assert (c.alpha, c.beta) == (0.4, 1.0)


def test_unknown_key():
    with pytest.raises(ConfigError, match="alphaa"):
        parse_config("alphaa = 1")


def test_type_mismatch_names_line():
    with pytest.raises(ConfigError) as info:
        parse_config("# header\n\nepochs = ten\n")
    assert info.value.line == 3
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("nbs = maybe")


def test_malformed_and_duplicate_lines():
    with pytest.raises(ConfigError):
        parse_config("epochs 3")
    with pytest.raises(ConfigError):
        parse_config("epochs = 3\nepochs = 4")


def test_comments_and_tuples():
    s = parse_config("local_scale = 0.1, 0.3  # narrower\nlr = auto\nflip = false")
    assert s.local_scale == (0.1, 0.3) and s.lr is None and s.flip is False


def test_resolved_config_round_trip():
    s = parse_config("alpha = 0.25\nlr = 0.1\nn_local = 3", profile="full")
    assert parse_config(format_config(s), profile="desk") == s


def test_full_profile():
    s = parse_config("", profile="full")
    assert s.head_widths == (4096, 4096) and s.optimizer == "lars" and s.n_local == 10
    with pytest.raises(ConfigError):
        parse_config("", profile="laptop")


def test_self_label_epochs_default_quarter():
    assert parse_config("epochs = 10").self_label_config().epochs == 3


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(FAST)
    return p


def test_cli_full_cycle(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    records = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1]
    assert (out / "resolved-config").read_text() == format_config(parse_config(FAST))
    ck = str(out / "checkpoint.twst")
    assert main(["eval", "--config", str(cfg_path), "--out", str(out), "--checkpoint", ck]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert set(report) == {"nmi", "ami", "ari", "acc", "effective_class_count"}
    assert "linear_probe_accuracy" in json.loads((out / "probe.json").read_text())
    assert main(["selflabel", "--config", str(cfg_path), "--out", str(out), "--checkpoint", ck]) == 0
    assert (out / "selflabel.twst").is_file()
    assert main(["diagnose", "--config", str(cfg_path), "--out", str(out), "--checkpoint", ck]) == 0
    assert "effective_class_count" in json.loads((out / "collapse.json").read_text())
    header = (out / "std_profile.csv").read_text().splitlines()[0]
    assert header == "axis,index,std"
    assert len((out / "std_curves.csv").read_text().splitlines()) == 3


def test_cli_same_seed_same_checkpoint(cfg_path, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / name), "--seed", "5"]) == 0
    for f in ("checkpoint.twst", "metrics.jsonl", "resolved-config"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_cli_rerun_from_resolved_config(cfg_path, tmp_path):
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "a"), "--seed", "3"]) == 0
    resolved = str(tmp_path / "a" / "resolved-config")
    assert main(["train", "--config", resolved, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "checkpoint.twst").read_bytes() == (tmp_path / "b" / "checkpoint.twst").read_bytes()


def test_cli_missing_checkpoint(cfg_path, tmp_path, capsys):
    assert main(["eval", "--config", str(cfg_path), "--out", str(tmp_path)]) == 1
    assert "requires --checkpoint" in capsys.readouterr().err
    code = main(["selflabel", "--config", str(cfg_path), "--out", str(tmp_path),
                 "--checkpoint", str(tmp_path / "nope.twst")])
    assert code == 1


def test_cli_eval_requires_labels(tmp_path, capsys):
    import numpy as np

    save_csv(Dataset(np.random.default_rng(0).standard_normal((64, 4))), tmp_path / "d.csv")
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"data_source = csv\ndata_path = {tmp_path / 'd.csv'}\nepochs = 1\nbatch_size = 32\n"
                   "backbone_widths = 8\nhead_widths = 8, 8\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    code = main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--checkpoint", str(tmp_path / "o" / "checkpoint.twst")])
    assert code == 1
    assert "labels are required" in capsys.readouterr().err


def test_cli_bad_config_exit_status(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("alphaa = 1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "alphaa" in capsys.readouterr().err


def test_run_config_validation():
    with pytest.raises(InvalidInputError):
        RunConfig("fly")
    with pytest.raises(InvalidInputError):
        RunConfig("train", profile="laptop")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "twistlab", "eval", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "requires --checkpoint" in proc.stderr


def test_run_returns_zero(cfg_path, tmp_path):
    assert run(RunConfig("train", str(cfg_path), str(tmp_path))) == 0
