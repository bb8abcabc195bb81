import csv
import json

import pytest

from sigalloc.cli import main
from sigalloc.config import RunConfig
from sigalloc.errors import InvalidConfig

SMALL = """\
# tiny run for tests
data = panel.csv
split = fraction
lookback = 3
horizon = 2
slice_len = 4
m_slice = 2
d_model = 8
d_ff = 8
hidden_c = 8
max_epochs = 2
cvar_alpha = 0.5
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "--assets", "3", "--length", "400", "--pairs", "0:1", "--lag", "4",
                 "--seed", "2", "--output", "panel.csv"]) == 0
    (tmp_path / "run.cfg").write_text(SMALL)
    return tmp_path


def test_sig_pair_positive_on_planted_pair(workdir, capsys):
    assert main(["sig", "panel.csv", "--pair", "A0,A1", "--out", "sig"]) == 0
    out = capsys.readouterr().out
    area = float(out.split("=")[1].split()[0])
    assert area > 0 and "A0 leads A1" in out
    saved = json.loads((workdir / "sig" / "signature.json").read_text())
    assert saved["signed_area"] == pytest.approx(area, rel=1e-9) and len(saved["coords"]) == 6


def test_sig_matrix(workdir):
    assert main(["sig", "panel.csv", "--out", "sig"]) == 0
    with open(workdir / "sig" / "signed_area.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["asset", "A0", "A1", "A2"] and float(rows[1][2]) > 0


def test_train_is_deterministic(workdir):
    for out in ("a", "b"):
        assert main(["train", "--config", "run.cfg", "--seed", "7", "--out", out]) == 0
    assert (workdir / "a" / "model.ckpt").read_bytes() == (workdir / "b" / "model.ckpt").read_bytes()
    log = (workdir / "a" / "train.log").read_text().splitlines()
    assert log[0].split("\t") == ["epoch", "train_objective", "val_objective", "gamma", "wall_time"]
    assert len(log) == 3
    resolved = RunConfig.load(workdir / "a" / "config.txt")
    assert resolved.seeds == (7,) and resolved.n_assets == 3 and resolved.d_model == 8


def test_backtest_writes_reports(workdir):
    assert main(["train", "--config", "run.cfg", "--seed", "1", "--out", "r"]) == 0
    assert main(["backtest", "--config", "run.cfg", "--out", "r", "--checkpoint", "r/model.ckpt",
                 "--set", "cost_bps=5"]) == 0
    rows = [json.loads(l) for l in (workdir / "r" / "reports.jsonl").read_text().splitlines()]
    assert [r["strategy"] for r in rows] == ["ewp", "gmv", "cvar", "hrp", "sit"]
    assert all(r["c_bps"] == 5 for r in rows)


def test_ablate_and_sweep(workdir):
    assert main(["ablate", "--config", "run.cfg", "--seed", "0,1", "--variants", "full,no_gate",
                 "--out", "ab"]) == 0
    rows = [json.loads(l) for l in (workdir / "ab" / "ablation.jsonl").read_text().splitlines()]
    assert [(r["variant"], r["seed"]) for r in rows] == [("full", 0), ("full", 1), ("no_gate", 0), ("no_gate", 1)]
    assert main(["sweep", "--config", "run.cfg", "--seed", "0", "--out", "sw"]) == 0
    with open(workdir / "sw" / "sweep.csv") as fh:
        cells = list(csv.DictReader(fh))
    assert len(cells) == 21
    assert sorted({float(c["c_bps"]) for c in cells}) == [0.0, 5.0, 10.0]


@pytest.mark.parametrize("argv", [
    ["train", "--config", "run.cfg"],                       # missing --seed
    ["sweep", "--config", "run.cfg", "--seed", "x"],        # bad seed
    ["frobnicate"],
    ["train", "--config", "run.cfg", "--seed", "1", "--set", "novalue"],
])
def test_usage_errors_exit_2(workdir, argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv,name", [
    (["train", "--config", "run.cfg", "--seed", "1", "--set", "bogus=1"], "InvalidConfig"),
    (["train", "--config", "run.cfg", "--seed", "1", "--set", "hidden_c=12"], "InvalidConfig"),
    (["train", "--config", "run.cfg", "--seed", "1,2"], "InvalidConfig"),
    (["sig", "nothere.csv"], "FormatError"),
    (["ablate", "--config", "run.cfg", "--seed", "1", "--variants", "no_magic"], "InvalidConfig"),
    (["synth", "--pairs", "0:1,1:2", "--output", "x.csv"], "InvalidConfig"),
])
def test_runtime_errors_exit_1(workdir, argv, name, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err.startswith(name)


def test_help_exits_cleanly(capsys):
    assert main(["train", "--help"]) == 0
    assert "--seed" in capsys.readouterr().out


def test_gradcheck_quick(capsys):
    assert main(["gradcheck", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_config_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("tau_grid = 0.5, 1.5\n  n_heads = 4 # comment\n\nseeds=3,4\n")
    cfg = RunConfig.load(path, {"cost_bps": "2.5"})
    assert cfg.tau_grid == (0.5, 1.5) and cfg.n_heads == 4 and cfg.seeds == (3, 4) and cfg.cost_bps == 2.5
    assert RunConfig.load(None, RunConfig.read_pairs(_written(tmp_path, cfg.to_text()))) == cfg
    for bad in ("d_model = 8\nd_model = 16\n", "just text\n", "lr = fast\n", "variant = no_fun\n",
                "train_end = 2016-02-30\n", "n_layers = 3\n"):
        with pytest.raises(InvalidConfig):
            RunConfig.load(_written(tmp_path, bad))


def _written(tmp_path, text):
    path = tmp_path / "w.cfg"
    path.write_text(text)
    return path
