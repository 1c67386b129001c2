import csv
import subprocess
import sys

import numpy as np
import pytest

from spdrdl import cli
from spdrdl import data as D
from spdrdl import gradcheck as G
from spdrdl import model as M

TINY_CONFIG = """\
# tiny network for fast command tests
input_size = 32
unet_depth = 2
unet_width = 2
backbone_widths = 4,8
max_epochs = 1
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--seed", 3, "--out", root / "data", "--chip", 64, "--crop", 32,
               "--counts", "48,20") == 0
    (root / "tiny.cfg").write_text(TINY_CONFIG)
    assert run("train", "--data", root / "data", "--config", root / "tiny.cfg", "--seed", 1,
               "--out", root / "run") == 0
    return root


def rows(path):
    return list(csv.reader(open(path)))


# -- gen-data ------------------------------------------------------------

def test_gen_data_loadable(workspace, capsys):
    ds = D.load(workspace / "data")
    assert ds.indices("train").size == 48 and ds.indices("val").size == 20
    assert (workspace / "data" / cli.RESOLVED_NAME).exists()


def test_gen_data_repeatable(tmp_path, capsys):
    for name in ("a", "b"):
        assert run("gen-data", "--seed", 8, "--out", tmp_path / name, "--counts", "20,8") == 0
    # the resolved config records --out, so only the data files must match
    for f in (D.MANIFEST_NAME, D.BLOB_NAME):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert "background=16" in capsys.readouterr().out


def test_gen_data_counts_zero_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("gen-data", "--seed", 1, "--out", tmp_path / "x", "--counts", "0")
    assert exc.value.code == cli.EXIT_USAGE


def test_gen_data_refuses_non_empty_out(tmp_path, capsys):
    (tmp_path / "keep.txt").write_text("x")
    assert run("gen-data", "--seed", 1, "--out", tmp_path, "--counts", "8") == cli.EXIT_USAGE
    assert run("gen-data", "--seed", 1, "--out", tmp_path, "--counts", "8", "--force") == 0
    assert (tmp_path / "keep.txt").exists()


def test_gen_data_bad_geometry_is_data_error(tmp_path, capsys):
    assert run("gen-data", "--seed", 1, "--out", tmp_path / "g", "--chip", 32, "--crop", 40,
               "--counts", "8") == cli.EXIT_DATA


# -- train ---------------------------------------------------------------

def test_train_outputs(workspace):
    run_dir = workspace / "run"
    for f in ("checkpoint.bin", "train_log.csv", "timing.csv", cli.RESOLVED_NAME,
              "model_config.txt", "train_config.txt"):
        assert (run_dir / f).exists(), f
    log = rows(run_dir / "train_log.csv")
    assert log[1][1] == "CL+SSP+SSCP" and log[1][2] == "48"
    assert M.load(run_dir / "checkpoint.bin").config.backbone_widths == (4, 8)


def test_train_is_deterministic(workspace, tmp_path):
    assert run("train", "--data", workspace / "data", "--config", workspace / "tiny.cfg", "--seed", 1,
               "--out", tmp_path) == 0
    for f in ("train_log.csv", "checkpoint.bin"):
        assert (tmp_path / f).read_bytes() == (workspace / "run" / f).read_bytes()


def test_ablation_rows(workspace, tmp_path):
    methods = []
    for flags in ([], ["--no-ssp"], ["--no-sscp"], ["--no-ssp", "--no-sscp"]):
        out = tmp_path / ("run" + "".join(flags))
        assert run("train", "--data", workspace / "data", "--config", workspace / "tiny.cfg",
                   "--seed", 2, "--out", out, *flags) == 0
        methods.append(rows(out / "train_log.csv")[1][1])
    assert methods == ["CL+SSP+SSCP", "CL+SSCP", "CL+SSP", "CL"]


def test_train_fraction_logged(workspace, tmp_path):
    assert run("train", "--data", workspace / "data", "--config", workspace / "tiny.cfg", "--seed", 1,
               "--out", tmp_path, "--train-fraction", 0.1) == 0
    assert rows(tmp_path / "train_log.csv")[1][2] == str(int(0.1 * 48))
    assert "n_train = 4" in (tmp_path / cli.RESOLVED_NAME).read_text()


def test_despeckler_needs_no_ssp(workspace, tmp_path, capsys):
    args = ["train", "--data", workspace / "data", "--config", workspace / "tiny.cfg", "--seed", 1]
    assert run(*args, "--out", tmp_path / "a", "--despeckler", "median") == cli.EXIT_USAGE
    assert not (tmp_path / "a").exists()
    assert run(*args, "--out", tmp_path / "b", "--despeckler", "median", "--no-ssp") == 0
    assert rows(tmp_path / "b" / "train_log.csv")[1][1] == "CL+SSCP+MedianFilter"


def test_train_rejects_unknown_config_key(workspace, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(TINY_CONFIG + "dropout = 0.5\n")
    assert run("train", "--data", workspace / "data", "--config", cfg, "--seed", 1,
               "--out", tmp_path / "o") == cli.EXIT_USAGE


def test_train_crop_mismatch(workspace, tmp_path, capsys):
    assert run("train", "--data", workspace / "data", "--seed", 1, "--out", tmp_path) == cli.EXIT_USAGE


def test_missing_dataset(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nope", "--seed", 1, "--out", tmp_path / "o") == cli.EXIT_USAGE


def test_train_nan_is_numeric_failure(workspace, tmp_path, capsys):
    ds = D.load(workspace / "data")
    ds.images[ds.indices("train")[0]] = np.nan
    D.save(ds, tmp_path / "bad")
    assert run("train", "--data", tmp_path / "bad", "--config", workspace / "tiny.cfg", "--seed", 1,
               "--out", tmp_path / "o") == cli.EXIT_NUMERIC
    assert "input" in capsys.readouterr().err


# -- eval / prune / spectrum ---------------------------------------------

def test_eval_nine_crops(workspace, tmp_path, capsys):
    assert run("eval", "--data", workspace / "data", "--checkpoint", workspace / "run" / "checkpoint.bin",
               "--out", tmp_path, "--nine-crops") == 0
    assert "inferences=180" in capsys.readouterr().out
    psi = rows(tmp_path / "psi.csv")
    assert len(psi) == 1 + 20 + 1 and psi[-1][0] == "mean"
    confusion = rows(tmp_path / "confusion.csv")
    assert sum(int(v) for r in confusion[1:] for v in r[1:]) == 180


def test_eval_single_crop(workspace, tmp_path, capsys):
    assert run("eval", "--data", workspace / "data", "--checkpoint", workspace / "run" / "checkpoint.bin",
               "--out", tmp_path) == 0
    assert "inferences=20" in capsys.readouterr().out
    assert not (tmp_path / "psi.csv").exists()
    assert rows(tmp_path / "pr_curve.csv")[0] == ["curve", "threshold", "precision", "recall", "aucpr"]


def test_eval_corrupt_checkpoint(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert run("eval", "--data", workspace / "data", "--checkpoint", bad, "--out", tmp_path / "o") == cli.EXIT_DATA
    assert run("eval", "--data", workspace / "data", "--checkpoint", tmp_path / "none.bin",
               "--out", tmp_path / "o") == cli.EXIT_USAGE


def test_prune_rows(workspace, tmp_path, capsys):
    assert run("prune", "--data", workspace / "data", "--checkpoint", workspace / "run" / "checkpoint.bin",
               "--proportions", "0,0.25,0.5,0.75,0.9", "--out", tmp_path) == 0
    table = rows(tmp_path / "prune_sweep.csv")
    assert len(table) == 6 and [float(r[0]) for r in table[1:]] == [0, 0.25, 0.5, 0.75, 0.9]


def test_prune_bad_proportion(workspace, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("prune", "--data", workspace / "data", "--checkpoint", workspace / "run" / "checkpoint.bin",
            "--proportions", "0,1.5", "--out", tmp_path)
    assert exc.value.code == cli.EXIT_USAGE


@pytest.mark.parametrize("with_model", [False, True])
def test_spectrum(workspace, tmp_path, with_model, capsys):
    extra = ["--checkpoint", workspace / "run" / "checkpoint.bin"] if with_model else []
    assert run("spectrum", "--data", workspace / "data", "--out", tmp_path, *extra) == 0
    table = rows(tmp_path / "spectrum.csv")
    assert table[0] == ["freq_row", "freq_col", "magnitude"] and len(table) == 1 + 32 * 32


def test_inputs_untouched(workspace, tmp_path, capsys):
    before = (workspace / "data" / D.BLOB_NAME).read_bytes()
    run("eval", "--data", workspace / "data", "--checkpoint", workspace / "run" / "checkpoint.bin",
        "--out", tmp_path)
    assert (workspace / "data" / D.BLOB_NAME).read_bytes() == before


# -- gradcheck / entry point ---------------------------------------------

def test_gradcheck_exit_codes(monkeypatch, capsys):
    ok = [G.CheckResult("a", 1e-9, 0.0)]
    monkeypatch.setattr(G, "run_suite", lambda seed: ok)
    assert run("gradcheck") == 0
    monkeypatch.setattr(G, "run_suite", lambda seed: ok + [G.CheckResult("b", 0.5, 0.0)])
    assert run("gradcheck", "--seed", 2) == cli.EXIT_NUMERIC
    assert "FAIL b" in capsys.readouterr().out


def test_help_documents_every_flag():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        for action in p._actions:
            assert action.help, (name, action.dest)


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "spdrdl.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
    res = subprocess.run([sys.executable, "-m", "spdrdl.cli", "train"], capture_output=True, text=True)
    assert res.returncode == cli.EXIT_USAGE
