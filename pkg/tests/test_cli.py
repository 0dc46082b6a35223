import csv

import pytest

from uadi.cli import build_parser, main
from uadi.config import git_blob_hash


def _manifest(path):
    return dict(line.split(" = ", 1) for line in path.read_text().splitlines())


def test_no_command_prints_usage(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert main(["train", "--frob"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")]) == 1
    assert "not found" in capsys.readouterr().err


def test_invalid_config_value(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("model.use_upa = true\nmodel.use_tim = false\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "use_tim" in capsys.readouterr().err


@pytest.mark.parametrize("command", ["gen-data", "train", "eval", "ablate", "diagnose", "gradcheck"])
def test_help_documents_flags(command, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out", "--size"):
        assert flag in text
    assert text.count("default") >= 4


def test_gradcheck_components(capsys):
    assert main(["gradcheck", "--size", "tiny", "--seed", "7", "--skip-model"]) == 0
    lines = capsys.readouterr().out.splitlines()
    names = [line.split()[0] for line in lines]
    assert names == ["tim", "upa", "hmsf", "attention_gate", "focal_tversky", "boundary", "texture",
                     "focal_ce", "total"]
    assert all(float(line.split()[1]) < 1e-3 for line in lines)


def test_gen_data_train_eval_diagnose(tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--size", "tiny", "--seed", "1", "--out", str(data), "--format", "pgm"]) == 0
    assert (data / "labels.csv").read_text().startswith("id,label\n")
    assert len(list((data / "images").glob("*.pgm"))) == 40

    assert main(["train", "--size", "tiny", "--seed", "1", "--data", str(data), "--out", str(run)]) == 0
    for name in ("history.csv", "best.ckpt", "metrics.csv", "manifest.txt", "config.cfg"):
        assert (run / name).exists(), name
    m = _manifest(run / "manifest.txt")
    assert m["command"] == "train" and m["seed"] == "1"
    assert m["config_hash"] == git_blob_hash((run / "config.cfg").read_bytes())

    ev = tmp_path / "eval"
    assert main(["eval", "--size", "tiny", "--seed", "1", "--data", str(data), "--checkpoint",
                 str(run / "best.ckpt"), "--out", str(ev)]) == 0
    with (ev / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["split"] for r in rows} == {"test"}
    assert {"dice", "accuracy", "macro_auc"} <= {r["metric"] for r in rows}

    dg = tmp_path / "diag"
    assert main(["diagnose", "--size", "tiny", "--seed", "1", "--data", str(data), "--checkpoint",
                 str(run / "best.ckpt"), "--out", str(dg)]) == 0
    with (dg / "diagnostics_summary.csv").open() as fh:
        assert [r["level"] for r in csv.DictReader(fh)] == ["1", "2", "3", "4"]


def test_train_is_idempotent(tmp_path):
    args = ["train", "--size", "tiny", "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "a2")]) == 0
    for name in ("history.csv", "best.ckpt", "metrics.csv", "config.cfg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "a2" / name).read_bytes(), name


def test_eval_size_mismatch(tmp_path, capsys):
    assert main(["train", "--size", "tiny", "--out", str(tmp_path / "t")]) == 0
    code = main(["eval", "--checkpoint", str(tmp_path / "t" / "best.ckpt"), "--out", str(tmp_path / "e")])
    assert code == 1 and "px" in capsys.readouterr().err


def test_ablate_layout(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("data.n_samples = 24\ntrain.epochs = 1\n")
    out = tmp_path / "abl"
    assert main(["ablate", "--size", "tiny", "--config", str(cfg), "--out", str(out)]) == 0
    with (out / "ablation.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["row"] for r in rows] == ["none", "hmsf", "tim", "tim_upa", "full"]
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == sorted(r["row"] for r in rows)
    assert _manifest(out / "manifest.txt")["config_source_hash"] == git_blob_hash(cfg.read_bytes())


def test_runtime_failure_exit_code(tmp_path, monkeypatch, capsys):
    import uadi.cli as cli

    def boom(*a, **k):
        raise RuntimeError("simulated")

    monkeypatch.setitem(cli.COMMANDS, "gen-data", boom)
    assert main(["gen-data", "--size", "tiny", "--out", str(tmp_path)]) == 2
    assert "runtime failure" in capsys.readouterr().err
    assert (tmp_path / "manifest.txt").exists()
