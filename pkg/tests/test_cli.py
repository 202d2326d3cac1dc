import json

import numpy as np
import pytest

from protgnn import checkpoint, cli
from protgnn.evaluate import read_scores
from protgnn.graph import build_graph
from protgnn.psm import load_pin
from protgnn.trainer import ensemble_score

TINY = ["--rounds", "1", "--epochs", "5", "--layers", "2", "--hidden", "4"]


@pytest.fixture
def synth_files(tmp_path):
    assert cli.main(["synth", "--out-dir", str(tmp_path), "--n-true", "8", "--n-entrapment", "8", "--seed", "7"]) == 0
    return tmp_path / "synth.pin", tmp_path / "synth.truth.tsv"


def test_synth_is_deterministic(tmp_path, synth_files):
    pin, _ = synth_files
    cli.main(["synth", "--out-dir", str(tmp_path / "b"), "--n-true", "8", "--n-entrapment", "8", "--seed", "7"])
    assert pin.read_bytes() == (tmp_path / "b" / "synth.pin").read_bytes()


def test_synth_validation(tmp_path, capsys):
    assert cli.main(["synth", "--out-dir", str(tmp_path), "--n-true", "0", "--n-entrapment", "0"]) == 2
    assert "ERROR" in capsys.readouterr().err


def test_build_counts(synth_files, capsys):
    pin, _ = synth_files
    assert cli.main(["build", str(pin)]) == 0
    header, row = capsys.readouterr().out.strip().split("\n")
    fields = dict(zip(header.split("\t"), row.split("\t")))
    table = load_pin(pin)
    g = build_graph(table)
    assert int(fields["psms"]) == len(table) == g.n_psm
    assert int(fields["peptides"]) == g.n_pep
    assert int(fields["peptides_1"]) + int(fields["peptides_2"]) + int(fields["peptides_ge3"]) == g.n_pep


def test_build_errors(tmp_path, synth_files, capsys):
    assert cli.main(["build", str(tmp_path / "missing.pin")]) == 1
    assert "missing.pin" in capsys.readouterr().err
    pin, _ = synth_files
    assert cli.main(["build", str(pin), "--epsilon", "1.5"]) == 2
    bad = tmp_path / "bad.pin"
    bad.write_text(pin.read_text().replace("\t0.", "\tx.", 1))
    assert cli.main(["build", str(bad)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_config_file_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nhidden = 7\nlr=0.01\n")
    args = cli.build_parser().parse_args(["selftrain", "x.pin", "--config", str(conf), "--hidden", "9"])
    cfg = cli.resolve(args, cli.TRAIN_KEYS)
    assert cfg["hidden"] == 9 and cfg["lr"] == 0.01 and cfg["layers"] == 6
    conf.write_text("bogus = 1\n")
    with pytest.raises(cli.UsageError):
        cli.resolve(args, cli.TRAIN_KEYS)


def test_selftrain_infer_eval(tmp_path, synth_files, monkeypatch, capsys):
    pin, truth = synth_files
    run = tmp_path / "run"
    monkeypatch.setenv(cli.RUN_DIR_ENV, str(run))
    assert cli.main(["selftrain", str(pin), "--baseline", *TINY]) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["hidden"] == 4 and manifest["config"]["epsilon"] == 0.9
    assert manifest["inputs"][0]["pin_sha256"]
    for rel in ("ensemble.ckpt", "train_log.tsv", "scores_synth.tsv", "round_01/model.ckpt", "round_01/labels_synth.tsv"):
        assert (run / rel).exists(), rel

    out = tmp_path / "inf.tsv"
    assert cli.main(["infer", "--checkpoint", str(run / "ensemble.ckpt"), str(pin), "--out", str(out)]) == 0
    assert out.read_bytes() == (run / "scores_synth.tsv").read_bytes()
    ens, gcfg = checkpoint.load(run / "ensemble.ckpt")
    direct = ensemble_score(ens, build_graph(ens.feature_stats.apply(load_pin(pin)), gcfg))
    np.testing.assert_allclose(read_scores(out).scores, direct.scores, atol=5e-7)

    capsys.readouterr()
    assert cli.main(["eval", "--scores", str(out), "--truth", str(truth), "--out-dir", str(tmp_path / "rep")]) == 0
    assert "pauc" in capsys.readouterr().out
    assert (tmp_path / "rep" / "summary.tsv").exists()


def test_eval_missing_truth(tmp_path, synth_files, capsys):
    pin, truth = synth_files
    run = tmp_path / "run"
    cli.main(["selftrain", str(pin), "--baseline", *TINY, "--run-dir", str(run)])
    lines = truth.read_text().splitlines()
    short = tmp_path / "short.tsv"
    short.write_text("\n".join(lines[:-2]) + "\n")
    dropped = [l.split("\t")[0] for l in lines[-2:]]
    capsys.readouterr()
    assert cli.main(["eval", "--scores", str(run / "scores_synth.tsv"), "--truth", str(short)]) == 1
    err = capsys.readouterr().err
    assert all(d in err for d in dropped)


def test_selftrain_usage_errors(synth_files):
    pin, _ = synth_files
    assert cli.main(["selftrain", str(pin), "--baseline", "--rounds", "0"]) == 2
    assert cli.main(["selftrain", str(pin)]) == 2


def test_infer_rejects_corrupt_checkpoint(tmp_path, synth_files):
    pin, _ = synth_files
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"PGNNCKPT" + b"\0" * 64)
    assert cli.main(["infer", "--checkpoint", str(bad), str(pin)]) == 1


def test_gradcheck_exit_codes(capsys):
    assert cli.main(["gradcheck", "--trials", "2"]) == 0
    assert "max_rel_error" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--trials", "1", "--tolerance", "1e-12"]) == 1
