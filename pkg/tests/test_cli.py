import json

import pytest

from ctclab.cli import main

SMALL_GEN = "num_glosses: 5\nnum_sentences: 40\nmin_len: 2\nmax_len: 3\n"
TINY_TRAIN = "conv_channels: 6\nhidden: 6\nstate_dim: 6\nembed_dim: 4\nlr: 0.003\n"


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def gen_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "gen.yaml"
    p.write_text(SMALL_GEN)
    return p


@pytest.fixture
def data_dir(tmp_path, gen_cfg, capsys):
    code, _, _ = _run(capsys, "gen", "--config", str(gen_cfg), "--seed", "3", "--out", str(tmp_path / "d"))
    assert code == 0
    return tmp_path / "d"


def test_gen_writes_reproducible_manifest(tmp_path, gen_cfg, capsys, data_dir):
    code, out, _ = _run(capsys, "gen", "--config", str(gen_cfg), "--seed", "3", "--out", str(tmp_path / "again"))
    assert code == 0
    first = json.loads((data_dir / "manifest.json").read_text())
    again = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert json.loads(out)["manifest"]["splits"] == again["splits"]
    assert {k: v["sha256"] for k, v in first["splits"].items()} == {k: v["sha256"] for k, v in again["splits"].items()}


def test_gen_rejects_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("num_glosses: 5\nbogus: 1\n")
    code, _, err = _run(capsys, "gen", "--config", str(cfg), "--out", str(tmp_path / "x"))
    assert code == 2
    assert "bogus" in err


def test_nested_config_rejected(tmp_path, capsys):
    cfg = tmp_path / "nested.yaml"
    cfg.write_text("model:\n  hidden: 3\n")
    code, _, err = _run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "x"))
    assert code == 2 and "model" in err


def test_train_eval_align_round(tmp_path, data_dir, capsys):
    cfg = tmp_path / "train.yaml"
    cfg.write_text(TINY_TRAIN)
    run = tmp_path / "run"
    code, out, _ = _run(capsys, "train", "--config", str(cfg), "--data", str(data_dir), "--criterion", "enctc",
                        "--phi", "0.2", "--epochs", "2", "--out", str(run))
    assert code == 0
    assert json.loads(out)["test"]["wer"] >= 0
    assert json.loads((run / "config.json").read_text())["phi"] == 0.2
    ckpt = str(run / "model.npz")

    code, out, _ = _run(capsys, "eval", "--checkpoint", ckpt, "--data", str(data_dir), "--split", "val",
                        "--beam", "2", "--out", str(tmp_path / "ev"))
    assert code == 0
    summary = json.loads(out)
    lines = (tmp_path / "ev" / "eval_val.jsonl").read_text().splitlines()
    assert len(lines) == summary["sentences"]
    recs = [json.loads(x) for x in lines]
    assert summary["wer"] == pytest.approx(sum(r["S"] + r["D"] + r["I"] for r in recs) / sum(r["N"] for r in recs))

    code, out, _ = _run(capsys, "align", "--checkpoint", ckpt, "--data", str(data_dir), "--out", str(tmp_path / "al"))
    assert code == 0
    assert 0 <= json.loads(out)["mean_iou"] <= 1
    assert (tmp_path / "al" / "align_test.jsonl").exists()

    code, out, _ = _run(capsys, "align", "--gold", "--data", str(data_dir))
    assert code == 0 and json.loads(out)["frame_accuracy"] == 1.0


def test_bad_inputs_exit_two(tmp_path, data_dir, capsys):
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"nope")
    code, _, err = _run(capsys, "eval", "--checkpoint", str(junk), "--data", str(data_dir))
    assert code == 2 and "error" in err
    code, _, _ = _run(capsys, "eval", "--checkpoint", str(junk), "--data", str(tmp_path / "missing"))
    assert code == 2
    code, _, _ = _run(capsys, "train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r"))
    assert code == 2
    code, _, err = _run(capsys, "eval", "--data", str(data_dir))
    assert code == 2 and "checkpoint" in err


def test_gradcheck_passes_and_detects_fault(capsys):
    code, out, _ = _run(capsys, "gradcheck", "--no-models")
    assert code == 0
    rep = json.loads(out)
    assert rep["passed"] and max(rep["max_rel_error_per_loss"].values()) < 1e-4
    code, out, err = _run(capsys, "gradcheck", "--no-models", "--inject-fault", "log")
    assert code == 1
    assert "FAIL op:log" in err
    assert "op:log" in json.loads(out)["failures"]


def test_oracle_skips_over_budget(tmp_path, capsys):
    code, out, err = _run(capsys, "oracle", "--trials", "20", "--budget", "50", "--out", str(tmp_path))
    rep = json.loads(out)
    assert code == 0 and rep["passed"]
    assert rep["trials_skipped"] > 0 and "skipped" in err
    assert len((tmp_path / "oracle_trials.jsonl").read_text().splitlines()) == rep["trials_run"]


def test_bench_output(capsys):
    code, out, _ = _run(capsys, "bench", "--sizes", "gsl", "--reps", "2")
    assert code == 0
    rows = json.loads(out)["rows"]
    assert {r["criterion"] for r in rows} >= {"ctc", "enctc"}
    assert all(r["median_ms"] > 0 and r["p95_ms"] >= r["median_ms"] for r in rows)
    code, _, _ = _run(capsys, "bench", "--sizes", "huge")
    assert code == 2
