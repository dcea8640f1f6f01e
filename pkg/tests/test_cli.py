import csv
import json
import time

import numpy as np
import pytest

from fuse_ser.cli import main
from fuse_ser.frontend import Waveform, write_wav
from fuse_ser.framing import read_features


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["synth-data", "--out", str(root), "--n-per-class", "20", "--n-frames", "32"]) == 0
    return root


def write_config(path, corpus, fusion="none", task="four_class", **kw):
    head = {"four_class": "classification", "multitask": "multitask_regression"}[task]
    cfg = {
        "model": {"backbone_channels": [4, 8], "fusion": fusion, "embedding_dim": 16, "head": head},
        "task": task,
        "loss": "weighted_ce" if task == "four_class" else "ccc",
        "epochs": 1,
        "batch_size": 16,
        "n_seeds": 2,
        "data": {"manifest": str(corpus / "manifest.csv"), "embeddings": str(corpus / "embeddings.csv")},
    }
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_data_counts_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        code, out, _ = run(capsys, "synth-data", "--out", str(d), "--n-per-class", "100")
        assert code == 0
    recs = rows(a / "manifest.csv")
    assert len(recs) == 400
    counts = {s: sum(r["split"] == s for r in recs) for s in ("train", "dev", "test")}
    assert abs(counts["train"] - 280) <= 2 and abs(counts["dev"] - 60) <= 2 and abs(counts["test"] - 60) <= 2
    for name in ("manifest.csv", "embeddings.csv", "features/utt00000.bin", "features/utt00399.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_featurize(tmp_path, capsys):
    rng = np.random.default_rng(0)
    write_wav(tmp_path / "one.wav", Waveform(rng.uniform(-0.5, 0.5, 16000), 16000))
    (tmp_path / "m.csv").write_text(
        "id,audio_path,feature_path,transcript,speaker_id,session_id,emotion,arousal,valence,dominance,split\n"
        "u1,one.wav,,hi,S1_A,S1,sad,,,,train\n"
    )
    code, out, _ = run(capsys, "featurize", "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path / "f"))
    assert code == 0
    (rec,) = rows(tmp_path / "f" / "manifest.csv")
    assert read_features(tmp_path / "f" / rec["feature_path"]).shape == (101, 64)
    code, out, _ = run(capsys, "featurize", "--manifest", str(tmp_path / "f" / "manifest.csv"), "--out", str(tmp_path / "g"))
    assert code == 0 and "nothing to do" in out


def test_featurize_missing_audio(tmp_path, capsys):
    (tmp_path / "m.csv").write_text(
        "id,audio_path,feature_path,transcript,speaker_id,session_id,emotion,arousal,valence,dominance,split\n"
        "ghost,nowhere.wav,,,S1_A,S1,sad,,,,train\n"
    )
    code, _, err = run(capsys, "featurize", "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path / "f"))
    assert code != 0 and "ghost" in err


def test_train_evaluate_analyze(tmp_path, capsys, corpus):
    cnn = write_config(tmp_path / "cnn.json", corpus)
    mf = write_config(tmp_path / "mf.json", corpus, fusion="multistage", standardize_embeddings=True)
    code, out, _ = run(capsys, "train", "--config", str(cnn), "--run-dir", str(tmp_path / "cnn"))
    assert code == 0
    assert "seed 0:" in out and "seed 1:" in out
    last = out.strip().splitlines()[-1]
    assert last.startswith("UAR: ") and last.endswith(")")
    assert run(capsys, "train", "--config", str(cnn), "--run-dir", str(tmp_path / "cnn"))[0] == 2
    assert run(capsys, "train", "--config", str(mf), "--run-dir", str(tmp_path / "mf"))[0] == 0

    code, out, _ = run(capsys, "evaluate", "--checkpoint", str(tmp_path / "mf" / "seed0" / "checkpoint.bin"),
                       "--manifest", str(corpus / "manifest.csv"), "--embeddings", str(corpus / "embeddings.csv"),
                       "--out", str(tmp_path / "ev"))
    assert code == 0 and out.startswith("UAR: ")
    grid = list(csv.reader(open(tmp_path / "ev" / "confusion.csv")))
    assert len(grid) == 5 and all(len(r) == 5 for r in grid)
    # the evaluate CLI applies the stored embedding scaler, so it reproduces the training-time test score
    saved = json.loads((tmp_path / "mf" / "seed0" / "test" / "metrics.json").read_text())
    again = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert again["metrics"]["uar"] == pytest.approx(saved["metrics"]["uar"], abs=1e-12)

    code, out, _ = run(capsys, "analyze", "--runs", str(tmp_path / "cnn"), str(tmp_path / "mf"),
                       "--baseline", "cnn", "--out", str(tmp_path / "cmp.json"))
    assert code == 0 and "confusion change, mf vs cnn" in out
    cmp = json.loads((tmp_path / "cmp.json").read_text())
    self_cmp = next(c for c in cmp["comparisons"] if c["group"] == "cnn")
    assert self_cmp["p"] == 1.0 and not self_cmp["significant"]


def test_missing_checkpoint(tmp_path, capsys, corpus):
    code, _, err = run(capsys, "evaluate", "--checkpoint", str(tmp_path / "none.bin"),
                       "--manifest", str(corpus / "manifest.csv"))
    assert code == 1 and "not found" in err


def test_invalid_config_exit_code(tmp_path, capsys, corpus):
    bad = write_config(tmp_path / "bad.json", corpus, loss="mse")
    code, _, err = run(capsys, "train", "--config", str(bad), "--run-dir", str(tmp_path / "r"))
    assert code == 2 and "loss" in err
    bad = write_config(tmp_path / "bad2.json", corpus, data={})
    code, _, err = run(capsys, "train", "--config", str(bad), "--run-dir", str(tmp_path / "r2"))
    assert code == 2 and "data.manifest" in err


def test_regression_cross_corpus_and_residuals(tmp_path, capsys, corpus):
    cfg = write_config(tmp_path / "reg.json", corpus, task="multitask")
    assert run(capsys, "train", "--config", str(cfg), "--run-dir", str(tmp_path / "reg"))[0] == 0
    code, out, _ = run(capsys, "evaluate", "--checkpoint", str(tmp_path / "reg" / "seed0" / "checkpoint.bin"),
                       "--manifest", str(corpus / "manifest.csv"), "--cross-corpus", "--out", str(tmp_path / "ev"))
    assert code == 0 and out.startswith("PCC: ")
    cfg2 = write_config(tmp_path / "reg2.json", corpus, task="multitask", seed=7)
    assert run(capsys, "train", "--config", str(cfg2), "--run-dir", str(tmp_path / "reg2"))[0] == 0
    code, out, _ = run(capsys, "analyze", "--runs", str(tmp_path / "reg"), str(tmp_path / "reg2"), "--baseline", "reg")
    assert code == 0
    for dim in ("arousal", "valence", "dominance"):
        assert f"residual fit reg {dim}: slope" in out


def test_analyze_marks_disjoint_groups(tmp_path, capsys):
    for name, vals in (("low", [0.50, 0.52, 0.51, 0.49, 0.50]), ("high", [0.90, 0.92, 0.91, 0.93, 0.90])):
        (tmp_path / name).mkdir()
        (tmp_path / name / "summary.json").write_text(json.dumps(
            {"task": "four_class", "metric": "test_uar", "values": vals}))
    code, out, _ = run(capsys, "analyze", "--runs", str(tmp_path / "low"), str(tmp_path / "high"), "--baseline", "low")
    assert code == 0
    line = next(l for l in out.splitlines() if l.strip().startswith("high"))
    assert "*" in line
    (tmp_path / "other").mkdir()
    (tmp_path / "other" / "summary.json").write_text(json.dumps({"task": "multitask", "metric": "test_ccc", "values": [0.1, 0.2]}))
    code, _, err = run(capsys, "analyze", "--runs", str(tmp_path / "low"), str(tmp_path / "other"), "--baseline", "low")
    assert code == 2 and "different tasks" in err


def test_loso_run_dirs(tmp_path, capsys, corpus):
    cfg = write_config(tmp_path / "l.json", corpus, n_seeds=1)
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--loso", "--run-dir", str(tmp_path / "loso"))
    assert code == 0
    folds = sorted(p.name for p in (tmp_path / "loso").iterdir() if p.name.startswith("fold"))
    assert len(folds) == 10 and folds[0] == "fold00_S1_A"
    assert json.loads((tmp_path / "loso" / "summary.json").read_text())["n_folds"] == 10


def test_gradcheck_command(capsys):
    start = time.perf_counter()
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0 and "FAIL" not in out
    assert time.perf_counter() - start < 60
    code, out, _ = run(capsys, "gradcheck", "--corrupt", "relu")
    assert code == 1 and "FAIL relu" in out
