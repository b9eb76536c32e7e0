import csv
import json

import pytest

from maskdiff.cli import main

from conftest import tiny_config

OUTPUT_FILES = ["frames.npy", "frame_stats.csv", "mask_trace.csv", "rollout.gif"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(steps=4, sample_steps=3, n_eval_clips=2, eval_frames=4)
    (d / "tiny.cfg").write_text(cfg.to_text())
    base = ["--config", str(d / "tiny.cfg")]
    assert main(base + ["--out", str(d / "data"), "gen-data"]) == 0
    assert main(base + ["--out", str(d / "run"), "train", "--corpus", str(d / "data/corpus.bin")]) == 0
    return d, base


def _files(path, names):
    return {n: (path / n).read_bytes() for n in names}


def test_gen_data_is_reproducible(work, tmp_path):
    d, base = work
    assert main(base + ["--out", str(tmp_path), "gen-data"]) == 0
    names = ["corpus.bin", "corpus_stats.csv"]
    assert _files(tmp_path, names) == _files(d / "data", names)
    rows = list(csv.DictReader(open(tmp_path / "corpus_stats.csv")))
    assert list(rows[0]) == ["clip", "prompt", "motion_score"]


def test_train_is_reproducible_and_resumable(work, tmp_path):
    d, base = work
    corpus = str(d / "data/corpus.bin")
    assert main(base + ["--out", str(tmp_path / "a"), "train", "--corpus", corpus]) == 0
    assert (tmp_path / "a/model.ckpt").read_bytes() == (d / "run/model.ckpt").read_bytes()
    cfg2 = tmp_path / "two.cfg"
    cfg2.write_text(tiny_config(steps=2, sample_steps=3).to_text())
    assert main(["--config", str(cfg2), "--out", str(tmp_path / "b"), "train", "--corpus", corpus]) == 0
    assert main(base + ["--out", str(tmp_path / "c"), "train", "--corpus", corpus,
                        "--resume", str(tmp_path / "b/model.ckpt")]) == 0
    assert (tmp_path / "c/model.ckpt").read_bytes() == (d / "run/model.ckpt").read_bytes()


def test_generate_byte_identical(work, tmp_path):
    d, base = work
    args = ["generate", "--ckpt", str(d / "run/model.ckpt"), "--prompt", "left fast", "--frames", "3"]
    assert main(base + ["--out", str(tmp_path / "a")] + args) == 0
    assert main(base + ["--out", str(tmp_path / "b")] + args) == 0
    assert _files(tmp_path / "a", OUTPUT_FILES) == _files(tmp_path / "b", OUTPUT_FILES)
    assert main(base + ["--seed", "1", "--out", str(tmp_path / "c")] + args) == 0
    assert (tmp_path / "c/frames.npy").read_bytes() != (tmp_path / "a/frames.npy").read_bytes()


def test_rollout_multi(work, tmp_path):
    d, base = work
    (tmp_path / "plan.txt").write_text("# two segments\n2\tleft slow\n2\tdown fast\n")
    args = ["--out", str(tmp_path), "rollout-multi", "--ckpt", str(d / "run/model.ckpt"),
            "--plan", str(tmp_path / "plan.txt"), "--first-from", str(d / "data/corpus.bin"), "--no-gif"]
    assert main(base + args) == 0
    rows = list(csv.DictReader(open(tmp_path / "frame_stats.csv")))
    assert [r["prompt"] for r in rows] == ["left slow"] * 2 + ["down fast"] * 2
    assert not (tmp_path / "rollout.gif").exists()


def test_eval_drift_and_mask_stats(work, tmp_path):
    d, base = work
    ck = ["--ckpt", str(d / "run/model.ckpt")]
    assert main(base + ["--out", str(tmp_path), "eval-drift"] + ck) == 0
    rows = list(csv.DictReader(open(tmp_path / "drift.csv")))
    assert len(rows) == 2 * 4 and rows[0]["mse"] == "0"
    assert main(base + ["--out", str(tmp_path), "mask-stats"] + ck) == 0
    rows = list(csv.DictReader(open(tmp_path / "mask_trend.csv")))
    assert len(rows) == 3 and list(rows[0]) == ["step_index", "t", "mean_mask"]


def test_ablate_with_training(work, tmp_path):
    d, base = work
    args = ["--out", str(tmp_path / "rep"), "ablate", "--mode", "no_mask", "--corpus", str(d / "data/corpus.bin"),
            "--ckpt-dir", str(tmp_path / "ck"), "--seeds", "0", "--train-missing"]
    assert main(base + args) == 0
    first = _files(tmp_path / "rep", ["summary.csv", "drift_per_frame.csv"])
    assert main(base + args) == 0
    assert _files(tmp_path / "rep", ["summary.csv", "drift_per_frame.csv"]) == first


def test_flops(tmp_path, capsys):
    assert main(["--out", str(tmp_path), "flops"]) == 0
    rows = dict(csv.reader(open(tmp_path / "flops.csv")))
    assert rows["per_16_frames"] == str(16 * int(rows["per_frame"]))


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_error_exit_codes(work, tmp_path, capsys):
    d, base = work
    assert main(base + ["--out", str(tmp_path), "generate", "--ckpt", str(tmp_path / "nope"), "--prompt", "still"]) == 5
    assert _error(capsys)["error"] == "missing_checkpoint"

    (tmp_path / "bad.cfg").write_text("no_such_key = 1\n")
    assert main(["--config", str(tmp_path / "bad.cfg"), "flops"]) == 3
    assert _error(capsys)["error"] == "config"

    raw = (d / "run/model.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:100])
    assert main(base + ["--out", str(tmp_path), "generate", "--ckpt", str(tmp_path / "cut.ckpt"), "--prompt", "still"]) == 4
    assert _error(capsys)["error"] == "corrupt_file"

    assert main(base + ["--out", str(tmp_path), "generate", "--ckpt", str(d / "run/model.ckpt"),
                        "--prompt", "sideways", "--frames", "2"]) == 2
    assert _error(capsys)["error"] == "contract"
