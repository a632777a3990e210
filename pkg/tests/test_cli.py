import csv
import json

import numpy as np
import pytest

from tacit.cli import main
from tacit.dataset import list_shards, read_batch
from tacit.flow import save_checkpoint
from tacit.imageio import write_ppm
from tacit.maze import generate_pair
from tacit.model import ModelConfig, init_params

SMALL = ModelConfig(resolution=32, patch_size=4, hidden=8, depth=1, heads=2, freq_dim=16)


@pytest.fixture
def ckpt(tmp_path):
    path = tmp_path / "model.tckp"
    rng = np.random.default_rng(0)
    params = {k: (v + 0.05 * rng.standard_normal(v.shape)).astype(np.float32) for k, v in init_params(SMALL).items()}
    save_checkpoint(path, SMALL, params)
    return path


def test_generate_count(tmp_path):
    out = tmp_path / "d"
    assert main(["generate", "--count", "100", "--sizes", "11", "--seed", "1", "--out", str(out), "--resolution", "32"]) == 0
    samples = [s for p in list_shards(out) for s in read_batch(p)]
    assert len(samples) == 100 and {s.size for s in samples} == {11}
    run = json.loads((out / "run.json").read_text())
    assert run["seed"] == 1 and run["command"] == "generate"


def test_generate_is_byte_identical_and_uses_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("TACIT_SEED", "7")
    for name in ("a", "b"):
        assert main(["generate", "--count", "5", "--sizes", "5", "--out", str(tmp_path / name), "--resolution", "16"]) == 0
    a, b = list_shards(tmp_path / "a"), list_shards(tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert json.loads((tmp_path / "a" / "run.json").read_text())["seed"] == 7


def test_sample_records_trajectory(tmp_path, ckpt):
    img = tmp_path / "in.ppm"
    write_ppm(img, generate_pair(11, 3, 32).input)
    rec = tmp_path / "t"
    code = main(["sample", "--ckpt", str(ckpt), "--input", str(img), "--steps", "10", "--record", str(rec), "--out", str(tmp_path / "o.ppm")])
    assert code == 0
    assert len(list(rec.glob("step_*.ppm"))) == 11
    assert (rec / "trajectory.csv").exists() and (tmp_path / "o.ppm").exists()


def test_analyze_emergence_rows(tmp_path, ckpt):
    out = tmp_path / "em"
    assert main(["analyze", "emergence", "--ckpt", str(ckpt), "--n", "20", "--steps", "50", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "transition.csv")))
    assert len(rows) == 21
    assert len(list(csv.reader(open(out / "emergence.csv")))) == 1 + 20 * 51
    assert "never_emerged" in json.loads((out / "transition_summary.json").read_text())


def test_other_analyses(tmp_path, ckpt):
    assert main(["analyze", "segments", "--ckpt", str(ckpt), "--n", "3", "--steps", "5", "--out", str(tmp_path / "s")]) == 0
    assert len((tmp_path / "s" / "segments.csv").read_text().splitlines()) == 4
    assert main(["analyze", "sweep", "--ckpt", str(ckpt), "--n", "3", "--step-counts", "2,4", "--out", str(tmp_path / "w")]) == 0
    assert len((tmp_path / "w" / "sweep.csv").read_text().splitlines()) == 3
    assert main(["eval", "l2", "--ckpt", str(ckpt), "--n", "3", "--out", str(tmp_path / "l")]) == 0
    assert "heldout_l2" in json.loads((tmp_path / "l" / "run.json").read_text())
    assert main(["plot", "grid", "--ckpt", str(ckpt), "--n", "2", "--steps", "3", "--out", str(tmp_path / "g.ppm")]) == 0
    assert (tmp_path / "g.ppm").exists()


def test_train_desk_smoke(tmp_path):
    data = tmp_path / "d"
    main(["generate", "--count", "4", "--preset", "desk", "--seed", "0", "--out", str(data)])
    out = tmp_path / "o"
    code = main(["train", "--data", str(data), "--out", str(out), "--preset", "desk", "--epochs", "1", "--heldout-count", "2"])
    assert code == 0
    assert (out / "latest.tckp").exists() and (out / "loss_log.csv").exists()


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["generate", "--count", "3", "--out", "x", "--bogus"])
    assert info.value.code == 2


def test_failures_print_one_category_line(tmp_path, capsys):
    assert main(["sample", "--ckpt", str(tmp_path / "missing.tckp"), "--input", "x.ppm"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: io: ")
    bad = tmp_path / "bad.tckp"
    bad.write_bytes(b"junkjunkjunk")
    assert main(["eval", "l2", "--ckpt", str(bad)]) == 1
    assert capsys.readouterr().err.startswith("error: checkpoint: ")
    assert main(["generate", "--count", "2", "--sizes", "4", "--out", str(tmp_path / "g")]) == 1
    assert capsys.readouterr().err.startswith("error: maze: ")
