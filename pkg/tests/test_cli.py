import csv
import json
import time

import numpy as np
import pytest

from mitilab import tensor as T
from mitilab.cli import main
from mitilab.tensor import Tensor

SMALL = """
d_model = 16
heads = 2
d_qk = 8
d_v = 8
h_mlp = 16
enc_layers = 1
dec_layers = 1
num_queries = 4
grid_size = 4
epochs = 2
train_scenes = 12
eval_scenes = 6
max_objects = 2
probe_depth = 4
probe_seeds = 3
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.txt"
    path.write_text(SMALL)
    return path


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path / "out")])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_smoke_train_default_model_is_quick(tmp_path):
    cfg = tmp_path / "smoke.txt"
    cfg.write_text("epochs = 5\ntrain_scenes = 50\neval_scenes = 10\n")
    start = time.perf_counter()
    assert run(tmp_path, "train", "--config", str(cfg)) == 0
    assert time.perf_counter() - start < 60
    rows = read_csv(tmp_path / "out" / "metrics.csv")
    assert rows[0] == ["epoch", "loss", "test_error", "avg_recall", "lr"] and len(rows) == 6


def test_train_twice_with_same_seed_writes_same_bytes(tmp_path, small_config):
    files = ("metrics.csv", "model.ckpt", "config.txt")
    assert run(tmp_path, "train", "--config", str(small_config), "--seed", "7") == 0
    first = {f: (tmp_path / "out" / f).read_bytes() for f in files}
    assert run(tmp_path, "train", "--config", str(small_config), "--seed", "7") == 0
    assert first == {f: (tmp_path / "out" / f).read_bytes() for f in files}
    assert b"seed = 7\n" in first["config.txt"]


def test_commands_write_only_inside_out(tmp_path, small_config, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = {p.name for p in tmp_path.iterdir()}
    for cmd in ("gen-data", "train", "eval"):
        assert main([cmd, "--config", str(small_config), "--out", "out"]) == 0
    assert {p.name for p in tmp_path.iterdir()} - before == {"out"}
    assert {p.name for p in (tmp_path / "out").iterdir()} == {
        "train.json", "eval.json", "metrics.csv", "model.ckpt", "config.txt", "ap_table.csv"}


def test_invalid_wiring_is_a_config_error(tmp_path, capsys):
    assert run(tmp_path, "train", "--wiring", "Dense") == 1
    err = capsys.readouterr().err
    for name in ("PureSAN", "SanMlp", "StandardSkip", "MitiResidual"):
        assert name in err


def test_bad_arguments_exit_one(tmp_path, capsys):
    assert main(["nonsense"]) == 1
    assert run(tmp_path, "train", "--config", str(tmp_path / "missing.txt")) == 1
    bad = tmp_path / "bad.txt"
    bad.write_text("lr = fast\n")
    assert run(tmp_path, "train", "--config", str(bad)) == 1
    assert "bad.txt:1" in capsys.readouterr().err


def test_eval_of_untrained_checkpoint(tmp_path, small_config):
    cfg = tmp_path / "zero.txt"
    cfg.write_text(SMALL + "lr = 0\nepochs = 1\n")
    assert run(tmp_path, "train", "--config", str(cfg)) == 0
    assert run(tmp_path, "eval", "--config", str(cfg)) == 0
    header, row = read_csv(tmp_path / "out" / "ap_table.csv")
    assert header == ["AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "AR"]
    values = [float(v) for v in row]
    assert all(np.isnan(v) or 0.0 <= v <= 1.0 for v in values)
    assert values[0] < 0.05


def test_eval_rejects_mismatched_checkpoint(tmp_path, small_config):
    assert run(tmp_path, "train", "--config", str(small_config)) == 0
    other = tmp_path / "other.txt"
    other.write_text(SMALL + "dec_layers = 2\n")
    assert run(tmp_path, "eval", "--config", str(other)) == 1
    missing = tmp_path / "nockpt.txt"
    missing.write_text(SMALL + f"checkpoint = {tmp_path / 'absent.ckpt'}\n")
    assert run(tmp_path, "eval", "--config", str(missing)) == 1


def test_eval_reads_annotation_files(tmp_path, small_config):
    assert run(tmp_path, "gen-data", "--config", str(small_config)) == 0
    out = tmp_path / "out"
    cfg = tmp_path / "ann.txt"
    cfg.write_text(SMALL + f"train_annotations = {out / 'train.json'}\neval_annotations = {out / 'eval.json'}\n")
    assert run(tmp_path, "train", "--config", str(cfg)) == 0
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"images": []}))
    cfg.write_text(SMALL + f"eval_annotations = {broken}\n")
    assert run(tmp_path, "eval", "--config", str(cfg)) == 1


def test_gradcheck_passes_with_defaults(tmp_path):
    assert run(tmp_path, "gradcheck") == 0
    rows = read_csv(tmp_path / "out" / "gradcheck.csv")
    assert rows[0] == ["name", "max_rel_err", "passed"]
    assert all(r[2] == "1" for r in rows[1:])


def test_gradcheck_names_a_corrupted_op(tmp_path, monkeypatch, capsys):
    true_sigmoid = T.sigmoid

    def wrong_sigmoid(x):
        # same forward value, gradient off by half of the identity
        return T.add(true_sigmoid(x), T.scale(T.sub(x, Tensor(x.data)), 0.5))

    monkeypatch.setattr(T, "sigmoid", wrong_sigmoid)
    assert run(tmp_path, "gradcheck") == 2
    assert "FAIL sigmoid" in capsys.readouterr().err


@pytest.mark.parametrize("step", ["1e-3", "1e-9"])
def test_gradcheck_step_outside_range_is_config_error(tmp_path, step):
    cfg = tmp_path / "g.txt"
    cfg.write_text(f"gradcheck_step = {step}\n")
    assert run(tmp_path, "gradcheck", "--config", str(cfg)) == 1
    assert not (tmp_path / "out" / "gradcheck.csv").exists()


def test_collapse_study_outputs(tmp_path, small_config):
    assert run(tmp_path, "collapse-study", "--config", str(small_config)) == 0
    out = tmp_path / "out"
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["wirings"]) == {"PureSAN", "SanMlp", "StandardSkip", "MitiResidual"}
    rows = read_csv(out / "collapse_PureSAN.csv")
    assert rows[0][0] == "seed" and len(rows) == 1 + 3 * 5
    first = (out / "summary.json").read_bytes()
    assert run(tmp_path, "collapse-study", "--config", str(small_config)) == 0
    assert (out / "summary.json").read_bytes() == first


def test_collapse_study_with_zero_layers_has_only_input_rows(tmp_path, small_config):
    cfg = tmp_path / "z.txt"
    cfg.write_text(SMALL + "probe_depth = 0\n")
    assert run(tmp_path, "collapse-study", "--config", str(cfg), "--wiring", "PureSAN") == 0
    rows = read_csv(tmp_path / "out" / "collapse_PureSAN.csv")
    layer = rows[0].index("layer")
    assert len(rows) == 1 + 3 and all(r[layer] == "0" for r in rows[1:])
    assert not (tmp_path / "out" / "collapse_SanMlp.csv").exists()
