import numpy as np
import pytest

from baafseg.cli import main
from baafseg.config import Level, ModelConfig, TrainConfig, dump_config
from baafseg.data import load_cloud
from baafseg.diagnostics import compactness_ok, diagnose
from baafseg.model import BAAFNet
from baafseg.train import save_checkpoint

TINY = ModelConfig(levels=(Level(4, 8), Level(16, 16)), decoder_dim=8, head_dims=(16, 8),
                   num_classes=4, aug_loss_weights=(0.1, 0.1))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def values(out):
    return dict(line.split("=", 1) for line in out.splitlines() if "=" in line)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(dump_config(TINY, TrainConfig(epochs=2, crops=2, crop_size=256)))
    assert main(["gen-synthetic", "--out", str(d / "scene.txt"), "--classes", "4", "--points", "512"]) == 0
    assert main(["train", "--config", str(d / "tiny.cfg"), "--data", str(d / "scene.txt"),
                 "--out-checkpoint", str(d / "m.ckpt"), "--log", str(d / "log.txt")]) == 0
    return d


def test_gen_synthetic_byte_identical(tmp_path, capsys):
    for name in ("a.txt", "b.txt"):
        assert run(capsys, "gen-synthetic", "--out", tmp_path / name, "--seed", 3)[0] == 0
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_gen_synthetic_counts(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-synthetic", "--out", tmp_path / "s.pcsb", "--points", 4096, "--classes", 5)
    cloud = load_cloud(tmp_path / "s.pcsb")
    assert code == 0 and len(cloud) == 4096 and values(out)["written"] == "4096"
    assert set(np.unique(cloud.labels)) == set(range(5))


def test_train_outputs(workspace, capsys):
    lines = (workspace / "log.txt").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("0, ")


def test_train_echoes_config(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--config", workspace / "tiny.cfg", "--data", workspace / "scene.txt",
                       "--out-checkpoint", tmp_path / "m.ckpt", "--epochs", 1)
    v = values(out)
    assert code == 0 and v["config.train.epochs"] == "1" and v["steps"] == "2"
    assert "config.model.k" in v and "final_loss" in v


def test_eval_report(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", workspace / "m.ckpt", "--data", workspace / "scene.txt",
                       "--report", tmp_path / "r.txt")
    v = values(out)
    assert code == 0 and 0 <= float(v["oa"]) <= 1 and "iou_3" in v
    assert (tmp_path / "r.txt").read_text().startswith("oa=")


def test_eval_ground_truth_scores_one(tmp_path, capsys, monkeypatch):
    """A model that echoes the ground truth must score exactly 1."""
    assert run(capsys, "gen-synthetic", "--out", tmp_path / "s.txt", "--points", 256, "--classes", 4)[0] == 0
    truth = load_cloud(tmp_path / "s.txt").labels
    monkeypatch.setattr(BAAFNet, "predict", lambda self, p, c=None: truth)
    model = BAAFNet(TINY)
    save_checkpoint(tmp_path / "m.ckpt", model, TrainConfig())
    code, out, _ = run(capsys, "eval", "--checkpoint", tmp_path / "m.ckpt", "--data", tmp_path / "s.txt")
    v = values(out)
    assert code == 0 and float(v["oa"]) == 1.0 and float(v["miou"]) == 1.0


def test_infer_one_label_per_point(workspace, tmp_path, capsys):
    code, _, _ = run(capsys, "infer", "--checkpoint", workspace / "m.ckpt", "--in", workspace / "scene.txt",
                     "--out-labels", tmp_path / "p.txt")
    labels = (tmp_path / "p.txt").read_text().splitlines()
    assert code == 0 and len(labels) == 512 and all(0 <= int(x) < 4 for x in labels)


@pytest.mark.parametrize("grid,count", [("block", 7), ("fusion", 6)])
def test_ablate_table(workspace, tmp_path, capsys, grid, count):
    argv = ["ablate", "--grid", grid, "--data", workspace / "scene.txt", "--epochs", 1,
            "--config", workspace / "tiny.cfg"]
    code, out, _ = run(capsys, *argv, "--report", tmp_path / "a.txt")
    table = (tmp_path / "a.txt").read_text().splitlines()
    assert code == 0 and table[0] == "variant oa miou" and len(table) == count + 1
    assert sum(k.startswith("ablate.") for k in values(out)) == 2 * count
    if grid == "fusion":
        run(capsys, *argv, "--report", tmp_path / "b.txt")
        assert (tmp_path / "b.txt").read_text() == (tmp_path / "a.txt").read_text()


def test_diagnose_untrained_reports_no_change(tmp_path, capsys):
    save_checkpoint(tmp_path / "m.ckpt", BAAFNet(TINY), TrainConfig())
    run(capsys, "gen-synthetic", "--out", tmp_path / "s.txt", "--points", 256, "--classes", 4)
    code, out, _ = run(capsys, "diagnose", "--checkpoint", tmp_path / "m.ckpt", "--data", tmp_path / "s.txt")
    rows = [line for line in out.splitlines() if line.startswith("level=")]
    assert code == 0 and len(rows) == 2 * len(TINY.levels)
    for row in rows:
        fields = dict(kv.split("=") for kv in row.split())
        assert float(fields["dist_change"]) == 0 and float(fields["var_change"]) == 0
    assert out.rstrip().endswith("compact=true")


def test_diagnose_rows_and_ordering():
    rng = np.random.default_rng(0)
    model = BAAFNet(TINY)
    for block in model.encoder.blocks:
        for p in block.parameters():
            if not p.data.any():
                p.data[...] = rng.normal(scale=0.3, size=p.shape)
    rows = diagnose(model, rng.random((256, 3)), rng.random((256, 3)))
    assert [(r.level, r.space) for r in rows] == [(1, "3d"), (1, "feature"), (2, "3d"), (2, "feature")]
    assert any(r.dist_change != 0 for r in rows)
    assert compactness_ok(rows) == all(r.dist_change <= 0 for r in rows if r.space == "3d")


def test_missing_file_is_one_line_error(tmp_path, capsys):
    code, out, err = run(capsys, "eval", "--checkpoint", tmp_path / "nope.ckpt", "--data", tmp_path / "x.txt")
    assert code == 1 and err.startswith("error: ") and err.count("\n") == 1


def test_unlabeled_eval_errors(workspace, tmp_path, capsys):
    (tmp_path / "u.txt").write_text("0 0 0\n1 1 1\n")
    code, _, err = run(capsys, "eval", "--checkpoint", workspace / "m.ckpt", "--data", tmp_path / "u.txt")
    assert code == 1 and "no labels" in err


def test_bad_config_key(workspace, tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("model.bogus = 1\n")
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.cfg", "--data", workspace / "scene.txt",
                       "--out-checkpoint", tmp_path / "m.ckpt")
    assert code == 1 and "ConfigError" in err


def test_usage_errors_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2 and "error: usage:" in capsys.readouterr().err


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--help"])
    out = capsys.readouterr().out
    assert exc.value.code == 0 and all(f in out for f in ("--grid", "--data", "--epochs", "--seed"))
