import csv
import subprocess
import sys

import numpy as np
import pytest

from s3f import io
from s3f.cli import main
from s3f.config import Config
from s3f.experiments import gt_arrays
from s3f.extract import chamfer
from s3f.geometry import body_sdf, surface_samples
from s3f.gradsuite import micro_config
from s3f.model import S3FModel
from s3f.scenes import list_scenes, load_scene
from s3f.train import save_model


@pytest.fixture(scope="module")
def scenes_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes")
    assert main(["gen-scenes", "--count", "2", "--seed", "7", "--out", str(d), "--image_size=32"]) == 0
    return d


@pytest.fixture(scope="module")
def zero_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    save_model(path, S3FModel(micro_config().updated(mc_resolution=48)))
    return path


def test_gen_scenes_deterministic(scenes_dir, tmp_path):
    assert main(["gen-scenes", "--count", "2", "--seed", "7", "--out", str(tmp_path), "--image_size=32"]) == 0
    a, b = list_scenes(scenes_dir), list_scenes(tmp_path)
    assert [p.name for p in a] == [p.name for p in b] == ["scene_7000", "scene_7001"]
    for pa, pb in zip(a, b):
        for f in ("rgb.ppm", "mask.pgm", "camera.txt", "body.txt", "light.txt", "gt_surface.bin", "gt_labels.bin"):
            assert (pa / f).read_bytes() == (pb / f).read_bytes()


def test_reconstruct_zero_init_is_body(scenes_dir, zero_ckpt, tmp_path, capsys):
    scene = list_scenes(scenes_dir)[0]
    out = tmp_path / "r.ply"
    assert main(["reconstruct", "--checkpoint", str(zero_ckpt), "--scene", str(scene), "--out", str(out)]) == 0
    V, F, extra = io.read_ply(out)
    body = load_scene(scene).body()
    lo, hi = body.bbox(Config().mc_pad)
    cell = float(np.max((hi - lo) / 48))
    gt = surface_samples(body, 20000, np.random.default_rng(0))
    assert len(F) > 0 and np.isfinite(V).all()
    assert np.sqrt(chamfer(V, gt)) < 2 * cell
    assert np.abs(body_sdf(V, body)).max() < 2 * cell
    assert "wrote" in capsys.readouterr().out


def test_eval_identical_prediction(scenes_dir, tmp_path, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    for p in list_scenes(scenes_dir):
        b = load_scene(p)
        pts, nrm, alb, shd, _ = gt_arrays(b)
        io.write_ply(pred / f"{b.scene_id}.ply", pts, np.zeros((0, 3), int), nrm, alb, shd)
    out = tmp_path / "m.csv"
    assert main(["eval", "--pred", str(pred), "--scenes", str(scenes_dir), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 2
    for r in rows:
        assert float(r["chamfer_e3"]) < 1e-6
        assert float(r["iou"]) == 1.0
        assert float(r["nc"]) == pytest.approx(1.0, abs=1e-5)
        assert float(r["psnr_albedo"]) > 45
    assert "----- metrics -----" in capsys.readouterr().out
    assert out.with_suffix(".png").exists()


def test_eval_missing_prediction_fails(scenes_dir, tmp_path):
    assert main(["eval", "--pred", str(tmp_path), "--scenes", str(scenes_dir), "--out", str(tmp_path / "m.csv")]) == 2
    assert not (tmp_path / "m.csv").exists()


def test_missing_checkpoint_nonzero_exit(scenes_dir, tmp_path, capsys):
    scene = list_scenes(scenes_dir)[0]
    code = main(["reconstruct", "--checkpoint", str(tmp_path / "none.ckpt"), "--scene", str(scene), "--out", str(tmp_path / "x.ply")])
    assert code != 0
    assert "not found" in capsys.readouterr().err
    assert not (tmp_path / "x.ply").exists()


def test_unknown_key_rejected(capsys):
    assert main(["gen-scenes", "--count", "0", "--bogus=1"]) != 0
    assert "bogus" in capsys.readouterr().err


def test_override_forms(tmp_path):
    assert main(["gen-scenes", "--count", "1", "--seed", "3", "--out", str(tmp_path), "--image_size", "24"]) == 0
    assert io.read_ppm(list_scenes(tmp_path)[0] / "rgb.ppm").shape == (24, 24, 3)


def test_help_lists_every_key():
    res = subprocess.run([sys.executable, "-m", "s3f.cli", "--help"], capture_output=True, text=True, check=True)
    for name in Config.__dataclass_fields__:
        assert f"  {name} " in res.stdout
    assert "gradcheck" in res.stdout
