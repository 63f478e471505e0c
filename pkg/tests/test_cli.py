import shutil
from pathlib import Path

import numpy as np
import pytest

from patchedit import io as pio
from patchedit.cli import main

JOBS = Path(__file__).resolve().parents[1] / "jobs"


@pytest.fixture
def job_copy(tmp_path):
    shutil.copytree(JOBS / "two_patch", tmp_path / "two_patch")
    text = (JOBS / "two_patch.job").read_text().replace("iters = 100", "iters = 20")
    (tmp_path / "two_patch.job").write_text(text)
    return tmp_path / "two_patch.job"


def test_unknown_flag(capsys):
    assert main(["edit", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand(capsys):
    assert main([]) == 1


def test_generate_and_metrics(tmp_path, capsys):
    out = tmp_path / "a"
    assert main(["generate-assets", "--family", "checker", "--transform", "hue-rotation", "--height", "16", "--width", "16", "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["metrics", "--a", str(out / "source_low.ppm"), "--b", str(out / "reference_low.ppm")]) == 1  # 8x8 < SSIM window
    err = capsys.readouterr().err
    assert "SSIM window" in err


def test_metrics_masked(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    pio.write_image(a, tmp_path / "x.ppm", bit_depth=16)
    pio.write_image(np.clip(a + 0.05, 0, 1), tmp_path / "y.ppm", bit_depth=16)
    pio.write_image(np.ones((1, 16, 16), np.float32), tmp_path / "m.pgm")
    assert main(["metrics", "--a", str(tmp_path / "x.ppm"), "--b", str(tmp_path / "y.ppm"), "--mask", str(tmp_path / "m.pgm"), "--grid", "2x2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "metric\tregion\tvalue"
    assert [line.split("\t")[:2] for line in lines[1:]] == [["mse", "masked"], ["psnr", "masked"], ["ssim", "masked"], ["seam", "full"]]


def test_invert(tmp_path, capsys):
    pio.write_image(np.full((1, 8, 8), 0.5, np.float32), tmp_path / "g.pgm")
    assert main(["invert", "--image", str(tmp_path / "g.pgm"), "--T", "10", "--out", str(tmp_path / "traj.tgd")]) == 0
    key, value = capsys.readouterr().out.strip().split("\t")
    assert key == "reconstruction_rms" and 0 <= float(value) < 1e-2
    assert pio.read_tensor(tmp_path / "traj.tgd").shape == (11, 1, 8, 8)


def test_edit(job_copy, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["edit", "--job", str(job_copy), "--out", str(out)]) == 0
    assert (out / "output.ppm").exists() and (out / "report.txt").exists()
    assert "seam\tfull" in capsys.readouterr().out


def test_missing_job(tmp_path, capsys):
    assert main(["edit", "--job", str(tmp_path / "none.job")]) == 1


def test_ablate_sync(job_copy, tmp_path, capsys):
    assert main(["ablate-sync", "--job", str(job_copy), "--out", str(tmp_path / "ab")]) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
    assert rows[0] == ["sync", "seam", "psnr", "ssim"]
    assert float(rows[1][1]) < float(rows[2][1])


def test_divergence_exit_code(job_copy, tmp_path, monkeypatch):
    import patchedit.pipeline as pl

    real = pl.inject_reverse_step
    monkeypatch.setattr(pl, "inject_reverse_step", lambda tf, d, y, t, **kw: real(tf, d, y, t, **kw) * (np.nan if t == 3 else 1))
    assert main(["edit", "--job", str(job_copy), "--out", str(tmp_path / "r")]) == 2
