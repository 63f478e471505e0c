from pathlib import Path

import numpy as np
import pytest

from patchedit import io as pio
from patchedit.denoiser import make_denoiser
from patchedit.exceptions import ConfigError, NumericDivergenceError, TilingError
from patchedit.inversion import invert, reverse, rms
from patchedit.patchgrid import downsample, merge, split, upsample_to_canvas
from patchedit.pipeline import (
    AssetSpec,
    EditJob,
    IdentityCodec,
    ablate_tau,
    apply_edit,
    generate_assets,
    hue_rotate,
    luma,
    procedural_texture,
    reconstruction_error,
    run_edit,
)
from patchedit.schedule import make_cosine_schedule
from patchedit.transfer import OptConfig

JOBS = Path(__file__).resolve().parents[1] / "jobs"
DENOISER = {"kind": "analytic", "mean": 0.5, "variance": 0.05, "correlation_length": 3.0}


def make_job(tmp_path, transform="identity", family="gradient-noise", seed=2, size=(32, 16), **kw):
    paths = generate_assets(AssetSpec(family, size[0], size[1], seed=seed, transform=transform), tmp_path / "assets")
    args = dict(denoiser=dict(DENOISER), T=50, patch_h=16, patch_w=16, tau=15, workers=1)
    args.update(kw)
    return EditJob(paths["source_high"], paths["reference_low"], tmp_path / "run", paths["mask"], **args)


class TestJobFile:
    def test_shipped_job_parses(self):
        job = EditJob.from_file(JOBS / "two_patch.job")
        assert job.T == 50 and job.tau == 15 and job.sync and job.nulltext
        assert job.denoiser == {"kind": "analytic", "mean": 0.5, "variance": 0.05, "correlation_length": 3.0}
        assert job.source_high == JOBS / "two_patch" / "source_high.ppm"
        assert job.output_dir == JOBS / "runs" / "two_patch"
        assert job.workers == 2 and job.opt.iters == 100

    def test_defaults(self):
        job = EditJob.from_dict({"io": {"source_high": "a.ppm", "reference_low": "b.ppm"}}, base_dir="/x", name="j")
        assert job.output_dir == Path("/x/runs/j") and job.mask is None
        assert job.denoiser == {"kind": "analytic"} and not job.nulltext_reference

    @pytest.mark.parametrize(
        "sections,match",
        [
            ({"io": {"source_high": "a"}}, "reference_low"),
            ({"io": {"source_high": "a", "reference_low": "b"}, "extra": {}}, "sections"),
            ({"io": {"source_high": "a", "reference_low": "b"}, "transfer": {"taus": "3"}}, "keys"),
            ({"io": {"source_high": "a", "reference_low": "b"}, "schedule": {"t": "ten"}}, "bad job value"),
            ({"io": {"source_high": "a", "reference_low": "b"}, "sync": {"enabled": "maybe"}}, "boolean"),
            ({"io": {"source_high": "a", "reference_low": "b"}, "transfer": {"tau": "60"}}, "tau"),
            ({"io": {"source_high": "a", "reference_low": "b"}, "nulltext": {"mode": "magic"}}, "mode"),
        ],
    )
    def test_errors(self, sections, match):
        with pytest.raises(ConfigError, match=match):
            EditJob.from_dict(sections)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            EditJob.from_file(tmp_path / "nope.job")

    def test_malformed_file(self, tmp_path):
        p = tmp_path / "bad.job"
        p.write_text("no section header\n")
        with pytest.raises(ConfigError, match="malformed"):
            EditJob.from_file(p)


class TestAssets:
    def test_constant_identity(self, tmp_path):
        paths = generate_assets(AssetSpec("constant", 16, 16, seed=4), tmp_path)
        assert pio.read_image(paths["reference_low"]).tobytes() == pio.read_image(paths["source_low"]).tobytes()
        assert np.all(pio.read_image(paths["mask"]) == 1.0)

    def test_same_seed_same_bytes(self, tmp_path):
        spec = AssetSpec("checker", 16, 16, seed=9, transform="pattern-substitution")
        a = generate_assets(spec, tmp_path / "a")
        b = generate_assets(spec, tmp_path / "b")
        for k in a:
            assert a[k].read_bytes() == b[k].read_bytes()

    def test_low_is_downsampled_high(self, tmp_path):
        paths = generate_assets(AssetSpec("striped", 16, 16, seed=1), tmp_path)
        low = downsample(pio.read_image(paths["source_high"]), 2)
        assert np.max(np.abs(pio.read_image(paths["source_low"]) - low)) <= 0.5 / 65535 + 1e-7

    @pytest.mark.parametrize("family", ["constant", "striped", "checker", "gradient-noise"])
    def test_hue_rotation_preserves_luma(self, family):
        img = procedural_texture(family, 16, 16, 3, seed=3)
        rot = hue_rotate(img, 90.0)
        assert np.max(np.abs(luma(rot) - luma(img))) <= 1e-6
        assert rot.min() >= -1e-12 and rot.max() <= 1 + 1e-12

    def test_hue_rotation_changes_color(self):
        img = procedural_texture("checker", 8, 8, 3, seed=0)
        assert np.max(np.abs(hue_rotate(img, 90.0) - img)) > 0.01
        np.testing.assert_allclose(hue_rotate(img, 0.0), img, atol=1e-12)

    def test_edit_region(self):
        low = procedural_texture("gradient-noise", 8, 8, 3, seed=0)
        out, region = apply_edit(AssetSpec("gradient-noise", 16, 16, transform="pattern-substitution"), low)
        assert region.sum() == 16 and region[2:6, 2:6].all()
        assert np.array_equal(out[:, ~region], low[:, ~region])

    @pytest.mark.parametrize(
        "kw",
        [dict(family="plasma"), dict(transform="blur"), dict(channels=1, transform="hue-rotation"), dict(height=15)],
    )
    def test_bad_spec(self, kw):
        with pytest.raises(ConfigError):
            AssetSpec(**kw)


def test_identity_codec(rng):
    x = rng.uniform(size=(3, 4, 4))
    c = IdentityCodec()
    assert np.array_equal(c.decode(c.encode(x)), x.astype(np.float32))


class TestRunEdit:
    def test_identity_edit_reconstructs_source(self, tmp_path):
        job = make_job(tmp_path)
        src = pio.read_image(job.source_high)
        d = make_denoiser(DENOISER, (3, 16, 16), make_cosine_schedule(50))
        baseline = max(reconstruction_error(d, p) for p in split(src, 16).patches)
        rep = run_edit(job)
        assert rms(rep.output, src) <= 2 * baseline

    def test_tau_zero_is_plain_reverse(self, tmp_path):
        job = make_job(tmp_path, transform="pattern-substitution", tau=0, sync=False, nulltext=False)
        rep = run_edit(job)
        src = pio.read_image(job.source_high)
        ref_up = upsample_to_canvas(pio.read_image(job.reference_low), src.shape[1:])
        d = make_denoiser(DENOISER, (3, 16, 16), make_cosine_schedule(50))
        grid = split(ref_up, 16)
        plain = np.stack([reverse(d, invert(d, p)[50])[0] for p in grid.patches])
        assert np.array_equal(rep.output, merge(grid.with_patches(plain)))

    def test_run_directory(self, tmp_path):
        job = make_job(tmp_path, transform="pattern-substitution")
        rep = run_edit(job)
        names = {p.relative_to(rep.output_dir).as_posix() for p in rep.output_dir.rglob("*") if p.is_file()}
        assert {"output.ppm", "output.tgd", "losses.tsv", "metrics.tsv", "report.txt", "manifest.json"} <= names
        assert {"transfer/patch000_weights.tgd", "transfer/patch001_biases.tgd"} <= names
        assert set(rep.manifest["artifacts"]) == names - {"manifest.json"}
        assert np.array_equal(pio.read_tensor(rep.output_dir / "output.tgd"), rep.output)
        table = (rep.output_dir / "metrics.tsv").read_text().splitlines()
        assert [line.split("\t")[:2] for line in table[1:]] == [["mse", "masked"], ["psnr", "masked"], ["ssim", "masked"], ["seam", "full"]]
        losses = (rep.output_dir / "losses.tsv").read_text().splitlines()
        assert losses[0] == "patch\tt\titer\tloss" and len(losses) > 1
        assert rep.seam is not None and rep.max_final_loss >= 0

    def test_deterministic_hashes(self, tmp_path):
        job = make_job(tmp_path, transform="hue-rotation", size=(32, 32), workers=3)
        a = run_edit(job, tmp_path / "a").manifest
        b = run_edit(job, tmp_path / "b").manifest
        assert a == b

    def test_error_file_names_stage(self, tmp_path):
        job = make_job(tmp_path)
        bad = job.with_overrides(patch_h=12)
        with pytest.raises(TilingError):
            run_edit(bad)
        text = (job.output_dir / "error.txt").read_text()
        assert "stage\tfit" in text and "TilingError" in text

    def test_missing_input(self, tmp_path):
        job = make_job(tmp_path).with_overrides(source_high=tmp_path / "none.ppm")
        with pytest.raises(OSError):
            run_edit(job)
        assert "stage\tload" in (job.output_dir / "error.txt").read_text()

    def test_non_integer_factor(self, tmp_path):
        job = make_job(tmp_path)
        odd = tmp_path / "odd.ppm"
        pio.write_image(np.zeros((3, 10, 8), np.float32), odd)
        with pytest.raises(ConfigError, match="integer downscale"):
            run_edit(job.with_overrides(reference_low=odd))

    def test_divergence_reports_patch_and_timestep(self, tmp_path, monkeypatch):
        import patchedit.pipeline as pl

        real = pl.inject_reverse_step

        def poisoned(tf, d, y, t, **kw):
            out = real(tf, d, y, t, **kw)
            return out * np.nan if (t == 5 and tf.patch_id == 1) else out

        monkeypatch.setattr(pl, "inject_reverse_step", poisoned)
        job = make_job(tmp_path, transform="pattern-substitution")
        with pytest.raises(NumericDivergenceError):
            run_edit(job)
        lines = dict(line.split("\t", 1) for line in (job.output_dir / "error.txt").read_text().splitlines())
        assert lines["stage"] == "sample" and lines["patch_id"] == "1" and lines["timestep"] == "4"

    def test_tau_sweep(self, tmp_path):
        job = make_job(tmp_path, transform="pattern-substitution", opt=OptConfig(iters=20))
        rows = ablate_tau(job, [0, 10], tmp_path / "sweep")
        assert [r[0] for r in rows] == [0, 10]
        assert all(np.isfinite(r[1]) for r in rows)
        assert (tmp_path / "sweep" / "tau010" / "report.txt").exists()
