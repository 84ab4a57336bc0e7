"""CLI tests: exit codes, validation-before-output, and the full pipeline."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from clearwater import cli
import clearwater.dataset as dst


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared dataset + 2-step checkpoint so each test avoids retraining."""
    root = tmp_path_factory.mktemp("cli")
    rc = cli.main(["generate", "--out", str(root / "ds"), "--views", "3",
                   "--size", "12x12", "--seed", "7"])
    assert rc == 0
    config = root / "tiny.toml"
    config.write_text(
        "[train]\nrays_per_batch = 8\nsamples_per_ray = 8\nepochs = 2\n"
        "checkpoint_every = 0\n\n"
        "[encoder]\nlevels = 4\ntable_size = 256\nmax_resolution = 32\n")
    rc = cli.main(["train", "--data", str(root / "ds"), "--config", str(config),
                   "--out", str(root / "run" / "model.npz")])
    assert rc == 0
    return root


class TestGenerate:
    def test_writes_loadable_dataset(self, workdir):
        ds = dst.load_dataset(str(workdir / "ds"))
        assert len(ds) == 3 and ds.width == 12
        clean = sorted(os.listdir(workdir / "ds" / "clean"))
        assert len(clean) == 3

    def test_rejects_malformed_size(self, tmp_path, capsys):
        rc = cli.main(["generate", "--out", str(tmp_path / "d"), "--size", "64"])
        assert rc == 2
        assert "--size" in capsys.readouterr().err
        assert not (tmp_path / "d").exists()

    def test_rejects_zero_views(self, tmp_path, capsys):
        rc = cli.main(["generate", "--out", str(tmp_path / "d"), "--views", "0"])
        assert rc == 2
        assert "--views" in capsys.readouterr().err

    def test_rejects_unknown_scene_key(self, tmp_path, capsys):
        scene = tmp_path / "s.toml"
        scene.write_text("[plane]\nz = 0.0\ntilt = 3.0\n")
        rc = cli.main(["generate", "--scene", str(scene), "--out", str(tmp_path / "d")])
        assert rc == 2
        assert "tilt" in capsys.readouterr().err
        assert not (tmp_path / "d").exists()

    def test_rejects_unknown_trajectory_kind(self, tmp_path, capsys):
        scene = tmp_path / "s.toml"
        scene.write_text('[trajectory]\nkind = "spiral"\n\n[plane]\nz = 0.0\n')
        rc = cli.main(["generate", "--scene", str(scene), "--out", str(tmp_path / "d")])
        assert rc == 2
        assert "spiral" in capsys.readouterr().err

    def test_rejects_orbit_keys_under_survey_kind(self, tmp_path, capsys):
        scene = tmp_path / "s.toml"
        scene.write_text('[trajectory]\nkind = "survey"\norbit_radius = 0.3\n\n'
                         '[plane]\nz = 0.0\n')
        rc = cli.main(["generate", "--scene", str(scene), "--out", str(tmp_path / "d")])
        assert rc == 2
        assert "orbit_radius" in capsys.readouterr().err

    def test_survey_scene_generates_two_rings(self, tmp_path):
        out = str(tmp_path / "d")
        rc = cli.main(["generate", "--out", out, "--views", "4", "--size", "8x8",
                       "--seed", "1"])
        assert rc == 0
        ds = dst.load_dataset(out)
        alts = sorted(abs(ds.camera(i).center[2]) for i in range(4))
        np.testing.assert_allclose(alts, [1.0, 1.0, 3.0, 3.0])

    def test_rejects_empty_scene(self, tmp_path, capsys):
        scene = tmp_path / "s.toml"
        scene.write_text("[camera]\nfov_deg = 50.0\n")
        rc = cli.main(["generate", "--scene", str(scene), "--out", str(tmp_path / "d")])
        assert rc == 2
        assert "plane" in capsys.readouterr().err

    def test_missing_water_file(self, tmp_path, capsys):
        rc = cli.main(["generate", "--water", str(tmp_path / "none.toml"),
                       "--out", str(tmp_path / "d")])
        assert rc == 2
        assert not (tmp_path / "d").exists()


class TestTrain:
    def test_checkpoint_and_log_exist(self, workdir):
        out = workdir / "run"
        assert (out / "model.npz").exists()
        lines = (out / "model.npz.loss.csv").read_text().strip().splitlines()
        assert lines[0].startswith("step,loss") and len(lines) == 3

    def test_bad_config_fails_before_output(self, workdir, tmp_path, capsys):
        config = tmp_path / "bad.toml"
        config.write_text("[train]\nlr = 0.5\n")
        rc = cli.main(["train", "--data", str(workdir / "ds"),
                       "--config", str(config), "--out", str(tmp_path / "r" / "m.npz")])
        assert rc == 2
        assert "train.lr" in capsys.readouterr().err
        assert not (tmp_path / "r").exists()

    def test_missing_dataset(self, tmp_path, capsys):
        rc = cli.main(["train", "--data", str(tmp_path / "nowhere"),
                       "--out", str(tmp_path / "m.npz")])
        assert rc == 2
        assert not (tmp_path / "m.npz").exists()

    def test_missing_resume_checkpoint(self, workdir, tmp_path, capsys):
        rc = cli.main(["train", "--data", str(workdir / "ds"),
                       "--resume", str(tmp_path / "none.npz"),
                       "--out", str(tmp_path / "m.npz")])
        assert rc == 2
        assert "resume" in capsys.readouterr().err

    def test_prints_water_estimates(self, workdir, tmp_path, capsys):
        config = workdir / "tiny.toml"
        rc = cli.main(["train", "--data", str(workdir / "ds"), "--config", str(config),
                       "--out", str(tmp_path / "m.npz")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "beta:" in out and "backscatter:" in out


class TestCorrect:
    def test_emits_frame_per_view_with_previews(self, workdir, tmp_path):
        out = tmp_path / "fixed"
        rc = cli.main(["correct", "--data", str(workdir / "ds"),
                       "--ckpt", str(workdir / "run" / "model.npz"),
                       "--out", str(out), "--samples", "8"])
        assert rc == 0
        names = sorted(f for f in os.listdir(out) if f.endswith(".png"))
        assert names == sorted(os.listdir(workdir / "ds" / "images"))
        assert sorted(os.listdir(out / "previews")) == names
        img = dst.read_png16(str(out / names[0]))
        assert img.shape == (12, 12, 3)

    def test_rerun_overwrites_cleanly(self, workdir, tmp_path):
        out = tmp_path / "fixed"
        argv = ["correct", "--data", str(workdir / "ds"),
                "--ckpt", str(workdir / "run" / "model.npz"),
                "--out", str(out), "--samples", "8"]
        assert cli.main(argv) == 0
        assert cli.main(argv) == 0
        assert len([f for f in os.listdir(out) if f.endswith(".png")]) == 3

    def test_missing_checkpoint(self, workdir, tmp_path, capsys):
        rc = cli.main(["correct", "--data", str(workdir / "ds"),
                       "--ckpt", str(tmp_path / "none.npz"), "--out", str(tmp_path / "f")])
        assert rc == 2
        assert not (tmp_path / "f").exists()


class TestRender:
    def test_frame_index_pose(self, workdir, tmp_path):
        out = tmp_path / "v.png"
        rc = cli.main(["render", "--data", str(workdir / "ds"),
                       "--ckpt", str(workdir / "run" / "model.npz"),
                       "--pose", "1", "--mode", "underwater",
                       "--out", str(out), "--samples", "8"])
        assert rc == 0
        assert out.exists() and (tmp_path / "v_preview.png").exists()

    def test_pose_file(self, workdir, tmp_path):
        ds = dst.load_dataset(str(workdir / "ds"))
        pose_file = tmp_path / "pose.json"
        pose_file.write_text(json.dumps({"transform": ds.frames[0].pose.ravel().tolist()}))
        out = tmp_path / "v.png"
        rc = cli.main(["render", "--data", str(workdir / "ds"),
                       "--ckpt", str(workdir / "run" / "model.npz"),
                       "--pose", str(pose_file), "--out", str(out), "--samples", "8"])
        assert rc == 0
        assert out.exists()

    def test_pose_index_out_of_range(self, workdir, tmp_path, capsys):
        rc = cli.main(["render", "--data", str(workdir / "ds"),
                       "--ckpt", str(workdir / "run" / "model.npz"),
                       "--pose", "9", "--out", str(tmp_path / "v.png")])
        assert rc == 2
        assert "out of range" in capsys.readouterr().err

    def test_pose_file_wrong_length(self, workdir, tmp_path, capsys):
        pose_file = tmp_path / "pose.json"
        pose_file.write_text("[1, 2, 3]")
        rc = cli.main(["render", "--data", str(workdir / "ds"),
                       "--ckpt", str(workdir / "run" / "model.npz"),
                       "--pose", str(pose_file), "--out", str(tmp_path / "v.png")])
        assert rc == 2
        assert "16" in capsys.readouterr().err


class TestEvaluate:
    def test_identical_sets_score_zero(self, workdir, tmp_path):
        report = tmp_path / "r.csv"
        clean = str(workdir / "ds" / "clean")
        rc = cli.main(["evaluate", "--pred", clean, "--ref", clean,
                       "--report", str(report)])
        assert rc == 0
        rows = report.read_text().strip().splitlines()
        assert rows[0] == "file,mse_a,mse_b,angular_error_rad"
        assert len(rows) == 5 and rows[-1].startswith("mean,")
        vals = np.array([r.split(",")[1:] for r in rows[1:]], dtype=float)
        # self-angle can round to ~1e-8 through arccos; the Lab MSEs are exact
        np.testing.assert_array_equal(vals[:, :2], 0.0)
        assert np.all(vals[:, 2] < 1e-6)

    def test_reports_per_frame_errors(self, workdir, tmp_path):
        report = tmp_path / "r.csv"
        rc = cli.main(["evaluate", "--pred", str(workdir / "ds" / "clean"),
                       "--ref", str(workdir / "ds" / "images"),
                       "--report", str(report)])
        assert rc == 0
        rows = report.read_text().strip().splitlines()
        mean = [float(v) for v in rows[-1].split(",")[1:]]
        assert all(v > 0 for v in mean)

    def test_unmatched_basenames_listed(self, workdir, tmp_path, capsys):
        pred = tmp_path / "pred"
        pred.mkdir()
        (pred / "odd_name.png").write_bytes(b"")
        rc = cli.main(["evaluate", "--pred", str(pred),
                       "--ref", str(workdir / "ds" / "clean"),
                       "--report", str(tmp_path / "r.csv")])
        assert rc == 2
        assert "odd_name.png" in capsys.readouterr().err
        assert not (tmp_path / "r.csv").exists()

    def test_missing_directory(self, tmp_path, capsys):
        rc = cli.main(["evaluate", "--pred", str(tmp_path / "a"),
                       "--ref", str(tmp_path / "b"), "--report", str(tmp_path / "r.csv")])
        assert rc == 2


class TestTopLevel:
    def test_threads_must_be_positive(self, capsys):
        rc = cli.main(["--threads", "0", "generate", "--out", "x"])
        assert rc == 2
        assert "--threads" in capsys.readouterr().err

    def test_console_script_help(self):
        proc = subprocess.run([sys.executable, "-m", "clearwater.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        for word in ("generate", "train", "correct", "render", "evaluate"):
            assert word in proc.stdout

    def test_demo_configs_parse(self):
        import clearwater.training as tr

        scene, camera, trajectory = cli._scene_from_toml(cli.demo_path("scene.toml"))
        assert camera["fov_deg"] == 50.0
        water, light = cli._water_from_toml(cli.demo_path("water.toml"))
        np.testing.assert_allclose(water.beta, [0.40, 0.10, 0.05])
        config = tr.load_config(cli.demo_path("train.toml"))
        assert config.epochs == 5000 and config.rays_per_batch == 256
