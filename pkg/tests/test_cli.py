"""CLI workflows: exit codes, artifacts, determinism, config merge."""

import json
import math

import numpy as np
import pytest

from glassvol import fileio, scenes
from glassvol.cli import main
from glassvol.geom import look_at
from glassvol.raymarch import Camera
from glassvol.volprim import Scene

from conftest import make_camera, make_set, random_set


@pytest.fixture()
def scene_files(tmp_path, rng):
    scene = Scene(
        (("face", random_set(rng, n=3, m=4)), ("glasses", random_set(rng, n=2, m=4))),
        np.array([0.1, 0.1, 0.2]),
    )
    scene_path = tmp_path / "scene.json"
    cam_path = tmp_path / "camera.json"
    fileio.save_scene(scene_path, scene)
    fileio.save_camera(cam_path, make_camera(width=16, height=16))
    return scene_path, cam_path


class TestRenderCommand:
    def test_render_writes_image_and_log(self, scene_files, tmp_path):
        scene_path, cam_path = scene_files
        out = tmp_path / "img.pfm"
        code = main(["render", "--scene", str(scene_path), "--camera", str(cam_path),
                     "--out", str(out), "--step", "0.02"])
        assert code == 0
        assert out.exists()
        img = fileio.load_pfm(out)
        assert img.data.shape == (16, 16, 3)
        log = tmp_path / "img.pfm.log.jsonl"
        assert log.exists()
        rec = json.loads(log.read_text().splitlines()[0])
        assert rec["step"] == "render"

    def test_render_mask_flag(self, scene_files, tmp_path):
        scene_path, cam_path = scene_files
        out = tmp_path / "mask.pfm"
        code = main(["render", "--scene", str(scene_path), "--camera", str(cam_path),
                     "--out", str(out), "--mask", "glasses"])
        assert code == 0
        assert fileio.load_pfm(out).channels == 1

    def test_identical_argv_identical_bytes(self, scene_files, tmp_path):
        scene_path, cam_path = scene_files
        a, b = tmp_path / "a.pfm", tmp_path / "b.pfm"
        for out, workers in ((a, "1"), (b, "4")):
            main(["render", "--scene", str(scene_path), "--camera", str(cam_path),
                  "--out", str(out), "--step", "0.02", "--workers", workers])
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_flag_exits_2(self, scene_files, capsys):
        scene_path, cam_path = scene_files
        with pytest.raises(SystemExit) as exc:
            main(["render", "--scene", str(scene_path), "--camera", str(cam_path),
                  "--out", "x.pfm", "--bogus-flag", "1"])
        assert exc.value.code == 2

    def test_missing_scene_exits_3(self, tmp_path):
        cam = tmp_path / "cam.json"
        fileio.save_camera(cam, make_camera())
        code = main(["render", "--scene", str(tmp_path / "nope.json"),
                     "--camera", str(cam), "--out", str(tmp_path / "o.pfm")])
        assert code == 3

    def test_config_file_merge(self, scene_files, tmp_path):
        scene_path, cam_path = scene_files
        config = tmp_path / "conf.json"
        config.write_text(json.dumps({"step": 0.05}))
        out1 = tmp_path / "via_config.pfm"
        main(["render", "--config", str(config), "--scene", str(scene_path),
              "--camera", str(cam_path), "--out", str(out1)])
        out2 = tmp_path / "explicit.pfm"
        main(["render", "--scene", str(scene_path), "--camera", str(cam_path),
              "--out", str(out2), "--step", "0.05"])
        assert out1.read_bytes() == out2.read_bytes()
        # explicit flag wins over the config value
        out3 = tmp_path / "flag_wins.pfm"
        main(["render", "--config", str(config), "--scene", str(scene_path),
              "--camera", str(cam_path), "--out", str(out3), "--step", "0.02"])
        assert out3.read_bytes() != out1.read_bytes()


class TestGradcheckCommand:
    def test_passes_and_prints(self, capsys):
        code = main(["gradcheck", "--seed", "1", "--scenes", "3"])
        out = capsys.readouterr().out
        assert code == 0
        assert "max relative error" in out
        assert "passed" in out


class TestSynthTrainEvalFit:
    def test_synth_then_workflows(self, tmp_path, capsys):
        data = tmp_path / "data"
        code = main(["synth", "--seed", "7", "--out", str(data), "--size", "16",
                     "--cameras", "2", "--face-side", "3", "--glasses-prims", "8",
                     "--grid", "4", "--fully-lit", "2", "--group-lit", "1",
                     "--workers", "2"])
        assert code == 0
        assert (data / "manifest.json").exists()
        assert any((data / "frames").iterdir())

        ckpt = tmp_path / "geo.ckpt"
        code = main(["train", "--stage", "geometry", "--data", str(data),
                     "--out", str(ckpt), "--iters", "30", "--iters-face", "10",
                     "--latent-dim", "6", "--trunk-hidden", "16",
                     "--head-hidden", "12", "--embed-dim", "4", "--step", "0.06"])
        assert code == 0
        blocks, manifest = fileio.load_checkpoint(ckpt)
        assert manifest["stage"] == "geometry"
        assert manifest["dims"]["latent_dim"] == 6
        assert "roughness" in manifest

        ckpt2 = tmp_path / "app.ckpt"
        code = main(["train", "--stage", "appearance", "--data", str(data),
                     "--ckpt", str(ckpt), "--out", str(ckpt2), "--iters", "20",
                     "--iters-face", "10", "--step", "0.06"])
        assert code == 0
        assert ckpt2.exists()

        code = main(["eval", "--data", str(data), "--ckpt", str(ckpt)])
        out = capsys.readouterr().out
        assert code == 0
        assert "l1(↓)" in out and "PSNR(↑)" in out and "SSIM(↑)" in out

        # few-shot fit against renders of the trained model itself
        from glassvol.morph import decoders as dec
        from glassvol.morph import train as T
        from glassvol.raymarch import RenderConfig, render

        params, manifest = fileio.load_checkpoint(ckpt)
        cfg = dec.MorphConfig(**manifest["dims"])
        rng = np.random.default_rng(0)
        z = 0.2 * rng.standard_normal(2 * cfg.latent_dim)
        fields, _ = dec.decode_glasses(params, cfg, z[: cfg.latent_dim], z[cfg.latent_dim:])
        gscene = Scene((("glasses", T.make_set(fields)),), np.zeros(3))
        views = tmp_path / "views"
        views.mkdir()
        for i in range(2):
            eye = 1.8 * np.array([np.sin(i - 0.5), 0.2, np.cos(i - 0.5)])
            f = 8 / np.tan(np.radians(19))
            cam = Camera(np.array([[f, 0, 8], [0, f, 8], [0, 0, 1.0]]),
                         look_at(eye, np.zeros(3)), (16, 16))
            img = render(gscene, cam, RenderConfig(step_size=0.03))
            fileio.save_pfm(views / f"view{i}.pfm", img)
            fileio.save_camera(views / f"view{i}.camera.json", cam)
        fit_out = tmp_path / "fit.json"
        code = main(["fit", "--images", str(views), "--ckpt", str(ckpt),
                     "--views", "2", "--iters", "10", "--out", str(fit_out)])
        assert code == 0
        doc = json.loads(fit_out.read_text())
        assert len(doc["z_geo"]) == cfg.latent_dim

    def test_fit_missing_images_exits_3(self, tmp_path):
        ckpt = tmp_path / "c.ckpt"
        from glassvol.morph import decoders as dec

        cfg = dec.MorphConfig(latent_dim=4, face_prims=4, glasses_prims=8,
                              grid_resolution=3, trunk_hidden=8, head_hidden=8,
                              voxel_embed_dim=2, n_glasses_ids=3)
        params = dec.init_params(cfg, seed=0, face_layout=dec.ellipsoid_layout(2))
        from glassvol.cli import _save_ckpt

        _save_ckpt(ckpt, params, cfg)
        empty = tmp_path / "empty"
        empty.mkdir()
        code = main(["fit", "--images", str(empty), "--ckpt", str(ckpt),
                     "--out", str(tmp_path / "f.json")])
        assert code == 3


class TestRegisterCommand:
    def test_register_roundtrip(self, tmp_path, capsys):
        from conftest import grid_mesh, inverse_distance_weights

        mesh = grid_mesh(5, 5, scale=0.5)
        kp = np.stack([np.linspace(-0.4, 0.4, 20), np.full(20, 0.05), np.zeros(20)], axis=-1)
        weights = inverse_distance_weights(mesh.vertices, kp)
        fileio.save_obj(tmp_path / "m.obj", mesh.vertices, mesh.faces, mesh.normals)
        fileio.save_weights(tmp_path / "w.txt", weights.matrix)
        fileio.save_keypoints(tmp_path / "kp.json", {"keypoints3d": kp.tolist()})
        target = kp + np.array([0.01, -0.02, 0.005])
        fileio.save_keypoints(tmp_path / "tkp.json", {"keypoints3d": target.tolist()})
        out = tmp_path / "transforms.json"
        code = main(["register", "--mesh", str(tmp_path / "m.obj"),
                     "--weights", str(tmp_path / "w.txt"),
                     "--keypoints", str(tmp_path / "kp.json"),
                     "--target-keypoints", str(tmp_path / "tkp.json"),
                     "--iters", "400", "--lr", "1e-3", "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        assert np.asarray(doc["matrices"]).shape == (20, 3, 4)
        assert doc["keypoint_rms"] < 1e-3


class TestLensCommand:
    def test_lens_flat_identity(self, scene_files, tmp_path):
        scene_path, cam_path = scene_files
        ang = np.linspace(0, 2 * np.pi, 12, endpoint=False)
        boundary = np.stack([0.8 * np.cos(ang), 0.8 * np.sin(ang), np.full(12, 1.5)], axis=-1)
        lens_path = tmp_path / "lens.json"
        fileio.save_lens_spec(lens_path, {
            "boundary": boundary.tolist(), "focal_length": math.inf,
            "alpha": 1.0, "beta": 0.0, "plane_normal": [0, 0, 1],
        })
        out = tmp_path / "lensed.pfm"
        code = main(["lens", "--scene", str(scene_path), "--camera", str(cam_path),
                     "--lens", str(lens_path), "--out", str(out), "--step", "0.02"])
        assert code == 0
        plain = tmp_path / "plain.pfm"
        main(["render", "--scene", str(scene_path), "--camera", str(cam_path),
              "--out", str(plain), "--step", "0.02"])
        np.testing.assert_array_equal(
            fileio.load_pfm(out).data, fileio.load_pfm(plain).data
        )
