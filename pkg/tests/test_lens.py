"""Lens optics: boundary refinement, refraction, reflection, blended render."""

import math

import numpy as np
import pytest

from glassvol.errors import DataError, DimensionError, SingularLensError
from glassvol.lens import (
    EnvironmentMap,
    LensMesh,
    LensSpec,
    Ray,
    lens_boundary,
    lens_spec_from_dict,
    reflect_ray,
    refract_ray,
    render_with_lens,
)
from glassvol.raymarch import Image, RenderConfig, render
from glassvol.volprim import Scene

from conftest import make_camera, make_set


def circle_boundary(radius=1.2, n=24, z=0.0):
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), np.full(n, z)], axis=-1)


def make_lens(f, radius=1.2, normal=(0, 0, 1.0), sphere_radius=5.0, **kw):
    return LensSpec(
        boundary=circle_boundary(radius),
        focal_length=f,
        sphere_radius=sphere_radius,
        plane_normal=np.asarray(normal, dtype=float),
        **kw,
    )


class TestLensSpec:
    def test_nonplanar_boundary_rejected(self):
        pts = circle_boundary()
        bent = pts.copy()
        bent[0, 2] = 0.5
        with pytest.raises(DimensionError):
            LensSpec(bent, 1.0, 1.0)

    def test_from_dict_diopters(self):
        spec = lens_spec_from_dict(
            {"boundary": circle_boundary().tolist(), "diopters": 2.0, "unit_scale": 1.0}
        )
        assert spec.focal_length == pytest.approx(0.5)
        assert spec.sphere_radius == pytest.approx(4.0 * spec.diameter)
        spec_flat = lens_spec_from_dict(
            {"boundary": circle_boundary().tolist(), "diopters": 0.0}
        )
        assert math.isinf(spec_flat.focal_length)

    def test_from_dict_requires_focal_info(self):
        with pytest.raises(DataError):
            lens_spec_from_dict({"boundary": circle_boundary().tolist()})


class TestLensBoundary:
    def test_zero_subdivisions_snaps_once(self, rng):
        prims = rng.uniform(-1, 1, size=(500, 3))
        loop = rng.uniform(-1, 1, size=(4, 3))
        out = lens_boundary(loop, prims, subdivisions=0)
        assert out.shape == (4, 3)
        for p in out:
            assert any(np.allclose(p, q) for q in prims[np.argsort(np.linalg.norm(prims - p, axis=1))[:1]])

    def test_square_one_subdivision_on_grid(self):
        g = np.linspace(-1, 1, 81)
        gx, gy = np.meshgrid(g, g)
        prims = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=-1)
        square = np.array([[-0.5, -0.5, 0], [0.5, -0.5, 0], [0.5, 0.5, 0], [-0.5, 0.5, 0.0]])
        out = lens_boundary(square, prims, subdivisions=1)
        assert out.shape == (8, 3)
        pitch = g[1] - g[0]
        on_outline = np.minimum(np.abs(np.abs(out[:, 0]) - 0.5), np.abs(np.abs(out[:, 1]) - 0.5))
        assert np.all(on_outline <= pitch + 1e-12)

    def test_hexagon_three_subdivisions_count(self, rng):
        prims = rng.uniform(-1, 1, size=(2000, 3))
        ang = np.linspace(0, 2 * np.pi, 6, endpoint=False)
        hexagon = np.stack([np.cos(ang), np.sin(ang), np.zeros(6)], axis=-1)
        out = lens_boundary(hexagon, prims, subdivisions=3)
        assert out.shape == (48, 3)

    def test_snapped_points_are_primitive_positions(self, rng):
        prims = rng.uniform(-1, 1, size=(300, 3))
        loop = rng.uniform(-1, 1, size=(5, 3))
        out = lens_boundary(loop, prims, subdivisions=2)
        prim_set = {tuple(p) for p in prims}
        for p in out:
            assert tuple(p) in prim_set

    def test_empty_primitives_rejected(self):
        with pytest.raises(DimensionError):
            lens_boundary(circle_boundary(), np.zeros((0, 3)))


class TestRefraction:
    def test_worked_formula_example(self):
        lens = make_lens(f=10.0, radius=1.5, normal=(0, 0, 1.0))
        c = np.array([0.0, 0.0, 10.0])
        p = np.array([1.0, 0.0, 0.0])
        d = (p - c) / np.linalg.norm(p - c)
        out = refract_ray(Ray(c, d), lens)
        np.testing.assert_allclose(out.origin, p, atol=1e-12)
        expected = np.array([1.0, 0.0, -5.0]) / np.sqrt(26.0)
        np.testing.assert_allclose(out.direction, expected, atol=1e-12)

    def test_flat_prescription_identity(self):
        lens = make_lens(f=math.inf)
        ray = Ray(np.array([0.3, -0.2, 5.0]), np.array([0.0, 0.0, -1.0]))
        out = refract_ray(ray, lens)
        np.testing.assert_array_equal(out.origin, ray.origin)
        np.testing.assert_array_equal(out.direction, ray.direction)

    def test_miss_passes_through(self):
        lens = make_lens(f=2.0, radius=0.5)
        ray = Ray(np.array([3.0, 0.0, 5.0]), np.array([0.0, 0.0, -1.0]))
        out = refract_ray(ray, lens)
        np.testing.assert_array_equal(out.origin, ray.origin)

    def test_front_focal_plane_singular(self):
        lens = make_lens(f=-10.0, normal=(0, 0, 1.0))
        c = np.array([0.0, 0.0, 10.0])
        d = np.array([0.0, 0.01, -1.0])
        with pytest.raises(SingularLensError):
            refract_ray(Ray(c, d / np.linalg.norm(d)), lens)

    def test_collimated_bundle_focuses_at_f(self):
        # normal faces the scene (-z): positive f converges
        f = 2.0
        lens = make_lens(f=f, radius=0.6, normal=(0, 0, -1.0))
        crossings = []
        for x in np.linspace(-0.4, 0.4, 9):
            if abs(x) < 1e-6:
                continue
            ray = Ray(np.array([x, 0.0, 8.0]), np.array([0.0, 0.0, -1.0]))
            out = refract_ray(ray, lens)
            # axis crossing: x + t*dx = 0
            t = -out.origin[0] / out.direction[0]
            crossings.append(out.origin[2] + t * out.direction[2])
        crossings = np.asarray(crossings)
        np.testing.assert_allclose(-crossings, f, rtol=0.02)

    def test_refraction_preserves_unit_norm(self, rng):
        lens = make_lens(f=3.0)
        for _ in range(20):
            target = np.append(rng.uniform(-1, 1, 2), 0.0)
            c = np.array([0.5, -0.3, 6.0])
            d = target - c
            out = refract_ray(Ray(c, d / np.linalg.norm(d)), lens)
            assert np.linalg.norm(out.direction) == pytest.approx(1.0, abs=1e-12)


class TestReflection:
    def test_apex_hit_acts_as_planar_mirror(self):
        lens = make_lens(f=2.0, sphere_radius=7.3)
        ray = Ray(np.array([0.0, 0.0, 4.0]), np.array([0.0, 0.0, -1.0]))
        out = reflect_ray(ray, lens)
        np.testing.assert_allclose(out.origin, [0.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(out.direction, [0.0, 0.0, 1.0], atol=1e-12)

    def test_large_radius_approaches_planar(self, rng):
        diameter = 2.4
        lens_big = make_lens(f=2.0, sphere_radius=1e6 * diameter)
        for _ in range(10):
            target = np.append(rng.uniform(-0.8, 0.8, 2), 0.0)
            c = np.array([0.4, 0.2, 5.0])
            d = (target - c) / np.linalg.norm(target - c)
            out = reflect_ray(Ray(c, d), lens_big)
            planar = d - 2 * (d @ np.array([0, 0, 1.0])) * np.array([0, 0, 1.0])
            assert np.linalg.norm(out.direction - planar) < 1e-3

    def test_reflection_law_identity(self, rng):
        lens = make_lens(f=2.0, sphere_radius=4.0)
        sphere_center = lens.optical_center - lens.sphere_radius * lens.plane_normal
        for _ in range(200):
            target = np.append(rng.uniform(-0.7, 0.7, 2), 0.0)
            c = np.array([0.2, -0.5, 6.0])
            d = (target - c) / np.linalg.norm(target - c)
            out = reflect_ray(Ray(c, d), lens)
            rvec = out.origin - sphere_center
            rvec = rvec / np.linalg.norm(rvec)
            assert abs(out.direction @ rvec + d @ rvec) < 1e-9
            assert np.linalg.norm(out.direction) == pytest.approx(1.0, abs=1e-12)


class TestRenderWithLens:
    def _scene(self):
        pset = make_set(
            positions=[(0.0, 0.0, -2.0)], scales=(0.8, 0.8, 0.05),
            density=200.0, color=(0.7, 0.4, 0.2), tapered=False,
        )
        return Scene((("face", pset),), background=np.array([0.1, 0.1, 0.3]))

    def test_flat_lens_identity_pixel_exact(self):
        scene = self._scene()
        cam = make_camera(eye=(0, 0, 2.0), target=(0, 0, -2.0), width=24, height=24)
        cfg = RenderConfig(step_size=0.01)
        lens = make_lens(f=math.inf, radius=0.8, alpha=1.0, beta=0.0)
        with_lens = render_with_lens(scene, cam, [lens], None, cfg)
        plain = render(scene, cam, cfg)
        np.testing.assert_array_equal(with_lens.data, plain.data)

    def test_pure_reflection_empty_scene_shows_environment(self, rng):
        empty = Scene((("face", make_set(density=0.0)),), background=np.zeros(3))
        cam = make_camera(eye=(0, 0, 2.0), target=(0, 0, 0), width=16, height=16)
        env_img = Image(rng.uniform(0.2, 0.8, size=(16, 32, 3)))
        env = EnvironmentMap(env_img)
        lens = make_lens(f=2.0, radius=2.0, alpha=0.0, beta=1.0)
        cfg = RenderConfig(step_size=0.05)
        img = render_with_lens(empty, cam, [lens], env, cfg)
        origins, dirs = cam.rays()
        from glassvol.lens import _reflect_batch, intersect_fan

        mesh = LensMesh.from_spec(lens)
        t_hit, hit = intersect_fan(mesh, origins, dirs)
        assert hit.all()
        _, rd = _reflect_batch(origins, dirs, t_hit, lens)
        expected = env.sample(rd).reshape(16, 16, 3)
        np.testing.assert_allclose(img.data, expected, atol=1e-12)

    def test_reflection_requires_env_map(self):
        scene = self._scene()
        cam = make_camera(eye=(0, 0, 2.0), width=8, height=8)
        lens = make_lens(f=2.0, alpha=0.5, beta=0.5)
        with pytest.raises(DataError):
            render_with_lens(scene, cam, [lens], None, RenderConfig())

    def test_energy_bounded(self, rng):
        scene = self._scene()
        cam = make_camera(eye=(0, 0, 2.0), target=(0, 0, -2.0), width=16, height=16)
        env = EnvironmentMap(Image(rng.uniform(0.0, 1.0, size=(8, 16, 3))))
        lens = make_lens(f=1.5, radius=0.9, normal=(0, 0, -1.0), alpha=0.9, beta=0.1)
        img = render_with_lens(scene, cam, [lens], env, RenderConfig(step_size=0.01))
        assert img.data.max() <= 1.0 + 1e-9
        assert img.data.min() >= 0.0

    def test_magnification_matches_thin_lens(self):
        # textured plane: two bright fiducials at +-0.12 on a dark plane
        m_grid = 17
        half_w = 0.6
        color = np.zeros((1, 3, m_grid, m_grid, m_grid))
        xs = np.linspace(-half_w, half_w, m_grid)
        for fx in (-0.12, 0.12):
            i = int(np.argmin(np.abs(xs - fx)))
            color[0, :, i, (m_grid - 1) // 2, :] = 1.0
        pset = make_set(
            positions=[(0.0, 0.0, -0.5)], scales=(half_w, half_w, 0.02),
            density=300.0, tapered=False, m=m_grid,
        )
        import dataclasses

        pset = dataclasses.replace(pset, color=color)
        scene = Scene((("face", pset),), background=np.zeros(3))
        u_c, f, delta = 2.0, 1.0, 0.5  # camera 2 in front, plane 0.5 behind
        cam = make_camera(eye=(0, 0, u_c), target=(0, 0, -1.0), width=161, height=9, fov_deg=40)
        cfg = RenderConfig(step_size=0.004)
        lens = make_lens(f=f, radius=0.45, normal=(0, 0, -1.0), alpha=1.0, beta=0.0)

        def spacing(img):
            row = img.data[4, :, 0]
            cols = np.arange(row.size)
            mid = row.size // 2
            left = row[:mid]
            right = row[mid:]
            cl = np.sum(cols[:mid] * left) / np.sum(left)
            cr = np.sum(cols[mid:] * right) / np.sum(right)
            return cr - cl

        plain = render(scene, cam, cfg)
        lensed = render_with_lens(scene, cam, [lens], None, cfg)
        got = spacing(lensed) / spacing(plain)
        v = f * u_c / (u_c - f)  # image distance of the camera pupil
        expected = (1 + delta / u_c) / (1 - delta / v)
        assert abs(got / expected - 1.0) < 0.03


class TestEnvironmentMap:
    def test_constant_map_constant_samples(self):
        env = EnvironmentMap(Image(np.full((8, 16, 3), 0.37)))
        dirs = np.random.default_rng(0).normal(size=(50, 3))
        np.testing.assert_allclose(env.sample(dirs), 0.37, atol=1e-12)

    def test_requires_three_channels(self):
        with pytest.raises(DimensionError):
            EnvironmentMap(Image(np.zeros((4, 8, 1))))
