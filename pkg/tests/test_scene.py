import json

import numpy as np
import pytest

from hardnerf import imageio
from hardnerf.renderer import composite_samples
from hardnerf.scene import (
    Camera,
    Dataset,
    Primitive,
    Scene,
    eval_scene,
    generate_scene,
    make_dataset,
    ray_box,
    render_ground_truth,
    smooth_falloff,
)


def small_camera(distance=3.2, res=16):
    focal = 0.5 * res / np.tan(np.radians(22.5))
    return Camera.look_at([distance * 0.6, -distance * 0.6, distance * 0.5], [0, 0, 0], focal, res, res)


def occluding_pairs(scene, axis):
    """Pairs (i, j) where a ray along ``axis`` through primitive i's centre
    also passes through primitive j."""
    line = np.linspace(-1, 1, 801)
    pairs = set()
    for i, a in enumerate(scene.primitives):
        pts = np.repeat(a.center[None], len(line), axis=0)
        pts[:, axis] = line
        for j, b in enumerate(scene.primitives):
            if i != j and np.any(b.signed_distance(pts, scene.bounds) < 0):
                pairs.add(tuple(sorted((i, j))))
    return pairs


class TestGenerate:
    def test_spheres_deterministic(self):
        a, b = generate_scene("spheres", 1), generate_scene("spheres", 1)
        assert len(a.primitives) == 3 and all(p.kind == "sphere" for p in a.primitives)
        assert json.dumps(a.to_json()) == json.dumps(b.to_json())

    def test_seed_changes_scene(self):
        assert generate_scene("spheres", 1).to_json() != generate_scene("spheres", 2).to_json()

    @pytest.mark.parametrize("preset", ["spheres", "cornell", "clutter"])
    def test_invariants(self, preset):
        s = generate_scene(preset, 0)
        lo, hi = s.bounds
        for p in s.primitives:
            assert p.density >= 0 and np.all((p.albedo >= 0) & (p.albedo <= 1))
            assert np.all(p.center >= lo) and np.all(p.center <= hi)
            if p.kind == "sphere":
                assert np.all(p.center - p.size[0] >= lo) and np.all(p.center + p.size[0] <= hi)
            if p.kind == "box":
                assert np.all(p.center - p.size >= lo) and np.all(p.center + p.size <= hi)

    def test_clutter_occlusion(self):
        s = generate_scene("clutter", 7)
        assert len(s.primitives) >= 10
        assert any(occluding_pairs(s, axis) for axis in range(3))

    def test_unknown(self):
        with pytest.raises(ValueError):
            generate_scene("teapot", 0)

    def test_json_round_trip(self):
        s = generate_scene("cornell", 3)
        back = Scene.from_json(json.loads(json.dumps(s.to_json())))
        assert back.to_json() == s.to_json()


class TestEval:
    def test_far_outside(self):
        d, a = eval_scene(generate_scene("clutter", 0), [[10.0, -7.0, 3.0]])
        assert d[0] == 0 and not a.any()

    def test_sphere_centre(self):
        s = Scene([Primitive("sphere", np.zeros(3), np.array([0.5]), 5.0, np.array([0.2, 0.4, 0.6]))])
        d, a = eval_scene(s, [[0.0, 0.0, 0.0]])
        assert d[0] == 5.0
        np.testing.assert_allclose(a[0], [0.2, 0.4, 0.6])

    def test_on_boundary(self):
        s = Scene([Primitive("sphere", np.zeros(3), np.array([0.5]), 8.0, np.ones(3))])
        d, _ = eval_scene(s, [[0.5, 0.0, 0.0], [0.0, 0.0, -0.5]])
        expect = 8.0 * smooth_falloff(0.0, s.shell_width)
        np.testing.assert_allclose(d, expect, rtol=1e-12)
        assert expect == pytest.approx(4.0)

    def test_falloff_shape(self):
        w = 0.04
        assert smooth_falloff(-w, w) == 1.0 and smooth_falloff(w, w) == 0.0
        x = np.linspace(-w, w, 50)
        assert np.all(np.diff(smooth_falloff(x, w)) <= 0)

    def test_ranges(self):
        s = generate_scene("clutter", 1)
        d, a = eval_scene(s, np.random.default_rng(0).uniform(-1.5, 1.5, (5000, 3)))
        assert np.all(d >= 0) and np.all((a >= 0) & (a <= 1))


class TestRender:
    def test_empty_scene_background(self):
        img = render_ground_truth(Scene([]), small_camera(), 64)
        assert np.all(img == 0.5)

    def test_opaque_wall(self):
        wall = Primitive("box", np.array([0.0, 0.0, 0.0]), np.array([0.9, 0.9, 0.9]), 400.0, np.array([0.9, 0.2, 0.1]))
        focal = 0.5 * 8 / np.tan(np.radians(5))  # narrow view entirely on the box
        cam = Camera.look_at([0, -3, 0], [0, 0, 0], focal, 8, 8)
        np.testing.assert_allclose(render_ground_truth(Scene([wall]), cam, 128), np.broadcast_to([0.9, 0.2, 0.1], (8, 8, 3)), atol=1e-4)

    def test_deterministic(self):
        s = generate_scene("spheres", 0)
        assert np.array_equal(render_ground_truth(s, small_camera(), 64), render_ground_truth(s, small_camera(), 64))

    def test_self_convergence_spheres(self):
        s = generate_scene("spheres", 0)
        a, b = render_ground_truth(s, small_camera(), 256), render_ground_truth(s, small_camera(), 512)
        assert np.abs(a - b).max() < 5e-3

    @pytest.mark.parametrize("preset", ["spheres", "clutter"])
    def test_converged_at_512(self, preset):
        s = generate_scene(preset, 0)
        a, b = render_ground_truth(s, small_camera(), 512), render_ground_truth(s, small_camera(), 1024)
        assert np.abs(a - b).max() < 1e-3

    def test_in_range(self):
        img = render_ground_truth(generate_scene("cornell", 0), small_camera(), 64)
        assert img.shape == (16, 16, 3) and img.min() >= 0 and img.max() <= 1

    def test_errors(self):
        with pytest.raises(ValueError):
            render_ground_truth(Scene([]), small_camera(), 32)
        cam = small_camera()
        cam.focal = 0.0
        with pytest.raises(ValueError):
            render_ground_truth(Scene([]), cam, 64)

    def test_shares_compositor(self):
        # same per-step inputs through the renderer's compositor give the same pixels
        s = generate_scene("spheres", 0)
        cam = small_camera(res=4)
        o, d = cam.rays()
        tn, tf = ray_box(o, d, s.bounds)
        steps = 64
        t = tn[:, None] + (np.arange(steps) + 0.5) * ((tf - tn) / steps)[:, None]
        sig, alb = eval_scene(s, (o[:, None] + t[..., None] * d[:, None]).reshape(-1, 3))
        dl = np.repeat((tf - tn) / steps, steps)
        ref = composite_samples(sig, alb, dl, np.arange(0, 17 * steps, steps), s.background).color
        np.testing.assert_array_equal(render_ground_truth(s, cam, steps).reshape(-1, 3), np.clip(ref, 0, 1))


class TestCamera:
    def test_orthonormal(self):
        cam = small_camera()
        R = cam.rotation
        assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-6

    def test_centre_ray_hits_target(self):
        cam = Camera.look_at([0, -3, 1], [0, 0, 0], 10, 2, 2)
        _, d = cam.rays()
        mean = d.mean(axis=0)
        np.testing.assert_allclose(mean / np.linalg.norm(mean), -np.array([0, -3, 1]) / np.sqrt(10), atol=1e-9)

    def test_json_row_major(self):
        cam = small_camera()
        js = cam.to_json()
        assert js["c2w"][3] == cam.translation[0] and js["c2w"][:3] == cam.rotation[0].tolist()
        back = Camera.from_json(js)
        np.testing.assert_array_equal(back.matrix(), cam.matrix())


@pytest.fixture(scope="module")
def ds16():
    return make_dataset(generate_scene("spheres", 0), n_views=16, resolution=8, seed=0, steps_per_ray=64)


class TestDataset:
    def test_split(self, ds16):
        assert len(ds16.train_indices) == 14 and ds16.val_indices == [0, 8]
        assert not set(ds16.train_indices) & set(ds16.val_indices)

    def test_cameras_look_at_centre(self, ds16):
        for cam in ds16.cameras:
            forward = cam.rotation[:, 2]
            np.testing.assert_allclose(forward, -cam.translation / np.linalg.norm(cam.translation), atol=1e-12)
            assert cam.translation[2] > 0

    def test_deterministic(self, ds16):
        again = make_dataset(generate_scene("spheres", 0), n_views=16, resolution=8, seed=0, steps_per_ray=64)
        assert all(np.array_equal(a, b) for a, b in zip(ds16.images, again.images))

    def test_shapes(self):
        ds = make_dataset(generate_scene("spheres", 0), n_views=8, resolution=64, seed=0, steps_per_ray=64)
        assert len(ds.images) == 8 and all(im.shape == (64, 64, 3) for im in ds.images)
        assert all(im.min() >= 0 and im.max() <= 1 for im in ds.images)

    @pytest.mark.parametrize("kw", [dict(n_views=7), dict(resolution=0), dict(resolution=-4)])
    def test_errors(self, kw):
        args = dict(n_views=8, resolution=8)
        args.update(kw)
        with pytest.raises(ValueError):
            make_dataset(generate_scene("spheres", 0), **args, steps_per_ray=64)

    def test_save_load(self, ds16, tmp_path):
        ds16.save(tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert len(manifest["views"]) == 16 and len(manifest["views"][0]["c2w"]) == 12
        back = Dataset.load(tmp_path)
        assert back.split == ds16.split
        assert all(np.array_equal(a, b) for a, b in zip(back.images, ds16.images))
        ppm = imageio.read_ppm(tmp_path / manifest["views"][3]["preview"])
        assert np.abs(ppm - ds16.images[3]).max() <= 0.5 / 255 + 1e-6

    def test_load_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Dataset.load(tmp_path)
