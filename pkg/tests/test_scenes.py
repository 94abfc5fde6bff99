import numpy as np
import pytest
import torch

from wtmvs.geometry import ViewCamera, reprojection_errors
from wtmvs.numeric import DTYPE
from wtmvs.scenes import (GEOMETRIES, Plane, SceneError, SceneSpec, SolidTexture, Sphere, build_surfaces,
                          cast, generate, load_scene, save_scene, spec_from_kv)

SMALL = dict(height=32, width=40, focal=40.0, depth_range=(2.0, 8.0))


def test_fronto_plane_depth_is_constant():
    K = np.array([[50.0, 0, 19.5], [0, 50.0, 15.5], [0, 0, 1]])
    cam = ViewCamera(K, np.eye(3), np.zeros(3), (1.0, 5.0))
    ys, xs = np.mgrid[0:32, 0:40].astype(float)
    depth, X = cast([Plane(np.array([0.0, 0.0, 1.0]), 2.0)], cam, xs, ys)
    assert np.all(depth == 2.0)
    np.testing.assert_allclose(X[..., 2], 2.0, rtol=0, atol=1e-15)


def test_sphere_depth_symmetric_with_minimum_at_centre():
    # odd grid so the principal point is a pixel
    K = np.array([[40.0, 0, 20.0], [0, 40.0, 20.0], [0, 0, 1]])
    cam = ViewCamera(K, np.eye(3), np.zeros(3), (1.0, 9.0))
    ys, xs = np.mgrid[0:41, 0:41].astype(float)
    depth, _ = cast([Sphere(np.array([0.0, 0.0, 4.0]), 1.2)], cam, xs, ys)
    hit = depth > 0
    assert depth[20, 20] == pytest.approx(4.0 - 1.2, abs=1e-12)
    assert depth[hit].min() == pytest.approx(depth[20, 20], abs=1e-12)
    np.testing.assert_allclose(depth, depth[::-1, :], atol=1e-12)
    np.testing.assert_allclose(depth, depth[:, ::-1], atol=1e-12)
    np.testing.assert_allclose(depth, depth.T, atol=1e-12)


def _scalar_ray_hit(cam, x, y, surfaces):
    """Independent per-pixel oracle: closed-form intersections in the camera frame."""
    ray_c = np.linalg.solve(cam.K, np.array([x, y, 1.0]))
    C = -cam.R.T @ cam.t
    d = cam.R.T @ ray_c
    best = np.inf
    for s in surfaces:
        if isinstance(s, Plane):
            denom = float(d @ s.normal)
            if abs(denom) < 1e-15:
                continue
            t = (s.offset - float(C @ s.normal)) / denom
            if t > 0 and (s.x_below is None or (C + t * d)[0] < s.x_below):
                best = min(best, t)
        else:
            oc = C - s.center
            a, b, c = d @ d, 2 * d @ oc, oc @ oc - s.radius ** 2
            disc = b * b - 4 * a * c
            if disc >= 0:
                roots = [(-b - np.sqrt(disc)) / (2 * a), (-b + np.sqrt(disc)) / (2 * a)]
                pos = [r for r in roots if r > 0]
                if pos:
                    best = min(best, min(pos))
    return best, C + best * d


@pytest.mark.parametrize("geometry", GEOMETRIES)
def test_render_matches_scalar_oracle(geometry):
    spec = SceneSpec(geometry=geometry, **SMALL)
    scene = generate(spec, 7)
    texture = SolidTexture(spec, np.random.default_rng(7))
    surfaces = build_surfaces(spec)
    rng = np.random.default_rng(0)
    for v in range(spec.n_views):
        for _ in range(15):
            y, x = int(rng.integers(0, 32)), int(rng.integers(0, 40))
            t, X = _scalar_ray_hit(scene.cams[v], x, y, surfaces)
            if not np.isfinite(t):
                assert scene.depths[v, y, x] == 0
                continue
            assert scene.depths[v, y, x] == pytest.approx(t, rel=1e-10)
            np.testing.assert_allclose(scene.images[v, y, x], texture(X[None])[0], atol=1e-9)


def _surface_residual(spec, P):
    """Distance of each point to the nearest analytic surface."""
    res = np.full(len(P), np.inf)
    for s in build_surfaces(spec):
        if isinstance(s, Plane):
            r = np.abs(P @ s.normal - s.offset)
        else:
            r = np.abs(np.linalg.norm(P - s.center, axis=1) - s.radius)
        res = np.minimum(res, r)
    return res


@pytest.mark.parametrize("geometry", GEOMETRIES)
def test_gt_points_on_surface(geometry):
    spec = SceneSpec(geometry=geometry, **SMALL)
    scene = generate(spec, 1)
    assert len(scene.gt_points) == int((scene.depths > 0).sum())
    assert _surface_residual(spec, scene.gt_points).max() <= 1e-9


@pytest.mark.parametrize("geometry", GEOMETRIES)
def test_cross_view_consistency_on_covisible_pixels(geometry):
    scene = generate(SceneSpec(geometry=geometry, **SMALL), 2)
    for r in range(3):
        for s in range(scene.spec.n_views):
            if s == r:
                continue
            xi_p, xi_d, ok = reprojection_errors(torch.as_tensor(scene.depths[r], dtype=DTYPE),
                                                 scene.depth_sampler(s), scene.cams[r], scene.cams[s])
            cov = torch.as_tensor(scene.covisibility(r, s))
            both = ok & cov
            assert int(both.sum()) > 0.5 * int(cov.sum())
            assert float(xi_p[both].max()) <= 1e-6
            assert float(xi_d[both].max()) <= 1e-6


def test_step_scene_has_occlusions():
    scene = generate(SceneSpec(geometry="step", **SMALL), 0)
    cov = scene.covisibility(0, 1)
    assert (scene.depths[0] > 0).all() and not cov.all()


def test_deterministic_given_seed():
    a = generate(SceneSpec(**SMALL), 4)
    b = generate(SceneSpec(**SMALL), 4)
    c = generate(SceneSpec(**SMALL), 5)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.depths, b.depths)
    assert not np.array_equal(a.images, c.images)


def test_texture_is_not_periodic_at_window_scale():
    scene = generate(SceneSpec(**SMALL), 0)
    img = scene.images[0].mean(axis=-1)
    # a shift by one checker period must not reproduce the image
    for shift in (4, 8, 16):
        diff = np.abs(img[:, shift:] - img[:, :-shift]).mean()
        assert diff > 0.02


@pytest.mark.parametrize("bad", [dict(geometry="cube"), dict(height=30), dict(n_views=1)])
def test_spec_rejects(bad):
    with pytest.raises(SceneError):
        SceneSpec(**bad)


def test_geometry_outside_frusta_errors():
    with pytest.raises(SceneError):
        generate(SceneSpec(geometry="sphere", target_depth=-10.0, **SMALL), 0)


def test_spec_from_kv():
    spec = spec_from_kv({"geometry": "sphere", "n_views": "3", "depth_range": "1,9"})
    assert spec.geometry == "sphere" and spec.n_views == 3 and spec.depth_range == (1.0, 9.0)
    with pytest.raises(SceneError, match="bogus"):
        spec_from_kv({"bogus": "1"})
    with pytest.raises(SceneError):
        spec_from_kv({"n_views": "many"})


def test_save_load_roundtrip(tmp_path):
    scene = generate(SceneSpec(n_views=3, **SMALL), 0)
    save_scene(scene, tmp_path)
    back = load_scene(tmp_path)
    assert back.spec == scene.spec
    assert np.abs(back.images - scene.images).max() <= 0.5 / 255 + 1e-12
    np.testing.assert_allclose(back.depths, scene.depths, rtol=1e-7)
    np.testing.assert_array_equal(back.gt_points, scene.gt_points)
    for a, b in zip(back.cams, scene.cams):
        np.testing.assert_array_equal(a.K, b.K)
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.t, b.t)
