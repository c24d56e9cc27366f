import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.ndimage import map_coordinates

from stickercamo.assets import toy_car, unit_quad
from stickercamo.errors import RenderError
from stickercamo.geometry import TriMesh
from stickercamo.render import (AMBIENT_ONLY, Camera, Environment, RenderOutput, ScenePose, composite,
                                rasterize, render_batch, render_scene, sample_pose, shade_phong)

RANGES = {"elevation": (0, 50), "azimuth": (0, 360), "distance": (5, 50)}


# --- poses


def test_point_range_pose():
    p = sample_pose({"elevation": (5, 5), "azimuth": (30, 30), "distance": (10, 10)}, np.random.default_rng(0))
    assert (p.elevation, p.azimuth, p.distance) == (5, 30, 10)


def test_distance_samples_uniform():
    rng = np.random.default_rng(7)
    d = np.array([sample_pose(RANGES, rng).distance for _ in range(10_000)])
    assert d.min() >= 5 and d.max() <= 50
    assert abs(d.mean() - 27.5) < 1.0


def test_pose_sequence_deterministic():
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    assert [sample_pose(RANGES, r1) for _ in range(20)] == [sample_pose(RANGES, r2) for _ in range(20)]


def test_inverted_range():
    with pytest.raises(RenderError):
        sample_pose({"elevation": (10, 0), "azimuth": (0, 1), "distance": (1, 2)}, np.random.default_rng(0))


def test_pose_invariants():
    with pytest.raises(RenderError):
        ScenePose(0, 0, 0)
    with pytest.raises(RenderError):
        ScenePose(91, 0, 5)
    assert ScenePose(0, 370, 5).azimuth == 10


def test_environment_normalizes_light():
    env = Environment(light_direction=(0, 0, 2))
    assert env.light_direction == (0.0, 0.0, 1.0)
    with pytest.raises(RenderError):
        Environment(diffuse_color=-1)


# --- rasterization


def _triangle_mesh(tris, texture=None):
    v = np.asarray(tris, dtype=np.float64).reshape(-1, 3)
    f = np.arange(len(v)).reshape(-1, 3)
    uv = np.tile([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], (len(f), 1))
    return TriMesh(v, f, uv, f, np.full((4, 4, 3), 0.5) if texture is None else texture)


def test_center_pixel_hits_facing_triangle():
    mesh = _triangle_mesh([[(-2, -1, 0), (2, -1, 0), (0, 2, 0)]])
    frags = rasterize(mesh, ScenePose(0, 0, 10), (65, 65))
    assert frags.face_id[32, 32] == 0
    # the centroid lies on the optical axis and the plane faces the camera
    assert abs(frags.depth[32, 32] - 10.0) < 1e-9
    cov = frags.covered
    np.testing.assert_allclose(frags.bary[cov].sum(1), 1.0)
    assert np.all(frags.bary[cov] >= -1e-12) and np.all(frags.depth[cov] > 0)


def test_nearer_triangle_wins():
    far = [(-1, -1, 1), (1, -1, 1), (0, 1, 1)]
    near = [(-1, -1, 2), (1, -1, 2), (0, 1, 2)]
    mesh = _triangle_mesh([far, near])
    cam = Camera(eye=(0, 0, 3), target=(0, 0, 0), resolution=(33, 33))
    frags = rasterize(mesh, None, (33, 33), camera=cam)
    assert frags.face_id[16, 16] == 1
    assert abs(frags.depth[16, 16] - 1.0) < 1e-9


def test_far_away_target_is_empty():
    frags = rasterize(toy_car(16), ScenePose(10, 0, 1e5), (64, 64))
    assert frags.covered.sum() == 0


def test_face_order_invariance():
    car = toy_car(16)
    perm = np.random.default_rng(0).permutation(car.num_faces)
    shuffled = TriMesh(car.vertices, car.faces[perm], car.uv_coords, car.face_uvs[perm], car.base_texture)
    pose = ScenePose(25, 40, 9)
    a = rasterize(car, pose, (96, 96))
    b = rasterize(shuffled, pose, (96, 96))
    cov = a.covered
    assert np.array_equal(cov, b.covered)
    np.testing.assert_array_equal(a.depth[cov], b.depth[cov])
    # faces may tie only along shared edges; away from ties the winner is identical
    same = perm[b.face_id[cov]] == a.face_id[cov]
    assert same.mean() > 0.99


# --- shading


def _quad_uv_at_pixels(res, distance, fov=60.0):
    """Analytic texture coordinates where each pixel ray meets a facing unit quad."""
    h, w = res
    f = (h / 2) / math.tan(math.radians(fov) / 2)
    cols, rows = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    x = (cols - w / 2) / f * distance
    y = -(rows - h / 2) / f * distance
    return x + 0.5, y + 0.5


def test_ambient_only_is_bilinear_lookup():
    tex = np.random.default_rng(2).uniform(size=(8, 8, 3))
    quad = unit_quad(tex)
    res = (48, 48)
    frags = rasterize(quad, ScenePose(0, 0, 2.0), res)
    out = shade_phong(frags, quad, torch.as_tensor(tex), AMBIENT_ONLY)
    u, v = _quad_uv_at_pixels(res, 2.0)
    cov = frags.covered
    rows = (1 - v[cov]) * 8 - 0.5
    cols = u[cov] * 8 - 0.5
    expected = np.stack([map_coordinates(tex[:, :, c], [rows, cols], order=1, mode="nearest")
                         for c in range(3)], 1)
    np.testing.assert_allclose(out.image.numpy()[cov], expected, atol=1e-9)


def test_diffuse_closed_form():
    t, d = 0.3, 2.5
    quad = unit_quad(np.full((8, 8, 3), t))
    env = Environment(ambient=(0, 0, 0), diffuse_color=d, specular=(0, 0, 0), light_direction=(0, 0, 1))
    frags = rasterize(quad, ScenePose(0, 0, 3.0), (32, 32))
    out = shade_phong(frags, quad, torch.full((8, 8, 3), t, dtype=torch.float64), env)
    np.testing.assert_allclose(out.image.numpy()[frags.covered], min(d * t, 1.0), atol=1e-12)
    env = env.with_(diffuse_color=5.0)
    out = shade_phong(frags, quad, torch.full((8, 8, 3), t, dtype=torch.float64), env)
    np.testing.assert_allclose(out.image.numpy()[frags.covered], 1.0)


def test_silhouette_matches_fragments():
    car = toy_car(16)
    frags = rasterize(car, ScenePose(20, 100, 8), (64, 64))
    out = shade_phong(frags, car, torch.as_tensor(car.base_texture), Environment())
    assert np.array_equal(out.silhouette.numpy(), frags.covered)


def test_texture_jacobian_matches_finite_differences():
    rng = np.random.default_rng(5)
    tex0 = rng.uniform(0.2, 0.8, size=(8, 8, 3))
    quad = unit_quad(tex0)
    env = Environment(ambient=(0.4, 0.4, 0.4), diffuse_color=0.5, light_direction=(0.2, 0.3, 1.0))
    frags = rasterize(quad, ScenePose(10, 20, 2.2), (40, 40))
    weights = torch.as_tensor(rng.normal(size=(40, 40, 3)))

    def f(t):
        return (shade_phong(frags, quad, t, env).image * weights).sum()

    tex = torch.as_tensor(tex0).requires_grad_(True)
    (grad,) = torch.autograd.grad(f(tex), tex)
    h = 1e-4
    for (i, j, c) in [(0, 0, 0), (3, 4, 1), (7, 7, 2), (5, 2, 0), (2, 6, 2)]:
        tp, tm = torch.as_tensor(tex0).clone(), torch.as_tensor(tex0).clone()
        tp[i, j, c] += h
        tm[i, j, c] -= h
        fd = float(f(tp) - f(tm)) / (2 * h)
        assert abs(fd - float(grad[i, j, c])) <= 1e-3 * max(abs(fd), 1e-8)


@settings(max_examples=15, deadline=None)
@given(st.floats(0, 3), st.floats(0, 20), st.floats(0, 2), st.floats(1, 50), st.integers(0, 1000))
def test_output_in_unit_range(amb, kd, ks, shin, seed):
    car = toy_car(16)
    env = Environment(ambient=(amb,) * 3, diffuse_color=kd, specular=(ks,) * 3, shininess=shin)
    pose = sample_pose({"elevation": (0, 60), "azimuth": (0, 360), "distance": (5, 12)},
                       np.random.default_rng(seed))
    img, _, _ = render_scene(car, car.base_texture, pose, env, torch.rand(32, 32, 3), (32, 32))
    assert float(img.min()) >= 0 and float(img.max()) <= 1


# --- compositing


def _render(img, sil):
    return RenderOutput(torch.as_tensor(img), torch.as_tensor(sil).bool())


def test_composite_identities(rng):
    img, bg = rng.uniform(size=(9, 7, 3)), torch.as_tensor(rng.uniform(size=(9, 7, 3)))
    assert torch.equal(composite(_render(img, np.zeros((9, 7))), bg), bg)
    assert torch.equal(composite(_render(img, np.ones((9, 7))), bg), torch.as_tensor(img))


def test_composite_checkerboard_loop(rng):
    img, bg = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6, 3))
    sil = (np.add.outer(np.arange(6), np.arange(6)) % 2).astype(bool)
    out = composite(_render(img, sil), torch.as_tensor(bg)).numpy()
    for i in range(6):
        for j in range(6):
            assert np.array_equal(out[i, j], img[i, j] if sil[i, j] else bg[i, j])


def test_composite_size_mismatch():
    with pytest.raises(RenderError):
        composite(_render(np.zeros((4, 4, 3)), np.ones((4, 4))), torch.zeros(5, 4, 3))


def test_background_kept_outside_silhouette():
    car = toy_car(16)
    bg = torch.rand(48, 48, 3, dtype=torch.float64)
    img, out, _ = render_scene(car, car.base_texture, ScenePose(15, 60, 9), Environment(), bg)
    outside = ~out.silhouette
    assert torch.equal(img[outside], bg[outside])


# --- batches


def test_batch_matches_sequential():
    car = toy_car(16)
    rng = np.random.default_rng(11)
    poses = [sample_pose({"elevation": (0, 50), "azimuth": (0, 360), "distance": (6, 14)}, rng) for _ in range(8)]
    bgs = [torch.as_tensor(rng.uniform(size=(40, 40, 3))) for _ in range(8)]
    batch = render_batch(car, car.base_texture, poses, Environment(), bgs, (32, 32))
    for p, bg, b in zip(poses, bgs, batch):
        single, _, _ = render_scene(car, car.base_texture, p, Environment(), bg, (32, 32))
        assert torch.equal(single, b)
    same = render_batch(car, car.base_texture, [poses[0]] * 3, Environment(), [bgs[0]] * 3, (32, 32))
    assert all(torch.equal(same[0], s) for s in same)


def test_batch_length_mismatch():
    car = toy_car(16)
    with pytest.raises(RenderError):
        render_batch(car, car.base_texture, [ScenePose(0, 0, 8)], Environment(), [], (32, 32))
