import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from meshmotion.render import (
    Camera,
    CameraError,
    RasterSettings,
    bake_vertex_features,
    camera_look_at,
    load_cameras,
    project_points,
    project_torch,
    rasterize_attributes,
    rasterize_depth,
    rasterize_silhouette,
    sample_sphere_cameras,
    save_cameras,
    scene_scale,
    vertex_visibility,
)
from meshmotion.render.raster import plane_depth


def _front_camera(H=64, W=96, dist=3.0):
    return camera_look_at((0, 0, dist), (0, 0, 0), (H, W))


def test_single_sphere_camera():
    (cam,) = sample_sphere_cameras(1, 2.5)
    np.testing.assert_allclose(cam.center, (0, 0, 2.5), atol=1e-12)
    # looks at the origin: the origin projects to the principal point
    uv, valid = project_points(np.zeros((1, 3)), cam)
    assert valid[0]
    np.testing.assert_allclose(uv[0], cam.principal, atol=1e-9)


def test_sphere_cameras_spacing_and_radius():
    cams = sample_sphere_cameras(100, 3.0, look_at_point=(0.1, 0.2, -0.3))
    centers = np.array([c.center for c in cams])
    d = centers - np.array([0.1, 0.2, -0.3])
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 3.0, atol=1e-9)
    u = d / np.linalg.norm(d, axis=1, keepdims=True)
    cosang = np.clip(u @ u.T, -1, 1)
    np.fill_diagonal(cosang, -1)
    assert np.degrees(np.arccos(cosang.max())) > 12.0
    again = sample_sphere_cameras(100, 3.0, look_at_point=(0.1, 0.2, -0.3))
    assert all(np.array_equal(a.rotation, b.rotation) for a, b in zip(cams, again))


def test_sphere_camera_bad_radius():
    with pytest.raises(CameraError):
        sample_sphere_cameras(4, 0.0)
    with pytest.raises(CameraError):
        sample_sphere_cameras(4, -1.0)


def test_camera_validation_and_json(tmp_path):
    with pytest.raises(CameraError):
        Camera(np.diag([1.0, 1.0, -1.0]), np.zeros(3), (1, 1), (0, 0), (4, 4))
    cams = sample_sphere_cameras(3, 2.0)
    save_cameras(tmp_path / "c.json", cams)
    back = load_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        assert a.focal == b.focal and a.image_size == b.image_size


def _axis_camera():
    return Camera(np.eye(3), np.zeros(3), (500.0, 450.0), (320.0, 192.0), (384, 640))


def test_projection_formulas():
    cam = _axis_camera()
    uv, valid = project_points(np.array([[0, 0, 4.0], [0.3, 0, 2.0], [0, 0, -1.0]]), cam)
    np.testing.assert_allclose(uv[0], (320, 192))
    np.testing.assert_allclose(uv[1], (320 + 500 * 0.3 / 2.0, 192))
    assert valid.tolist() == [True, True, False]


def test_projection_gradient_matches_fd():
    cam = _axis_camera()
    x = torch.tensor([[0.2, -0.1, 2.5]], requires_grad=True)
    uv, _, _ = project_torch(x, cam)
    uv[0, 0].backward()
    analytic = x.grad[0, 0].item()
    h = 1e-6
    fd = (project_points([[0.2 + h, -0.1, 2.5]], cam)[0][0, 0] - project_points([[0.2 - h, -0.1, 2.5]], cam)[0][0, 0]) / (2 * h)
    assert analytic == pytest.approx(500 / 2.5, rel=1e-12)
    assert abs(analytic - fd) < 1e-5 * max(1, abs(fd))


def test_mesh_outside_frustum_is_empty():
    cam = _front_camera()
    v = np.array([[10.0, 10, 0], [11, 10, 0], [10, 11, 0]])
    img = rasterize_silhouette(v, [[0, 1, 2]], cam).image
    assert img.abs().max() == 0
    behind = np.array([[0.0, 0, 5], [1, 0, 5], [0, 1, 5]])
    assert rasterize_silhouette(behind, [[0, 1, 2]], cam).image.abs().max() == 0


def test_large_quad_saturates():
    cam = _front_camera()
    v = np.array([[-50.0, -50, 0], [50, -50, 0], [50, 50, 0], [-50, 50, 0]])
    f = [[0, 1, 2], [0, 2, 3]]
    img = rasterize_silhouette(v, f, cam, RasterSettings(softness_sigma=1e-3)).image
    assert (1 - img[2:-2, 2:-2]).abs().max() < 1e-3


def _brute_force_coverage(tri_uv, H, W):
    cover = np.zeros((H, W), dtype=np.uint8)
    a, b, c = tri_uv
    for i, j in itertools.product(range(H), range(W)):
        p = np.array([j + 0.5, i + 0.5])
        cr = lambda s, t: s[0] * t[1] - s[1] * t[0]
        e = [cr(b - a, p - a), cr(c - b, p - b), cr(a - c, p - c)]
        cover[i, j] = all(x >= 0 for x in e) or all(x <= 0 for x in e)
    return cover


def test_hard_mode_matches_brute_force():
    cam = _front_camera(40, 50)
    v = np.array([[-0.4, -0.3, 0.1], [0.5, -0.1, -0.2], [0.05, 0.45, 0.0]])
    uv, _ = project_points(v, cam)
    res = rasterize_silhouette(v, [[0, 1, 2]], cam, RasterSettings(softness_sigma=0))
    np.testing.assert_array_equal(res.image.numpy().astype(np.uint8), _brute_force_coverage(uv, 40, 50))


def test_degenerate_faces_counted():
    cam = _front_camera()
    v = np.array([[-0.4, -0.3, 0], [0.5, -0.1, 0], [0.05, 0.45, 0], [0.1, 0.1, 0.0]])
    res = rasterize_silhouette(v, [[0, 1, 2], [3, 3, 0]], cam)
    assert res.diagnostics["degenerate_faces"] == 1
    assert res.image.sum() > 0


def test_soft_converges_to_hard(body):
    cam = camera_look_at((0, 0, 2.6), (0, 0, 0), (96, 160))
    hard = rasterize_silhouette(body.template_vertices, body.faces, cam, RasterSettings(softness_sigma=0)).image
    pixel = 1.0 / 96
    soft = rasterize_silhouette(body.template_vertices, body.faces, cam, RasterSettings(softness_sigma=0.1 * pixel)).image
    assert (soft - hard).abs().mean() < 1e-2


def test_soft_silhouette_gradient_flows(body):
    cam = camera_look_at((0, 0, 2.6), (0, 0, 0), (48, 80))
    v = torch.tensor(body.template_vertices, requires_grad=True)
    img = rasterize_silhouette(v, body.faces, cam, RasterSettings(softness_sigma=2e-3)).image
    img.sum().backward()
    assert torch.isfinite(v.grad).all() and v.grad.abs().sum() > 0


def test_soft_silhouette_fd_gradient():
    cam = _front_camera(32, 32)
    v0 = np.array([[-0.4, -0.3, 0.1], [0.5, -0.1, -0.2], [0.05, 0.45, 0.0]])
    s = RasterSettings(softness_sigma=0.05, faces_per_pixel=1)
    v = torch.tensor(v0, requires_grad=True)
    loss = lambda x: (rasterize_silhouette(x, [[0, 1, 2]], cam, s).image ** 2).sum()
    loss(v).backward()
    for k in range(9):
        e = np.zeros(9)
        e[k] = 1e-6
        fd = (loss(torch.tensor(v0 + e.reshape(3, 3))) - loss(torch.tensor(v0 - e.reshape(3, 3)))).item() / 2e-6
        assert v.grad.reshape(-1)[k].item() == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_constant_attributes(body):
    cam = camera_look_at((0, 0, 2.6), (0, 0, 0), (64, 96))
    c = np.array([0.25, -3.0, 7.5])
    res = rasterize_attributes(body.template_vertices, body.faces, np.tile(c, (body.num_vertices, 1)), cam,
                               RasterSettings(background_value=-1.0), return_mask=True)  # fmt: skip
    img, mask = res.image.numpy(), res.diagnostics["mask"]
    assert mask.sum() > 100
    np.testing.assert_allclose(img[mask], np.broadcast_to(c, img[mask].shape), rtol=0, atol=1e-12)
    assert np.all(img[~mask] == -1.0)


def _ray_cast(origin, direction, tris):
    """Moller-Trumbore against every triangle; nearest positive hit."""
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    pvec = np.cross(direction, e2)
    det = (e1 * pvec).sum(1)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1), 0)
    tvec = origin - tris[:, 0]
    u = (tvec * pvec).sum(1) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec * direction).sum(1) * inv
    t = (e2 * qvec).sum(1) * inv
    hit = ok & (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1 + 1e-9) & (t > 0)
    return np.where(hit, t, np.inf).min()


def test_position_map_matches_ray_cast(body, rng):
    cam = camera_look_at((0.8, 0.3, 2.4), (0, 0, 0), (96, 128))
    v = body.template_vertices
    res = rasterize_attributes(v, body.faces, v, cam, return_mask=True)
    img, mask = res.image.numpy(), res.diagnostics["mask"]
    rows, cols = np.nonzero(mask)
    pick = rng.choice(len(rows), 50, replace=False)
    tris = v[body.faces]
    Kinv = np.linalg.inv(cam.K)
    for k in pick:
        i, j = rows[k], cols[k]
        d = cam.rotation.T @ (Kinv @ np.array([j + 0.5, i + 0.5, 1.0]))
        d /= np.linalg.norm(d)
        t = _ray_cast(cam.center, d, tris)
        assert np.isfinite(t)
        assert np.linalg.norm(img[i, j] - (cam.center + t * d)) < 1e-3


def test_one_hot_barycentrics():
    cam = _front_camera(32, 32)
    v = np.array([[-0.4, -0.3, 0.1], [0.5, -0.1, -0.2], [0.05, 0.45, 0.0]])
    res = rasterize_attributes(v, [[0, 1, 2]], np.eye(3), cam, return_mask=True)
    w = res.image.numpy()[res.diagnostics["mask"]]
    assert len(w) > 10
    assert np.all(w >= -1e-9)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-5)


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_attribute_linearity(alpha, beta, seed):
    r = np.random.default_rng(seed)
    cam = _front_camera(24, 24)
    v = np.array([[-0.5, -0.4, 0.0], [0.5, -0.4, 0.1], [0.5, 0.5, 0.0], [-0.5, 0.5, -0.1]])
    f = [[0, 1, 2], [0, 2, 3]]
    A, B = r.normal(size=(4, 2)), r.normal(size=(4, 2))
    ra = rasterize_attributes(v, f, A, cam, return_mask=True)
    mask = ra.diagnostics["mask"]
    lhs = rasterize_attributes(v, f, alpha * A + beta * B, cam).image.numpy()[mask]
    rhs = alpha * ra.image.numpy()[mask] + beta * rasterize_attributes(v, f, B, cam).image.numpy()[mask]
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_bake_constant_and_flags(body):
    cam = camera_look_at((0, 0, 2.6), (0, 0, 0), (96, 160))
    c = np.array([1.0, 2.0, 3.0])
    res = bake_vertex_features(body.template_vertices, body.faces, [cam], [np.tile(c, (24, 40, 1))])
    seen = ~res.never_visible
    assert 0 < seen.sum() < body.num_vertices
    np.testing.assert_allclose(res.features[seen], np.broadcast_to(c, (seen.sum(), 3)), atol=1e-12)
    assert np.all(res.features[res.never_visible] == 0)
    # back-facing vertices (normal pointing away) are not visible
    assert body.template_vertices[res.never_visible][:, 2].mean() < body.template_vertices[seen][:, 2].mean()


def test_bake_two_camera_mean(body):
    cam = camera_look_at((0, 0, 2.6), (0, 0, 0), (96, 160))
    a, b = np.full((24, 40, 2), 1.0), np.full((24, 40, 2), 4.0)
    res = bake_vertex_features(body.template_vertices, body.faces, [cam, cam], [a, b])
    seen = ~res.never_visible
    np.testing.assert_allclose(res.features[seen], 2.5, atol=1e-12)
    assert np.all(res.view_count[seen] == 2)


@pytest.mark.slow
def test_bake_position_self_consistency(body):
    # bilinear sampling across mesh creases has error linear in the pixel footprint,
    # so the 2e-3 bound needs high-resolution views
    v, f = body.template_vertices, body.faces
    cams = sample_sphere_cameras(100, 2.6, image_size=(1024, 1024))
    images = [rasterize_attributes(v, f, v, c).image.numpy() for c in cams]
    res = bake_vertex_features(v, f, cams, images)
    well = res.view_count >= 3
    assert well.mean() > 0.99
    err = np.linalg.norm(res.features[well] - v[well], axis=1)
    assert err.max() < 2e-3


def test_visibility_symmetric_with_rasterizer(body):
    v, f = body.template_vertices, body.faces
    cam = camera_look_at((0.5, 0.2, 2.5), (0, 0, 0), (128, 128))
    tol = 1e-3 * scene_scale(v)
    vis = vertex_visibility(v, f, cam, tol)
    dm = rasterize_depth(v, f, cam)
    idx = np.nonzero(vis.visible)[0]
    col = np.floor(vis.uv[idx, 0]).astype(int)
    row = np.floor(vis.uv[idx, 1]).astype(int)
    fid = dm.face[row, col]
    assert np.all(fid >= 0)
    uv, _ = project_points(v, cam)
    z = (v @ cam.rotation.T + cam.translation)[:, 2]
    pd = plane_depth(uv[f[fid]], z[f[fid]], vis.uv[idx])
    assert np.all(np.abs(pd - vis.depth[idx]) <= tol)
