import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from meshmotion.attach import AttachError, AttachmentMap, AttachThresholds, apply_attachment, build_attachment, build_attachment_arrays
from meshmotion.body import PoseState, ShapeCoeffs, forward
from meshmotion.ingest.mesh_io import InputMesh, vertex_normals
from meshmotion.render import fibonacci_sphere


def _sphere(n=400, radius=0.5):
    v = fibonacci_sphere(n) * radius
    f = ConvexHull(v).simplices.copy()
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    flip = (fn * v[f].mean(1)).sum(1) < 0
    f[flip] = f[flip][:, ::-1]
    return v, f


def _near_surface_points(v, f, rng, n=300, max_offset=0.01):
    fi = rng.integers(0, len(f), n)
    w = rng.dirichlet(np.ones(3), n) * 0.9 + 0.1 / 3  # keep feet inside the face
    tri = v[f[fi]]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)
    return (w[:, :, None] * tri).sum(1) + rng.uniform(-max_offset, max_offset, (n, 1)) * fn


def test_mesh_is_body_surface(body):
    posed = forward(body, ShapeCoeffs.zeros(), PoseState.zeros())
    att = build_attachment(InputMesh(posed.vertices, body.faces, np.zeros(3), 1.0), posed, body)
    assert att.inlier.all()
    np.testing.assert_array_equal(att.donor, np.arange(len(posed.vertices)))
    assert np.abs(att.offset_d).max() < 1e-12
    # one-hot barycentrics on a face incident to the vertex
    incident = body.faces[att.face_index]
    hot = np.argmax(att.bary, axis=1)
    np.testing.assert_array_equal(incident[np.arange(len(hot)), hot], np.arange(len(hot)))
    np.testing.assert_allclose(att.bary.max(1), 1.0, atol=1e-9)


def test_centroid_displaced_along_normal():
    v, f = _sphere()
    k, h = 17, 0.003
    tri = v[f[k]]
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    n /= np.linalg.norm(n)
    x = (tri.mean(0) + h * n)[None]
    att = build_attachment_arrays(x, None, v, f)
    assert att.face_index[0] == k
    np.testing.assert_allclose(att.bary[0], [1 / 3, 1 / 3, 1 / 3], atol=1e-12)
    assert att.offset_d[0] == pytest.approx(h, abs=1e-12)


def test_inside_offset_is_negative():
    v, f = _sphere()
    x = v[f[5]].mean(0)[None] * 0.98
    att = build_attachment_arrays(x, None, v, f)
    assert att.offset_d[0] < 0


def test_sphere_round_trip(rng):
    v, f = _sphere()
    x = _near_surface_points(v, f, rng)
    att = build_attachment_arrays(x, None, v, f)
    out = apply_attachment(att, torch.as_tensor(v), f).numpy()
    assert np.abs(out - x).max() <= 1e-6
    # the frame evaluation alone (without the stored rest correction) already matches
    assert np.abs(att.rest_gamma - x).max() < 1e-12
    assert np.abs(out[att.inlier] - x[att.inlier]).max() == 0.0


def test_invariants(rng):
    v, f = _sphere()
    x = _near_surface_points(v, f, rng, max_offset=0.05)
    att = build_attachment_arrays(x, None, v, f, AttachThresholds(distance_fraction=0.015))
    np.testing.assert_allclose(att.bary.sum(1), 1.0, atol=1e-6)
    assert att.bary.min() >= -1e-4 and att.bary.max() <= 1 + 1e-4
    assert np.all(att.donor[att.inlier] == np.nonzero(att.inlier)[0])
    assert att.inlier[att.donor].all()
    assert (~att.inlier).any()


def _posed_pair(body, rng):
    posed = forward(body, ShapeCoeffs.zeros(), PoseState(rng.normal(0, 0.05, 69), np.zeros(3)))
    x = posed.vertices + rng.normal(0, 5e-4, posed.vertices.shape)
    x[::97] += rng.normal(0, 0.2, (len(x[::97]), 3))  # gross mismatches
    return posed, InputMesh(x, body.faces, np.zeros(3), 1.0)


def test_outliers_donors_and_exact_rest(body, rng):
    posed, mesh = _posed_pair(body, rng)
    att = build_attachment(mesh, posed, body)
    assert (~att.inlier[::97]).mean() > 0.9
    assert att.inlier.mean() > 0.9
    assert att.inlier[att.donor].all()
    out = apply_attachment(att, torch.as_tensor(posed.vertices), body.faces).numpy()
    assert np.abs(out[att.inlier] - mesh.vertices[att.inlier]).max() == 0.0
    assert np.abs(out - mesh.vertices).max() < 1e-9


def test_rigid_equivariance(body, rng):
    posed, mesh = _posed_pair(body, rng)
    att = build_attachment(mesh, posed, body)
    R = Rotation.from_rotvec([0.4, -1.1, 0.7]).as_matrix()
    t = np.array([0.3, -0.2, 1.5])
    moved = posed.vertices @ R.T + t
    out = apply_attachment(att, torch.as_tensor(moved), body.faces).numpy()
    assert np.abs(out - (mesh.vertices @ R.T + t)).max() < 1e-6


def test_gradient_includes_normal_term(rng):
    v, f = _sphere(100)
    x = _near_surface_points(v, f, rng, n=40, max_offset=0.02)
    x[0] += 0.4 * x[0]  # one far outlier to exercise the donor frame
    att = build_attachment_arrays(x, None, v, f)
    assert not att.inlier.all()
    pv = torch.as_tensor(v + rng.normal(0, 0.01, v.shape))
    assert torch.autograd.gradcheck(lambda p: apply_attachment(att, p, f), (pv.clone().requires_grad_(True),), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_topology_mismatch(rng):
    v, f = _sphere()
    att = build_attachment_arrays(_near_surface_points(v, f, rng, n=10), None, v, f)
    with pytest.raises(AttachError, match="topology"):
        apply_attachment(att, torch.as_tensor(v[:-1]), f)


def test_zero_inliers():
    v, f = _sphere()
    far = fibonacci_sphere(20) * 5.0
    with pytest.raises(AttachError, match="no inlier"):
        build_attachment_arrays(far, None, v, f, AttachThresholds(distance_fraction=0.01))


def test_archive_round_trip(tmp_path, body, rng):
    posed, mesh = _posed_pair(body, rng)
    att = build_attachment(mesh, posed, body)
    att.save(tmp_path / "att.zip")
    back = AttachmentMap.load(tmp_path / "att.zip")
    for name in ("face_index", "bary", "offset_d", "inlier", "donor", "local_offset", "rest_vertices", "rest_gamma"):
        np.testing.assert_array_equal(getattr(back, name), getattr(att, name))
    out = apply_attachment(back, torch.as_tensor(posed.vertices), body.faces).numpy()
    assert np.abs(out[back.inlier] - mesh.vertices[back.inlier]).max() == 0.0


@settings(max_examples=15, deadline=None)
@given(
    st.floats(0.005, 0.2), st.floats(1.0, 3.0),
    st.floats(10.0, 80.0), st.floats(1.0, 3.0),
    st.floats(1.0, 5.0), st.floats(1.0, 4.0),
)  # fmt: skip
def test_loosening_thresholds_is_monotone(dist, dist_mult, angle, angle_mult, sig, sig_mult):
    rng = np.random.default_rng(3)
    v, f = _sphere(200)
    mv, mf = _sphere(150, radius=0.52)
    mv = mv + rng.normal(0, 0.01, mv.shape)
    tight = AttachThresholds(distance_fraction=dist, normal_angle_deg=angle, knn_sigmas=sig)
    loose = AttachThresholds(distance_fraction=dist * dist_mult, normal_angle_deg=min(angle * angle_mult, 180.0), knn_sigmas=sig * sig_mult)
    try:
        a = build_attachment_arrays(mv, mf, v, f, tight)
    except AttachError:
        return
    b = build_attachment_arrays(mv, mf, v, f, loose)
    assert np.all(b.inlier[a.inlier])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_closest_point_matches_grid_search(seed):
    from meshmotion.attach.attachment import closest_point_barycentrics

    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(3, 3))
    p = r.normal(size=3) * 1.5
    w = closest_point_barycentrics(p, a, b, c)
    assert w.min() >= -1e-12 and abs(w.sum() - 1) < 1e-12
    d = np.linalg.norm(w[0] * a + w[1] * b + w[2] * c - p)
    s = np.linspace(0, 1, 301)
    u, v = np.meshgrid(s, s)
    keep = u + v <= 1
    grid = (1 - u - v)[keep][:, None] * a + u[keep][:, None] * b + v[keep][:, None] * c
    assert d <= np.linalg.norm(grid - p, axis=1).min() + 1e-12
