import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshmotion.ingest import (
    FeatureBasisError,
    LandmarkError,
    LandmarkFrame,
    MeshError,
    default_landmark_map,
    extract_silhouette,
    fit_feature_basis,
    joints_to_source_landmarks,
    load_and_normalize_mesh,
    read_landmarks_jsonl,
    remap_landmarks,
    smooth_landmarks,
    write_landmarks_jsonl,
    write_obj,
)


def _box(center, size):
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float) - 0.5
    v = corners * np.asarray(size) + np.asarray(center)
    faces = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                      [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])  # fmt: skip
    return v, faces


def test_unit_cube_normalization(tmp_path):
    v, f = _box((5, 5, 5), (1, 1, 1))
    write_obj(tmp_path / "c.obj", v, f)
    m = load_and_normalize_mesh(tmp_path / "c.obj")
    np.testing.assert_allclose(m.vertices.mean(0), 0, atol=1e-6)
    assert (m.vertices.max(0) - m.vertices.min(0)).max() == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(m.centroid, (5, 5, 5), atol=1e-6)
    assert m.scale == pytest.approx(1.0)


def test_box_scale_and_round_trip(tmp_path):
    v, f = _box((1, -2, 0.5), (2, 1, 1))
    write_obj(tmp_path / "b.obj", v, f)
    m = load_and_normalize_mesh(tmp_path / "b.obj")
    assert m.scale == pytest.approx(0.5)
    assert (m.vertices.max(0) - m.vertices.min(0)).max() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(m.denormalize(), v, atol=1e-6)


def test_ply_reader(tmp_path):
    v, f = _box((0, 0, 0), (1, 2, 3))
    lines = ["ply", "format ascii 1.0", f"element vertex {len(v)}", "property float x", "property float y", "property float z",
             f"element face {len(f)}", "property list uchar int vertex_indices", "end_header"]  # fmt: skip
    lines += [" ".join(map(str, p)) for p in v] + ["3 " + " ".join(map(str, t)) for t in f]
    (tmp_path / "b.ply").write_text("\n".join(lines) + "\n")
    m = load_and_normalize_mesh(tmp_path / "b.ply")
    assert len(m.vertices) == 8 and len(m.faces) == 12
    np.testing.assert_allclose(m.denormalize(), v, atol=1e-6)


def test_quad_faces_rejected(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshError, match="only triangles"):
        load_and_normalize_mesh(tmp_path / "q.obj")


def test_empty_mesh_rejected(tmp_path):
    (tmp_path / "e.obj").write_text("# nothing\n")
    with pytest.raises(MeshError, match="empty"):
        load_and_normalize_mesh(tmp_path / "e.obj")


def _frame(rng, conf=None):
    pts = rng.uniform(0, 1, (33, 2))
    return LandmarkFrame(pts, np.ones(33) if conf is None else conf)


def test_remap_zero_confidence(rng):
    out = remap_landmarks(_frame(rng, np.zeros(33)))
    assert np.all(out.confidence == 0)


def test_remap_twice_raises(rng):
    once = remap_landmarks(_frame(rng))
    with pytest.raises(LandmarkError, match="twice"):
        remap_landmarks(once)
    assert remap_landmarks(once, allow_remapped=True) is once


def test_remap_permutation_matches_table():
    pts = np.stack([np.arange(33) * 1e-2, np.arange(33) * 1e-2 + 0.5], 1)
    out = remap_landmarks(LandmarkFrame(pts, np.ones(33)))
    raw = json.loads((__import__("importlib").resources.files("meshmotion.data") / "landmark_map.json").read_text())
    for j, (name, src) in enumerate(raw["joints"].items()):
        if len(src) == 1:
            np.testing.assert_array_equal(out.points[j], pts[src[0]])
        elif len(src) == 0:
            assert out.confidence[j] == 0
        else:
            np.testing.assert_allclose(out.points[j], pts[src].mean(0))


def test_joints_to_source_inverse(rng):
    m = default_landmark_map()
    pts = rng.uniform(0, 1, (24, 2))
    back = remap_landmarks(joints_to_source_landmarks(pts, np.ones(24)))
    has = np.array([len(s) > 0 for s in m.sources])
    np.testing.assert_allclose(back.points[has], pts[has], atol=1e-12)


def _seq(values):
    return [LandmarkFrame(np.full((24, 2), v), np.ones(24), "body", i) for i, v in enumerate(values)]


def test_smoothing_hand_example():
    out = smooth_landmarks(_seq([0, 1, 0, 1, 0]), 3)
    np.testing.assert_allclose([f.points[0, 0] for f in out], [1 / 3, 1 / 3, 2 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_smoothing_identity_and_constant(rng):
    frames = [LandmarkFrame(rng.uniform(0, 1, (24, 2)), rng.uniform(0, 1, 24), "body", i) for i in range(7)]
    for a, b in zip(smooth_landmarks(frames, 1), frames):
        np.testing.assert_array_equal(a.points, b.points)
    const = _seq([0.3] * 6)
    for f in smooth_landmarks(const, 5):
        np.testing.assert_allclose(f.points, 0.3, atol=1e-15)


def test_smoothing_even_window():
    with pytest.raises(LandmarkError):
        smooth_landmarks(_seq([0, 1]), 4)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=9), st.floats(-0.5, 0.5), st.sampled_from([1, 3, 5, 7]))
def test_smoothing_shift_equivariant(values, shift, window):
    a = smooth_landmarks(_seq(values), window)
    b = smooth_landmarks(_seq([v + shift for v in values]), window)
    for fa, fb in zip(a, b):
        np.testing.assert_allclose(fb.points, fa.points + shift, atol=1e-12)


def test_landmarks_jsonl_round_trip(tmp_path, rng):
    frames = [_frame(rng) for _ in range(3)]
    for i, f in enumerate(frames):
        f.frame = i
    write_landmarks_jsonl(tmp_path / "l.jsonl", frames)
    back = read_landmarks_jsonl(tmp_path / "l.jsonl")
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.points, b.points)


def test_silhouette_examples():
    assert extract_silhouette(np.ones((4, 5, 3))).sum() == 0
    assert extract_silhouette(np.zeros((4, 5, 3))).all()
    img = np.ones((20, 20, 3))
    img[5:12, 3:9] = 0.5
    expect = np.zeros((20, 20), np.uint8)
    expect[5:12, 3:9] = 1
    np.testing.assert_array_equal(extract_silhouette(img), expect)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_silhouette_monotone_in_threshold(t1, t2):
    lo, hi = sorted((t1, t2))
    img = np.random.default_rng(1).uniform(0.9, 1.0, (16, 16, 3))
    assert np.all(extract_silhouette(img, hi) >= extract_silhouette(img, lo))


def test_pca_in_subspace_reconstruction(rng):
    B = np.linalg.qr(rng.normal(size=(128, 64)))[0].T
    X = rng.normal(size=(400, 64)) @ B + rng.normal(size=128)
    basis = fit_feature_basis(X)
    np.testing.assert_allclose(basis.components @ basis.components.T, np.eye(64), atol=1e-5)
    np.testing.assert_allclose(basis.reconstruct(basis.project(X)), X, atol=1e-5)
    Y = rng.normal(size=(10, 64)) @ B
    P = basis.project(Y + basis.mean)
    np.testing.assert_allclose(P @ P.T, Y @ Y.T, atol=1e-5)


def test_pca_rank_deficient(rng):
    plane = np.linalg.qr(rng.normal(size=(128, 2)))[0].T
    X = rng.normal(size=(300, 2)) @ plane
    basis = fit_feature_basis(X)
    assert basis.rank == 2
    total = basis.explained_variance.sum()
    assert np.all(basis.explained_variance[2:] < 1e-8 * total)
    np.testing.assert_allclose(basis.components @ basis.components.T, np.eye(64), atol=1e-5)
    with pytest.raises(FeatureBasisError, match="rank 2"):
        fit_feature_basis(X, strict=True)


def test_pca_needs_more_samples(rng):
    with pytest.raises(FeatureBasisError):
        fit_feature_basis(rng.normal(size=(64, 100)))
