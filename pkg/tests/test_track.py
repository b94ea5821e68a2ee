import csv
import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from meshmotion.attach import build_attachment
from meshmotion.register import Registration, registered_body
from meshmotion.body import PoseState, ShapeCoeffs
from meshmotion.render import RasterSettings
from meshmotion.synth import NoiseLevels, SynthSpec, generate_sequence
from meshmotion.track import (
    DirectParameterization,
    FeatureMapper,
    LossError,
    LossWeights,
    MotionParams,
    NeuralParameterization,
    TrackConfig,
    TrackError,
    arap_graph,
    deform,
    deform_batch,
    deform_sequence,
    eval_params,
    geman_mcclure,
    loss_arap,
    loss_bending,
    loss_feature,
    loss_reprojection,
    loss_silhouette,
    loss_temporal,
    positional_encoding,
    track_sequence,
    write_track_outputs,
)
from meshmotion.track.losses import BCE_EPS
from meshmotion.track.tracker import _objective, _targets


# ---------------------------------------------------------------- positional encoding


def test_pe_at_zero_is_sin0_cos1():
    e = positional_encoding(0, 60)
    assert torch.equal(e[0::2], torch.zeros(32))
    assert torch.equal(e[1::2], torch.ones(32))


@given(st.integers(0, 500), st.integers(2, 501))
@settings(max_examples=50, deadline=None)
def test_pe_norm_is_constant(t, F):
    e = positional_encoding(t, F)
    assert float((e * e).sum()) == pytest.approx(32.0, abs=1e-12)


def test_pe_injective_over_121_frames():
    e = positional_encoding(torch.arange(121), 121)
    d = torch.cdist(e, e) + torch.eye(121) * 1e9
    assert float(d.min()) > 1e-6


def test_pe_odd_dims_rejected():
    with pytest.raises(TrackError):
        positional_encoding(3, 10, dims=63)


# ---------------------------------------------------------------- parameterization


def _anchors(rng):
    return rng.normal(0, 0.2, 69), rng.normal(0, 0.1, 3), rng.normal(0, 0.3, 3)


def _randomize(module, gen_seed=1, scale=0.3):
    g = torch.Generator().manual_seed(gen_seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def test_anchor_reproduced_at_t0_for_any_weights(rng):
    a = _anchors(rng)
    p = NeuralParameterization(30, *a)
    _randomize(p)
    pose, trans, rot = eval_params(p, 0)
    assert torch.equal(pose, torch.as_tensor(a[0]))
    assert torch.equal(trans, torch.as_tensor(a[1]))
    assert torch.equal(rot, torch.as_tensor(a[2]))


def test_zero_init_gives_anchor_at_all_frames(rng):
    a = _anchors(rng)
    p = NeuralParameterization(30, *a)
    pose, trans, rot = p(torch.arange(30))
    assert torch.equal(pose, torch.as_tensor(a[0]).expand(30, -1))
    assert torch.equal(trans, torch.as_tensor(a[1]).expand(30, -1))
    assert torch.equal(rot, torch.as_tensor(a[2]).expand(30, -1))


def test_output_dimensions_and_determinism(rng):
    p = NeuralParameterization(20, *_anchors(rng))
    _randomize(p)
    out1 = p(torch.arange(20))
    out2 = p(torch.arange(20))
    assert [o.shape for o in out1] == [(20, 69), (20, 3), (20, 3)]
    assert all(torch.equal(a, b) for a, b in zip(out1, out2))


def test_mlp_jacobian_matches_finite_differences(rng):
    """Oracle: central differences in one weight vs autograd, 1e-3 relative."""
    p = NeuralParameterization(20, *_anchors(rng))
    _randomize(p)
    w = p.phi_pose.net[2].weight
    idx = (5, 7)
    t = torch.tensor([7])
    pose, _, _ = p(t)
    (g,) = torch.autograd.grad(pose.sum(), w)
    h = 1e-6
    with torch.no_grad():
        w[idx] += h
        up = p(t)[0].sum()
        w[idx] -= 2 * h
        dn = p(t)[0].sum()
        w[idx] += h
    fd = (up - dn) / (2 * h)
    assert float(fd) == pytest.approx(float(g[idx]), rel=1e-3)


def test_eval_params_range_checked(rng):
    p = NeuralParameterization(5, *_anchors(rng))
    with pytest.raises(TrackError):
        eval_params(p, 5)


def test_direct_parameterization_pins_frame0(rng):
    a = _anchors(rng)
    p = DirectParameterization(6, *a)
    _randomize(p)
    pose, _, _ = p(torch.arange(6))
    assert torch.equal(pose[0], torch.as_tensor(a[0]))
    assert not torch.equal(pose[3], torch.as_tensor(a[0]))


def test_motion_params_round_trip(tmp_path, rng):
    F = 4
    mp = MotionParams(0.6, rng.normal(size=10), rng.normal(size=(F, 69)), rng.normal(size=(F, 3)), rng.normal(size=(F, 3)), rng.normal(size=(F, 5, 3)))
    mp.save(tmp_path)
    back = MotionParams.load(tmp_path)
    for k in ("beta", "pose", "trans", "rot", "delta"):
        np.testing.assert_array_equal(getattr(back, k), getattr(mp, k))
    assert back.scale == mp.scale


def test_motion_params_rejects_nonfinite_delta(rng):
    d = np.zeros((2, 3, 3))
    d[1, 0, 0] = np.nan
    with pytest.raises(TrackError):
        MotionParams(1.0, np.zeros(10), np.zeros((2, 69)), np.zeros((2, 3)), np.zeros((2, 3)), d)


# ---------------------------------------------------------------- losses (unit suite)


def test_reprojection_zero_at_targets(rng):
    x = torch.as_tensor(rng.random((24, 2)))
    assert float(loss_reprojection(x, x.clone(), torch.ones(24))) == 0.0


def test_reprojection_single_joint_at_sigma():
    s = 0.05
    pred = torch.tensor([[0.5 + s, 0.5]])
    assert float(loss_reprojection(pred, torch.tensor([[0.5, 0.5]]), torch.ones(1), s)) == pytest.approx(s * s / 2, rel=1e-12)


def test_gm_zero_and_asymptote():
    s = 0.05
    assert float(geman_mcclure(torch.tensor(0.0), s)) == 0.0
    r = 100 * s
    assert float(geman_mcclure(torch.tensor(r * r), s)) == pytest.approx(s * s, rel=1e-3)


def test_reprojection_shape_mismatch():
    with pytest.raises(LossError):
        loss_reprojection(torch.zeros(24, 2), torch.zeros(23, 2), torch.ones(24))


def test_bce_matched_images_near_zero(rng):
    obs = (rng.random((20, 30)) > 0.5).astype(np.float64)
    assert float(loss_silhouette(torch.as_tensor(obs), obs)) <= 1e-5


def test_bce_half_is_ln2(rng):
    obs = (rng.random((20, 30)) > 0.5).astype(np.float64)
    assert float(loss_silhouette(torch.full((20, 30), 0.5), obs)) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_swap_is_worse(rng):
    obs = (rng.random((20, 30)) > 0.5).astype(np.float64)
    rendered = torch.as_tensor(obs)
    assert float(loss_silhouette(rendered, 1 - obs)) > float(loss_silhouette(rendered, obs))
    assert float(loss_silhouette(rendered, 1 - obs)) == pytest.approx(-math.log(BCE_EPS), rel=1e-6)


def test_bce_size_mismatch():
    with pytest.raises(LossError):
        loss_silhouette(torch.zeros(4, 4), np.zeros((4, 5)))


def test_cosine_loss_cases(rng):
    f = torch.as_tensor(rng.normal(size=(6, 7, 64)))
    mask = np.ones((6, 7), bool)
    assert float(loss_feature(f, f.clone(), mask).value) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_feature(f, -f, mask).value) == pytest.approx(2.0, abs=1e-12)
    a = torch.zeros(6, 7, 64)
    b = torch.zeros(6, 7, 64)
    a[..., 0] = 1.0
    b[..., 1] = 3.0
    assert float(loss_feature(a, b, mask).value) == pytest.approx(1.0, abs=1e-12)


def test_cosine_loss_empty_mask_flagged(rng):
    f = torch.as_tensor(rng.normal(size=(4, 4, 8)))
    out = loss_feature(f, f, np.zeros((4, 4), bool))
    assert out.empty and float(out.value) == 0.0


def test_temporal_constant_and_linear(rng):
    assert float(loss_temporal(torch.ones(7, 3))) == 0.0
    v = torch.as_tensor(rng.normal(size=3))
    x = torch.arange(9, dtype=torch.float64)[:, None] * v
    assert float(loss_temporal(x)) == pytest.approx(8 * float(v.norm()), rel=1e-12)


def test_temporal_sorted_scalar_series_is_minimal(rng):
    """Brute force over all permutations of a monotone scalar series, F = 5."""
    x = np.sort(rng.normal(size=5))
    base = float(loss_temporal(torch.as_tensor(x)[:, None]))
    for perm in itertools.permutations(range(5)):
        assert float(loss_temporal(torch.as_tensor(x[list(perm)])[:, None])) >= base - 1e-12


def test_temporal_needs_two_frames():
    with pytest.raises(LossError):
        loss_temporal(torch.zeros(1, 3))


def test_bending_values():
    assert float(loss_bending(torch.zeros(69))) == pytest.approx(4.0, abs=1e-12)
    p = torch.zeros(23, 3)
    p[17, 1] = math.log(2)  # left elbow (joint 18), sign +1
    assert float(loss_bending(p)) == pytest.approx(5.0, abs=1e-12)


@given(st.floats(-2, 2), st.floats(0.01, 1))
@settings(max_examples=30, deadline=None)
def test_bending_monotone_in_signed_angle(a, d):
    def val(x):
        p = torch.zeros(23, 3)
        p[18, 1] = -x  # right elbow (joint 19) has sign -1: signed angle is -p
        return float(loss_bending(p))

    assert val(a + d) > val(a)


def _grid(n=10):
    x, y = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    v = np.stack([x.ravel(), y.ravel(), 0.1 * np.sin(3 * x.ravel()) * np.cos(2 * y.ravel())], 1)
    f = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, i * n + j + 1, (i + 1) * n + j, (i + 1) * n + j + 1
            f += [(a, b, d), (a, d, c)]
    return v, np.array(f)


def test_arap_zero_under_rigid_motion(rng):
    from scipy.spatial.transform import Rotation

    v, f = _grid()
    R = Rotation.random(random_state=3).as_matrix()
    moved = torch.as_tensor(v @ R.T + rng.normal(size=3))
    assert float(loss_arap(moved, v, f)) < 1e-8


def test_arap_positive_under_scaling():
    v, f = _grid()
    assert float(loss_arap(torch.as_tensor(2 * v), v, f)) > 0


def test_arap_matches_bruteforce(rng):
    """Oracle: explicit per-vertex SVD loop with weights from cotangents of the triangle angles."""
    v, f = _grid(10)
    d = v + 0.05 * rng.normal(size=v.shape)
    nbrs = {}
    for tri in f:
        for k in range(3):
            i, j, o = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
            a, b = v[i] - v[o], v[j] - v[o]
            cot = a @ b / np.linalg.norm(np.cross(a, b))
            for p, q in ((i, j), (j, i)):
                nbrs.setdefault(p, {}).setdefault(q, 0.0)
                nbrs[p][q] += 0.5 * cot
    total = 0.0
    for i, nb in nbrs.items():
        S = np.zeros((3, 3))
        for j, w in nb.items():
            w = max(w, 0.0)
            S += w * np.outer(v[i] - v[j], d[i] - d[j])
        U, _, Vt = np.linalg.svd(S)
        R = Vt.T @ U.T
        if np.linalg.det(R) < 0:
            Vt[2] *= -1
            R = Vt.T @ U.T
        for j, w in nb.items():
            r = (d[i] - d[j]) - R @ (v[i] - v[j])
            total += max(w, 0.0) * r @ r
    assert float(loss_arap(torch.as_tensor(d), v, f)) == pytest.approx(total, rel=1e-6)


def test_arap_drops_degenerate_edges():
    v, f = _grid(4)
    v = np.vstack([v, v[:1]])
    f = np.vstack([f, [[0, 16, 1]]])
    g = arap_graph(v, f)
    assert g.degenerate == 1


def test_feature_mapper_identity_start(rng):
    m = FeatureMapper(64)
    x = torch.as_tensor(rng.normal(size=(10, 64)))
    assert torch.equal(m(x), x)


def test_loss_weights_nonnegative():
    with pytest.raises(TrackError):
        LossWeights(joints=-1.0)


def test_config_rejects_unknown_disable():
    with pytest.raises(TrackError):
        TrackConfig(disable=("nope",))


# ---------------------------------------------------------------- deformation and tracking


@pytest.fixture(scope="module")
def small(body):
    spec = SynthSpec(frames=3, resolution=(48, 80), feature_resolution=(12, 20), registration_size=64, bake_views=2, bake_size=32, bake_feature_size=16)
    seq = generate_sequence(spec, body)
    gt = seq.ground_truth
    reg = Registration(gt.scale, ShapeCoeffs(gt.beta), PoseState(gt.pose[0], gt.rot[0]), gt.trans[0], gt.rot[0])
    att = build_attachment(seq.mesh, registered_body(body, reg), body)
    return seq, reg, att


def test_deform_t0_reproduces_rest_mesh(small, body):
    seq, reg, att = small
    v = deform(att, body, seq.ground_truth, 0)
    np.testing.assert_allclose(v[att.inlier], seq.mesh.vertices[att.inlier], atol=1e-12)


def test_deform_translation_equivariance(small, body):
    seq, reg, att = small
    gt = seq.ground_truth
    shift = np.array([0.1, -0.2, 0.05])
    moved = MotionParams(gt.scale, gt.beta, gt.pose, gt.trans + shift, gt.rot)
    np.testing.assert_allclose(deform(att, body, moved, 2), deform(att, body, gt, 2) + shift, atol=1e-10)


def test_deform_gradient_matches_finite_differences(small, body):
    seq, reg, att = small
    gt = seq.ground_truth
    pose = torch.as_tensor(gt.pose[1:2]).clone().requires_grad_(True)
    weights = torch.as_tensor(np.random.default_rng(0).normal(size=(att.num_vertices, 3)))

    def f(p):
        out = deform_batch(att, body, gt.scale, gt.beta, p, torch.as_tensor(gt.trans[1:2]), torch.as_tensor(gt.rot[1:2]))
        return (out.mesh_vertices[0] * weights).sum()

    (g,) = torch.autograd.grad(f(pose), pose)
    h = 1e-6
    for k in (2, 40, 55):
        e = torch.zeros_like(pose)
        e[0, k] = h
        fd = (f(pose.detach() + e) - f(pose.detach() - e)) / (2 * h)
        assert float(fd) == pytest.approx(float(g[0, k]), rel=1e-3, abs=1e-9)


def test_end_to_end_gradient_check(small, body):
    """d(total)/d(one MLP weight) vs central differences at 10 weights, single frame."""
    seq, reg, att = small
    F = seq.spec.frames
    cfg = TrackConfig(softness_sigma=2e-2, weights=LossWeights(temp_trans=0, temp_rot=0, temp_pose=0, temp_joints=0))
    param = NeuralParameterization(F, reg.pose0.body_pose.reshape(-1), reg.trans0, reg.rot0)
    _randomize(param, scale=0.05)
    mapper = FeatureMapper(seq.vertex_features.shape[1])
    fcam = seq.camera.with_image_size(*seq.spec.feature_resolution)
    tg = _targets(seq.observations, seq.spec.feature_resolution)
    sett = RasterSettings(softness_sigma=cfg.softness_sigma, faces_per_pixel=cfg.faces_per_pixel)
    faces = np.asarray(seq.faces)
    scale = torch.tensor([reg.scale])
    beta = torch.as_tensor(reg.shape.beta)[None]
    vfeat = torch.as_tensor(seq.vertex_features)

    def total():
        terms = _objective(cfg, "B", param, mapper, None, body, att, faces, None, scale, beta, seq.camera, fcam, sett, tg, vfeat, torch.tensor([1]), torch.arange(F))
        return sum(terms.values())

    weights = [param.phi_pose.net[0].weight, param.phi_trans.net[2].weight, param.phi_rot.net[6].weight]
    grads = torch.autograd.grad(total(), weights)
    rng = np.random.default_rng(5)
    h = 1e-6
    for n in range(10):
        k = n % 3
        w, g = weights[k], grads[k]
        idx = tuple(int(rng.integers(s)) for s in w.shape)
        with torch.no_grad():
            w[idx] += h
            up = float(total())
            w[idx] -= 2 * h
            dn = float(total())
            w[idx] += h
        fd = (up - dn) / (2 * h)
        assert fd == pytest.approx(float(g[idx]), rel=1e-2, abs=1e-9)


def _quick_cfg(**kw):
    base = dict(iterations=6, batch_size=2, log_every=0, seed=3)
    base.update(kw)
    return TrackConfig(**base)


def test_single_frame_recovers_registration(small, body):
    seq, reg, att = small
    res = track_sequence(seq.faces, att, body, reg, seq.observations[:1], seq.vertex_features, seq.camera, _quick_cfg())
    _, _, j = deform_sequence(att, body, res.params)
    np.testing.assert_allclose(j[0], seq.trajectory.joints[0], atol=1e-3)


def test_tracking_is_deterministic(small, body):
    seq, reg, att = small
    a = track_sequence(seq.faces, att, body, reg, seq.observations, seq.vertex_features, seq.camera, _quick_cfg())
    b = track_sequence(seq.faces, att, body, reg, seq.observations, seq.vertex_features, seq.camera, _quick_cfg())
    assert a.history[-1]["total"] == pytest.approx(b.history[-1]["total"], rel=1e-6)
    np.testing.assert_array_equal(a.params.pose, b.params.pose)


def test_tracking_stages_and_outputs(small, body, tmp_path):
    seq, reg, att = small
    res = track_sequence(seq.faces, att, body, reg, seq.observations, seq.vertex_features, seq.camera, _quick_cfg(iterations=10))
    stages = [h["stage"] for h in res.history]
    assert stages == ["A"] * 4 + ["B"] * 4 + ["C"] * 2
    assert "silhouette" not in res.history[0] and "silhouette" in res.history[5]
    assert "arap" in res.history[-1] and "arap" not in res.history[5]
    assert res.params.delta is not None and res.params.delta.shape == (3, att.num_vertices, 3)
    # anchoring survives optimization
    np.testing.assert_array_equal(res.params.pose[0], reg.pose0.body_pose.reshape(-1))
    out = write_track_outputs(res, att, body, seq.faces, tmp_path / "track")
    assert (out / "params.jsonl").read_text().count("\n") == 3
    assert (out / "delta.zip").exists() and (out / "trajectory.zip").exists()
    assert len(list((out / "meshes").glob("*.obj"))) == 3
    rows = list(csv.DictReader(open(out / "loss.csv")))
    assert len(rows) == 10 and rows[0]["stage"] == "A"


def test_disabled_term_absent(small, body):
    seq, reg, att = small
    res = track_sequence(seq.faces, att, body, reg, seq.observations, seq.vertex_features, seq.camera, _quick_cfg(disable=("temporal", "pose_prior")))
    assert all("temp_pose" not in h and "pose_prior" not in h for h in res.history)


def test_tracking_errors(small, body):
    seq, reg, att = small
    with pytest.raises(TrackError):
        track_sequence(seq.faces, att, body, reg, [], seq.vertex_features, seq.camera, _quick_cfg())
    empty = [type(o)(o.landmarks, np.zeros_like(o.silhouette), o.features, o.frame_index) for o in seq.observations]
    with pytest.raises(TrackError, match="silhouette"):
        track_sequence(seq.faces, att, body, reg, empty, seq.vertex_features, seq.camera, _quick_cfg())
    with pytest.raises(TrackError):
        track_sequence(seq.faces, att, body, reg, seq.observations, seq.vertex_features[:, :10], seq.camera, _quick_cfg())


def test_nonfinite_loss_reports_stage(small, body):
    seq, reg, att = small
    bad = [type(o)(o.landmarks, o.silhouette, o.features * np.nan, o.frame_index) for o in seq.observations]
    with pytest.raises(TrackError, match="stage B"):
        track_sequence(seq.faces, att, body, reg, bad, seq.vertex_features, seq.camera, _quick_cfg())
