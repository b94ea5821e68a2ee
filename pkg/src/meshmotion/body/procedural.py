"""Procedural SMPL-layout body model.

The published model parameters cannot be redistributed, so tests and the synthetic
pipeline use this generator instead: an implicit capsule body meshed with marching
cubes, distance-based skinning weights, hand-designed linear shape directions,
small localized pose correctives, and a non-negative joint regressor that reproduces
the designed skeleton exactly on the template.
"""

import logging

import numpy as np
from scipy.optimize import nnls
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .model import NUM_BETAS, NUM_BODY_JOINTS, NUM_JOINTS, ROOT_SENTINEL, BodyModel, body_model_from_arrays

logger = logging.getLogger(__name__)

PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21])

# T-pose skeleton in meters: y up, facing +z, subject's left at +x
JOINTS = np.array([
    [0.00, 0.00, 0.00],    # pelvis
    [0.09, -0.08, 0.00],   # left_hip
    [-0.09, -0.08, 0.00],  # right_hip
    [0.00, 0.11, -0.01],   # spine1
    [0.10, -0.48, 0.01],   # left_knee
    [-0.10, -0.48, 0.01],  # right_knee
    [0.00, 0.24, 0.00],    # spine2
    [0.10, -0.88, -0.03],  # left_ankle
    [-0.10, -0.88, -0.03], # right_ankle
    [0.00, 0.30, 0.01],    # spine3
    [0.11, -0.94, 0.09],   # left_foot
    [-0.11, -0.94, 0.09],  # right_foot
    [0.00, 0.50, -0.01],   # neck
    [0.07, 0.41, 0.00],    # left_collar
    [-0.07, 0.41, 0.00],   # right_collar
    [0.00, 0.58, 0.03],    # head
    [0.18, 0.44, -0.01],   # left_shoulder
    [-0.18, 0.44, -0.01],  # right_shoulder
    [0.44, 0.43, -0.02],   # left_elbow
    [-0.44, 0.43, -0.02],  # right_elbow
    [0.69, 0.43, -0.01],   # left_wrist
    [-0.69, 0.43, -0.01],  # right_wrist
    [0.77, 0.43, -0.01],   # left_hand
    [-0.77, 0.43, -0.01],  # right_hand
])  # fmt: skip

# leaf joints get a bone towards an end point
_LEAF_TIPS = {
    10: [0.11, -0.95, 0.15],
    11: [-0.11, -0.95, 0.15],
    15: [0.00, 0.74, 0.03],
    22: [0.85, 0.43, -0.01],
    23: [-0.85, 0.43, -0.01],
}


def _bones():
    """(joint, start, end) segments; a joint's transform drives the segment to each child."""
    bones = []
    for j in range(NUM_JOINTS):
        children = np.flatnonzero(PARENTS == j)
        for c in children:
            bones.append((j, JOINTS[j], JOINTS[c]))
        if j in _LEAF_TIPS:
            bones.append((j, JOINTS[j], np.array(_LEAF_TIPS[j])))
    return bones


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(p - closest, axis=1), t, closest


def _capsule(p, a, b, ra, rb):
    d, t, _ = _seg_dist(p, np.asarray(a, float), np.asarray(b, float))
    return d - (ra + (rb - ra) * t)


def _ellipsoid(p, c, r):
    q = (p - np.asarray(c)) / np.asarray(r)
    k = np.linalg.norm(q, axis=1)
    return (k - 1.0) * min(r)


def _smin(a, b, k=0.035):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def body_sdf(p: np.ndarray) -> np.ndarray:
    J = JOINTS
    parts = [
        _ellipsoid(p, [0.0, -0.03, 0.0], [0.165, 0.12, 0.11]),
        _ellipsoid(p, [0.0, 0.13, 0.0], [0.145, 0.15, 0.10]),
        _ellipsoid(p, [0.0, 0.33, -0.005], [0.17, 0.14, 0.105]),
        _capsule(p, [0, 0.44, -0.01], [0, 0.58, 0.01], 0.05, 0.045),
        _ellipsoid(p, [0.0, 0.665, 0.025], [0.08, 0.105, 0.095]),
    ]
    # (collar, shoulder, elbow, wrist, hand, hip, knee, ankle, foot) for each side
    for c, sh, el, wr, ha, hi, kn, an, fo in ((13, 16, 18, 20, 22, 1, 4, 7, 10), (14, 17, 19, 21, 23, 2, 5, 8, 11)):
        parts += [
            _capsule(p, J[c], J[sh], 0.06, 0.058),
            _capsule(p, J[sh], J[el], 0.055, 0.043),
            _capsule(p, J[el], J[wr], 0.043, 0.032),
            _capsule(p, J[wr], _LEAF_TIPS[ha], 0.032, 0.025),
            _capsule(p, J[hi], J[kn], 0.085, 0.058),
            _capsule(p, J[kn], J[an], 0.055, 0.04),
            _capsule(p, J[an], _LEAF_TIPS[fo], 0.042, 0.032),
        ]
    d = parts[0]
    for q in parts[1:]:
        d = _smin(d, q)
    return d


def _mesh_from_sdf(spacing: float):
    lo = np.array([-0.92, -1.02, -0.16])
    hi = np.array([0.92, 0.80, 0.22])
    n = np.ceil((hi - lo) / spacing).astype(int) + 1
    axes = [lo[i] + spacing * np.arange(n[i]) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    vol = body_sdf(grid).reshape(n)
    verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=(spacing,) * 3)
    verts = verts + lo
    return _clean(verts, faces)


def _clean(verts, faces, merge_tol=1e-7):
    # weld coincident vertices, drop degenerate faces and unreferenced vertices
    key = np.round(verts / merge_tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    verts = verts[first]
    faces = inverse.reshape(-1)[faces]
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]
    area = np.linalg.norm(np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]]), axis=1)
    faces = faces[area > 1e-12]
    used = np.unique(faces)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts, faces = verts[used], remap[faces]
    # outward orientation: positive enclosed volume
    vol = np.einsum("ij,ij->i", verts[faces[:, 0]], np.cross(verts[faces[:, 1]], verts[faces[:, 2]])).sum()
    if vol < 0:
        faces = faces[:, ::-1].copy()
    return verts, faces


def _smooth(verts, faces, iterations=3, lam=0.5, mu=-0.53):
    # Taubin smoothing evens out the marching-cubes staircase without shrinking
    V = len(verts)
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    deg = np.bincount(edges.ravel(), minlength=V).astype(float)
    for _ in range(iterations):
        for f in (lam, mu):
            acc = np.zeros_like(verts)
            np.add.at(acc, edges[:, 0], verts[edges[:, 1]])
            np.add.at(acc, edges[:, 1], verts[edges[:, 0]])
            verts = verts + f * (acc / deg[:, None] - verts)
    return verts


def _skin_weights(verts, tau=0.02, keep=4):
    bones = _bones()
    dist = np.full((len(verts), NUM_JOINTS), np.inf)
    for j, a, b in bones:
        d, _, _ = _seg_dist(verts, a, b)
        dist[:, j] = np.minimum(dist[:, j], d)
    rel = dist - dist.min(1, keepdims=True)
    w = np.exp(-rel / tau)
    # keep the strongest influences only
    order = np.argsort(-w, axis=1)
    mask = np.zeros_like(w, dtype=bool)
    np.put_along_axis(mask, order[:, :keep], True, axis=1)
    w = np.where(mask, w, 0.0)
    return w / w.sum(1, keepdims=True), dist


def _bone_frames(verts):
    """Radial offset of each vertex from its nearest bone axis."""
    best = np.full(len(verts), np.inf)
    radial = np.zeros_like(verts)
    for _, a, b in _bones():
        d, _, closest = _seg_dist(verts, a, b)
        upd = d < best
        best[upd] = d[upd]
        radial[upd] = (verts - closest)[upd]
    return radial


def _ramp(x, a, b):
    return np.clip((x - a) / (b - a), 0.0, 1.0)


def _shape_dirs(verts, weights):
    x, y, z = verts.T
    sx = np.sign(x)
    radial = _bone_frames(verts)
    limbs = weights[:, [1, 2, 4, 5, 7, 8, 16, 17, 18, 19, 20, 21]].sum(1)
    dirs = np.zeros((len(verts), 3, NUM_BETAS))
    dirs[:, 1, 0] = 0.05 * y
    dirs[:, :, 1] = 0.10 * radial
    dirs[:, 1, 2] = -0.03 * _ramp(-0.08 - y, 0.0, 0.80) * (y < 0.0)
    dirs[:, 0, 3] = 0.03 * sx * _ramp(np.abs(x), 0.18, 0.70)
    dirs[:, 0, 4] = 0.02 * sx * _ramp(np.abs(x), 0.05, 0.18) * _ramp(y, 0.25, 0.35)
    dirs[:, 2, 5] = 0.03 * np.exp(-(((y - 0.12) / 0.12) ** 2)) * _ramp(z, 0.0, 0.1) * np.exp(-(x**2) / 0.02)
    dirs[:, 0, 6] = 0.02 * sx * np.exp(-(((y + 0.08) / 0.12) ** 2)) * _ramp(np.abs(x), 0.0, 0.15)
    head_c = np.array([0.0, 0.665, 0.025])
    dirs[:, :, 7] = 0.10 * (verts - head_c) * weights[:, [15]]
    dirs[:, 1, 8] = 0.03 * _ramp(y, 0.0, 0.3)
    dirs[:, :, 9] = 0.12 * radial * limbs[:, None]
    return dirs


def _pose_dirs(verts, weights, rng, scale=0.004):
    V = len(verts)
    dirs = np.zeros((V, 3, NUM_BODY_JOINTS * 9))
    for j in range(1, NUM_JOINTS):
        p = PARENTS[j]
        # correctives live where the joint and its parent share influence
        region = np.sqrt(weights[:, j] * weights[:, p])
        if region.max() < 1e-6:
            region = weights[:, j] * 0.1
        basis = rng.standard_normal((3, 9))
        dirs[:, :, 9 * (j - 1) : 9 * j] = scale * region[:, None, None] * basis[None]
    return dirs


def _joint_regressor(verts, k=24):
    tree = cKDTree(verts)
    reg = np.zeros((NUM_JOINTS, len(verts)))
    for j in range(NUM_JOINTS):
        _, idx = tree.query(JOINTS[j], k=k)
        A = np.vstack([verts[idx].T, 10.0 * np.ones((1, k))])
        b = np.concatenate([JOINTS[j], [10.0]])
        w, resid = nnls(A, b)
        if resid > 1e-6:
            # joint outside the hull of its k neighbours; widen the support
            _, idx = tree.query(JOINTS[j], k=4 * k)
            A = np.vstack([verts[idx].T, 10.0 * np.ones((1, 4 * k))])
            w, resid = nnls(A, b)
        reg[j, idx] = w / w.sum()
    return reg


def build_procedural_body(spacing: float = 0.03, smooth_iterations: int = 3, seed: int = 0) -> BodyModel:
    """Generate the procedural body model. Deterministic for a given (spacing, seed)."""
    rng = np.random.default_rng(seed)
    verts, faces = _mesh_from_sdf(spacing)
    if smooth_iterations:
        verts = _smooth(verts, faces, smooth_iterations)
    weights, _ = _skin_weights(verts)
    arrays = {
        "template_vertices": verts,
        "faces": faces,
        "shape_dirs": _shape_dirs(verts, weights),
        "pose_dirs": _pose_dirs(verts, weights, rng),
        "joint_regressor": _joint_regressor(verts),
        "skin_weights": weights,
        "kinematic_parents": np.where(PARENTS < 0, ROOT_SENTINEL, PARENTS),
    }
    model = body_model_from_arrays(arrays, {"source": "procedural", "spacing": spacing, "seed": seed})
    logger.info("procedural body: %d vertices, %d faces", model.num_vertices, len(model.faces))
    return model
