"""Multi-view back-projection of per-pixel features onto mesh vertices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, project_points
from .raster import plane_depth, rasterize_depth

DEPTH_TOL_REL = 1e-3


@dataclass
class BakeResult:
    features: np.ndarray  # [V, C]
    view_count: np.ndarray  # [V] number of cameras that saw each vertex
    never_visible: np.ndarray  # [V] bool


@dataclass
class VertexVisibility:
    visible: np.ndarray  # [V] bool
    uv: np.ndarray  # [V, 2] pixel coordinates in the camera image
    depth: np.ndarray  # [V] vertex camera depth
    depth_map: object  # DepthMap of the render


def scene_scale(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    return float(np.linalg.norm(v.max(0) - v.min(0)))


def vertex_visibility(vertices: np.ndarray, faces: np.ndarray, camera: Camera, tol: float) -> VertexVisibility:
    """A vertex is visible when the front face at its pixel, evaluated as a plane at the
    vertex's exact projection, lies within ``tol`` of the vertex depth."""
    v = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    H, W = camera.image_size
    dm = rasterize_depth(v, faces, camera)
    uv, valid = project_points(v, camera)
    z = (v @ camera.rotation.T + camera.translation)[:, 2]
    col = np.floor(uv[:, 0]).astype(np.int64)
    row = np.floor(uv[:, 1]).astype(np.int64)
    inb = valid & (col >= 0) & (col < W) & (row >= 0) & (row < H)
    visible = np.zeros(len(v), dtype=bool)
    idx = np.nonzero(inb)[0]
    fid = dm.face[row[idx], col[idx]]
    has = fid >= 0
    idx, fid = idx[has], fid[has]
    if len(idx):
        uv_all, _ = project_points(v, camera)
        zf = (v @ camera.rotation.T + camera.translation)[:, 2]
        pd = plane_depth(uv_all[faces[fid]], zf[faces[fid]], uv[idx])
        visible[idx] = np.abs(pd - z[idx]) <= tol
    return VertexVisibility(visible, uv, z, dm)


def _bilinear_footprint(img: np.ndarray, depth_map, x: np.ndarray, y: np.ndarray, z: np.ndarray, tap_tol: np.ndarray):
    """Bilinear sample at continuous pixel coordinates (centers at integers).

    Returns (values, ok) where ``ok`` marks samples whose four taps all lie on the
    same surface as the sample (rendered depth within ``tap_tol``). Renormalizing over
    a partial footprint would bias samples near silhouettes, so those are rejected.
    """
    h, w, C = img.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    out = np.zeros((len(x), C))
    ok = np.ones(len(x), dtype=bool)
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = np.clip(x0 + dx, 0, w - 1)
        yi = np.clip(y0 + dy, 0, h - 1)
        ok &= np.abs(depth_map[yi, xi] - z) <= tap_tol
        out += wt[:, None] * img[yi, xi]
    return out, ok


def bake_vertex_features(vertices, faces, cameras, feature_images, depth_tol_rel: float = DEPTH_TOL_REL) -> BakeResult:
    """Average over cameras of bilinear feature samples at each visible vertex.

    A camera counts for a vertex when the vertex passes the depth test and its whole
    bilinear footprint lies on the same surface.

    Feature images may have a different resolution than the cameras; projections are
    rescaled. Cameras are reduced in list order so results are bitwise reproducible.
    """
    v = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    tol = depth_tol_rel * scene_scale(v)
    C = np.asarray(feature_images[0]).shape[-1]
    acc = np.zeros((len(v), C))
    count = np.zeros(len(v), dtype=np.int64)
    for cam, feat in zip(cameras, feature_images):
        feat = np.asarray(feat, dtype=np.float64)
        if feat.ndim == 2:
            feat = feat[..., None]
        vis = vertex_visibility(v, faces, cam, tol)
        idx = np.nonzero(vis.visible)[0]
        if len(idx) == 0:
            continue
        H, W = cam.image_size
        h, w = feat.shape[:2]
        sx, sy = w / W, h / H
        x = vis.uv[idx, 0] * sx - 0.5
        y = vis.uv[idx, 1] * sy - 0.5
        # depth maps at the feature resolution are approximated by nearest lookup in the full render
        rows = np.clip(((np.arange(h) + 0.5) / sy).astype(np.int64), 0, H - 1)
        cols = np.clip(((np.arange(w) + 0.5) / sx).astype(np.int64), 0, W - 1)
        dm_small = vis.depth_map.depth[np.ix_(rows, cols)]
        pixel_size = vis.depth[idx] / (cam.focal[1] * sy)
        tap_tol = tol + 3.0 * pixel_size
        vals, ok = _bilinear_footprint(feat, dm_small, x, y, vis.depth[idx], tap_tol)
        acc[idx[ok]] += vals[ok]
        count[idx[ok]] += 1
    seen = count > 0
    out = np.zeros_like(acc)
    out[seen] = acc[seen] / count[seen, None]
    return BakeResult(out, count, ~seen)
