"""Closest-face attachment: x ~ sum_i gamma_i v_i + d n over a body face.

Inlier vertices are represented by the barycentrics of their closest point on the
body surface and a signed offset along that face's normal. When the closest point
sits on an edge or corner, the small tangential remainder is kept in the face's
local frame. Outliers take over their donor's face coordinates (the donor being the
nearest inlier by mesh-graph distance) and keep their rest offset from it in the
same local frame, so it rotates with the body.

Rest positions are reproduced exactly: the map stores the rest vertices and the
rest evaluation of the frame construction, and ``apply_attachment`` returns
rest + (current evaluation - rest evaluation). At the rest pose the difference
is computed from identical inputs with identical element-wise operations, so it
is exactly zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from ..archive import read_archive, write_archive
from ..ingest.mesh_io import mesh_edges, vertex_normals

logger = logging.getLogger(__name__)

TIE_FRACTION = 1e-9


class AttachError(ValueError):
    pass


@dataclass(frozen=True)
class AttachThresholds:
    distance_fraction: float = 0.05  # of the input mesh bounding-box diagonal
    normal_angle_deg: float = 45.0
    knn: int = 16
    knn_sigmas: float = 3.0
    knn_floor_fraction: float = 1e-4  # deviation floor, fraction of the bbox diagonal
    candidates: int = 32


@dataclass
class AttachmentMap:
    face_index: np.ndarray  # [V]
    bary: np.ndarray  # [V, 3]
    offset_d: np.ndarray  # [V]
    inlier: np.ndarray  # [V] bool
    donor: np.ndarray  # [V]
    local_offset: np.ndarray  # [V, 3] residual from the face evaluation in the face frame (e1, n, e2)
    rest_vertices: np.ndarray  # [V, 3]
    rest_gamma: np.ndarray  # [V, 3] frame evaluation at the registration pose
    n_body_vertices: int
    n_body_faces: int

    @property
    def num_vertices(self) -> int:
        return len(self.face_index)

    def save(self, path):
        arrays = {
            "face_index": self.face_index, "bary": self.bary, "offset_d": self.offset_d,
            "inlier": self.inlier.astype(np.uint8), "donor": self.donor, "local_offset": self.local_offset,
            "rest_vertices": self.rest_vertices, "rest_gamma": self.rest_gamma,
        }  # fmt: skip
        dtypes = {k: "float64" for k in ("bary", "offset_d", "local_offset", "rest_vertices", "rest_gamma")}
        dtypes.update(face_index="int64", donor="int64", inlier="uint8")
        meta = {"kind": "attachment-map", "n_body_vertices": self.n_body_vertices, "n_body_faces": self.n_body_faces}
        return write_archive(path, arrays, meta=meta, dtypes=dtypes)

    @classmethod
    def load(cls, path) -> AttachmentMap:
        a, meta = read_archive(path)
        missing = [k for k in ("face_index", "bary", "offset_d", "inlier", "donor", "local_offset", "rest_vertices", "rest_gamma") if k not in a]
        if missing:
            raise AttachError(f"{path}: attachment arrays absent: {', '.join(missing)}")
        return cls(a["face_index"].astype(np.int64), a["bary"], a["offset_d"], a["inlier"].astype(bool), a["donor"].astype(np.int64),
                   a["local_offset"], a["rest_vertices"], a["rest_gamma"], int(meta["n_body_vertices"]), int(meta["n_body_faces"]))  # fmt: skip


def face_frames(tri: torch.Tensor):
    """Unit normal and first edge direction of triangles [..., 3, 3] (element-wise ops only)."""
    e1 = tri[..., 1, :] - tri[..., 0, :]
    e2 = tri[..., 2, :] - tri[..., 0, :]
    n = torch.stack(
        [e1[..., 1] * e2[..., 2] - e1[..., 2] * e2[..., 1],
         e1[..., 2] * e2[..., 0] - e1[..., 0] * e2[..., 2],
         e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]], -1)  # fmt: skip
    n = n / torch.sqrt((n * n).sum(-1, keepdim=True)).clamp_min(1e-300)
    t = e1 / torch.sqrt((e1 * e1).sum(-1, keepdim=True)).clamp_min(1e-300)
    return n, t


def _gamma(att: AttachmentMap, posed: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    """Frame evaluation sum gamma_i v_i + d n (+ donor-frame offset for outliers); posed [..., Vs, 3]."""
    fi = torch.as_tensor(att.face_index)
    tri = posed[..., faces[fi], :]  # [..., V, 3, 3]
    n, t = face_frames(tri)
    g = torch.as_tensor(att.bary, dtype=posed.dtype)
    d = torch.as_tensor(att.offset_d, dtype=posed.dtype)[:, None]
    out = g[:, 0:1] * tri[..., 0, :] + g[:, 1:2] * tri[..., 1, :] + g[:, 2:3] * tri[..., 2, :] + d * n
    if np.any(att.local_offset != 0):
        lo = torch.as_tensor(att.local_offset, dtype=posed.dtype)
        b = torch.stack(
            [n[..., 1] * t[..., 2] - n[..., 2] * t[..., 1],
             n[..., 2] * t[..., 0] - n[..., 0] * t[..., 2],
             n[..., 0] * t[..., 1] - n[..., 1] * t[..., 0]], -1)  # fmt: skip
        out = out + lo[:, 0:1] * t + lo[:, 1:2] * n + lo[:, 2:3] * b
    return out


def apply_attachment(att: AttachmentMap, posed_vertices, faces, normals=None) -> torch.Tensor:
    """Input-mesh vertices for posed body vertices [Vs, 3] or [B, Vs, 3]; differentiable.

    Face normals are recomputed from ``posed_vertices``; ``normals`` is accepted for
    interface symmetry and ignored.
    """
    posed = posed_vertices if isinstance(posed_vertices, torch.Tensor) else torch.as_tensor(np.asarray(posed_vertices, dtype=np.float64))
    faces_t = torch.as_tensor(np.asarray(faces), dtype=torch.long)
    if posed.shape[-2] != att.n_body_vertices or faces_t.shape[0] != att.n_body_faces:
        raise AttachError(
            f"topology mismatch: attachment built for {att.n_body_vertices} vertices / {att.n_body_faces} faces, "
            f"got {posed.shape[-2]} / {faces_t.shape[0]}"
        )
    g = _gamma(att, posed, faces_t)
    rest = torch.as_tensor(att.rest_vertices, dtype=posed.dtype)
    rest_g = torch.as_tensor(att.rest_gamma, dtype=posed.dtype)
    return rest + (g - rest_g)


def closest_point_barycentrics(p, a, b, c):
    """Barycentrics of the closest point to ``p`` on triangles (a, b, c), broadcasting over
    leading dims. Region tests follow the standard Voronoi-region construction."""
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = (ab * ap).sum(-1), (ac * ap).sum(-1)
    d3, d4 = (ab * bp).sum(-1), (ac * bp).sum(-1)
    d5, d6 = (ab * cp).sum(-1), (ac * cp).sum(-1)
    va, vb, vc = d3 * d6 - d5 * d4, d5 * d2 - d1 * d6, d1 * d4 - d3 * d2

    def safe(x):
        return np.where(np.abs(x) > 1e-300, x, 1.0)

    den = safe(va + vb + vc)
    v, w = vb / den, vc / den
    out = np.stack([1 - v - w, v, w], -1)
    regions = [  # lowest priority first; later entries override
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), lambda t: np.stack([0 * t, 1 - t, t], -1), (d4 - d3) / safe((d4 - d3) + (d5 - d6))),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), lambda t: np.stack([1 - t, 0 * t, t], -1), d2 / safe(d2 - d6)),
        ((d6 >= 0) & (d5 <= d6), lambda t: np.stack([0 * t, 0 * t, 1 + 0 * t], -1), d1),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), lambda t: np.stack([1 - t, t, 0 * t], -1), d1 / safe(d1 - d3)),
        ((d3 >= 0) & (d4 <= d3), lambda t: np.stack([0 * t, 1 + 0 * t, 0 * t], -1), d1),
        ((d1 <= 0) & (d2 <= 0), lambda t: np.stack([1 + 0 * t, 0 * t, 0 * t], -1), d1),
    ]  # fmt: skip
    for mask, make, t in regions:
        out = np.where(mask[..., None], make(t), out)
    return out


def _candidates(points, tri):
    """Closest-point barycentrics, distance and signed normal offset for candidate faces.
    points [V, 3], tri [V, k, 3, 3] -> bary [V, k, 3], dist [V, k], d [V, k], normal [V, k, 3], valid [V, k]."""
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n, axis=-1, keepdims=True)
    valid = nn[..., 0] > 1e-30
    n = n / np.maximum(nn, 1e-300)
    p = points[:, None, :]
    bary = closest_point_barycentrics(p, a, b, c)
    foot = bary[..., 0:1] * a + bary[..., 1:2] * b + bary[..., 2:3] * c
    r = p - foot
    return bary, np.linalg.norm(r, axis=-1), (r * n).sum(-1), n, valid


def _mesh_graph(vertices, faces):
    e = mesh_edges(faces)
    w = np.linalg.norm(vertices[e[:, 0]] - vertices[e[:, 1]], axis=1)
    w = np.maximum(w, 1e-12)  # zero weights read as missing edges
    n = len(vertices)
    return coo_matrix((np.r_[w, w], (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n)).tocsr()


def build_attachment_arrays(mesh_vertices, mesh_faces, body_vertices, body_faces, thresholds: AttachThresholds | None = None) -> AttachmentMap:
    """Attach ``mesh_vertices`` to the body surface (``body_vertices``/``body_faces``).

    ``mesh_faces`` may be None (point cloud): the normal-angle test is skipped and donors
    are found by Euclidean distance.
    """
    th = thresholds or AttachThresholds()
    X = np.asarray(mesh_vertices, dtype=np.float64)
    B = np.asarray(body_vertices, dtype=np.float64)
    BF = np.asarray(body_faces, dtype=np.int64)
    V = len(X)
    diag = float(np.linalg.norm(X.max(0) - X.min(0))) if V > 1 else 1.0

    # candidate faces: nearest centroids
    k = min(th.candidates, len(BF))
    tree = cKDTree(B[BF].mean(1))
    _, cand = tree.query(X, k=k)
    cand = cand.reshape(V, k)
    bary_all, dist_all, d_all, fn_all, valid = _candidates(X, B[BF[cand]])
    # near-ties in distance (e.g. a vertex shared by several faces) go to the face whose
    # normal best agrees with the mesh vertex normal
    vn = vertex_normals(X, np.asarray(mesh_faces, dtype=np.int64)) if mesh_faces is not None else None
    agree = (fn_all * vn[:, None, :]).sum(-1) if vn is not None else np.zeros((V, k))
    score = np.where(valid, dist_all - TIE_FRACTION * diag * agree, np.inf)
    best = score.argmin(1)
    rows = np.arange(V)
    face_index = cand[rows, best]
    bary = bary_all[rows, best]
    offset = d_all[rows, best]
    dist = dist_all[rows, best]

    outlier = dist > th.distance_fraction * diag
    if vn is not None:
        tri = B[BF[face_index]]
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
        cosang = np.clip((vn * fn).sum(1), -1.0, 1.0)
        has_normal = np.linalg.norm(vn, axis=1) > 0
        outlier |= has_normal & (cosang < np.cos(np.radians(th.normal_angle_deg)))
    if V > 1:
        kk = min(th.knn + 1, V)
        _, nb = cKDTree(X).query(X, k=kk)
        nb = nb[:, 1:]
        dn = offset[nb]
        dev = np.abs(offset - dn.mean(1))
        outlier |= dev > th.knn_sigmas * dn.std(1) + th.knn_floor_fraction * diag
    inlier = ~outlier
    if not inlier.any():
        raise AttachError("no inlier vertices: the registered body does not match the input mesh")

    donor = np.arange(V)
    out_idx = np.nonzero(outlier)[0]
    if len(out_idx):
        in_idx = np.nonzero(inlier)[0]
        src = np.full(V, -1)
        if mesh_faces is not None:
            graph = _mesh_graph(X, np.asarray(mesh_faces, dtype=np.int64))
            dist, _, sources = dijkstra(graph, directed=False, indices=in_idx, min_only=True, return_predecessors=True)
            src = np.where(np.isfinite(dist), sources, -1)
        missing = out_idx[src[out_idx] < 0]
        if len(missing):
            _, j = cKDTree(X[in_idx]).query(X[missing])
            src[missing] = in_idx[j]
        donor[out_idx] = src[out_idx]
        face_index[out_idx] = face_index[donor[out_idx]]
        bary[out_idx] = bary[donor[out_idx]]
        offset[out_idx] = offset[donor[out_idx]]

    # what the face evaluation misses (tangential residual of a clamped foot point, or the
    # offset from the donor's foot for outliers), stored in the face's local frame
    with torch.no_grad():
        tri = torch.as_tensor(B[BF[face_index]])
        n, t = face_frames(tri)
        n, t = n.numpy(), t.numpy()
        tri = tri.numpy()
    e2 = np.cross(n, t)
    r = X - ((bary[:, :, None] * tri).sum(1) + offset[:, None] * n)
    local = np.stack([(r * t).sum(1), (r * n).sum(1), (r * e2).sum(1)], 1)
    att = AttachmentMap(face_index, bary, offset, inlier, donor, local, X.copy(), np.zeros((V, 3)), len(B), len(BF))
    with torch.no_grad():
        att.rest_gamma = _gamma(att, torch.as_tensor(B), torch.as_tensor(BF)).numpy().copy()
    logger.info("attachment: %d vertices, %d outliers (%.1f%%)", V, len(out_idx), 100.0 * len(out_idx) / V)
    return att


def build_attachment(mesh, posed_body, model=None, thresholds: AttachThresholds | None = None) -> AttachmentMap:
    """InputMesh + PosedBody (registered, in mesh units) -> AttachmentMap."""
    faces = getattr(model, "faces", None)
    if faces is None:
        raise AttachError("build_attachment needs the body model for its face topology")
    return build_attachment_arrays(mesh.vertices, mesh.faces, posed_body.vertices, faces, thresholds)
