"""Triangle rasterization with a soft, differentiable silhouette and attribute interpolation.

Visibility (which faces touch which pixel, and their depth order) is a discrete
decision, so it is computed in numpy without gradients. The selected pixel/face
pairs are then re-evaluated in torch, where distances and barycentrics carry
gradients back to the projected vertices.

Pixel (row i, column j) has its center at image coordinates (j + 0.5, i + 0.5).
Soft coverage of a face at a pixel is sigmoid(s / sigma) where s is the signed
distance from the pixel center to the projected triangle, measured in units of
the shorter image side. Outside the triangle s is minus the distance to it. Inside,
s is the distance to the nearest *contour* edge of the face (a mesh boundary
edge, or one whose neighbour faces the other way on screen); edges shared with a
same-facing neighbour are interior to the silhouette and do not soften coverage.
A pixel aggregates its ``faces_per_pixel`` most-covering faces as 1 - prod(1 - p).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from .camera import NEAR, Camera, project_torch


class RasterError(ValueError):
    pass


@dataclass(frozen=True)
class RasterSettings:
    softness_sigma: float = 1e-4
    faces_per_pixel: int = 8
    background_value: float = 0.0
    prob_cutoff: float = 1e-4  # faces farther than where sigmoid drops below this are ignored

    def __post_init__(self):
        if self.softness_sigma < 0:
            raise RasterError("softness_sigma must be >= 0")
        if self.faces_per_pixel < 1:
            raise RasterError("faces_per_pixel must be >= 1")
        if not 0 < self.prob_cutoff < 0.5:
            raise RasterError("prob_cutoff must lie in (0, 0.5)")

    @property
    def hard(self) -> bool:
        return self.softness_sigma == 0

    def blur_radius_px(self, image_size) -> float:
        if self.hard:
            return 0.0
        return self.softness_sigma * math.log((1 - self.prob_cutoff) / self.prob_cutoff) * min(image_size)


@dataclass
class Fragments:
    pixel: np.ndarray  # [P] flat pixel index (row * W + col)
    face: np.ndarray  # [P]
    inside: np.ndarray  # [P] pixel center inside the projected triangle
    depth: np.ndarray  # [P] camera depth at the closest point of the triangle
    image_size: tuple
    diagnostics: dict = field(default_factory=dict)
    signed_px: np.ndarray | None = None  # [P] signed distance in pixels (soft mode only)
    contour: np.ndarray | None = None  # [F, 3] contour-edge flags (soft mode only)


@dataclass
class RenderResult:
    image: torch.Tensor
    diagnostics: dict


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _seg_dist2_xy(qx, qy, ax, ay, bx, by):
    abx, aby = bx - ax, by - ay
    apx, apy = qx - ax, qy - ay
    t = np.clip((apx * abx + apy * aby) / np.maximum(abx * abx + aby * aby, 1e-300), 0.0, 1.0)
    dx, dy = apx - t * abx, apy - t * aby
    return dx * dx + dy * dy


def _seg_dist2_torch(p, a, b):
    ab = b - a
    t = (((p - a) * ab).sum(-1) / (ab * ab).sum(-1).clamp_min(1e-300)).clamp(0.0, 1.0)
    d = p - a - t[:, None] * ab
    return (d * d).sum(-1)


_FAR2 = 1e12  # squared pixel distance standing in for "no contour edge"


@lru_cache(maxsize=8)
def _edge_topology(faces_bytes: bytes, n_faces: int):
    faces = np.frombuffer(faces_bytes, dtype=np.int64).reshape(n_faces, 3)
    e = np.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], 1).reshape(-1, 2)
    _, inv, counts = np.unique(np.sort(e, axis=1), axis=0, return_inverse=True, return_counts=True)
    return inv.reshape(-1), counts


def contour_edges(faces: np.ndarray, area2: np.ndarray) -> np.ndarray:
    """[F, 3] flags for edges (v0,v1), (v1,v2), (v2,v0) that lie on the image contour."""
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    F = len(faces)
    inv, counts = _edge_topology(faces.tobytes(), F)
    sign = np.repeat(np.sign(area2), 3)
    pos = np.bincount(inv, weights=sign > 0, minlength=len(counts))
    neg = np.bincount(inv, weights=sign < 0, minlength=len(counts))
    interior = (counts == 2) & ((pos == 2) | (neg == 2))
    return ~interior[inv].reshape(F, 3)


def compute_fragments(uv: np.ndarray, z: np.ndarray, faces: np.ndarray, image_size, radius_px: float = 0.0, faces_per_pixel: int = 1) -> Fragments:
    """Enumerate (pixel, face) pairs within ``radius_px`` of each projected face.

    With radius 0 only pixels whose centers lie inside a face are kept, and the
    ``faces_per_pixel`` nearest in depth survive. With a positive radius the kept faces
    are those with the largest signed distance (highest coverage); ordering by depth
    there would let nearby outside faces in front push out the covering face.
    """
    H, W = image_size
    faces = np.asarray(faces, dtype=np.int64)
    zf = z[faces]
    front = (zf > NEAR).all(1)
    tri = uv[faces]  # [F, 3, 2]
    area2 = _cross2(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    finite = np.isfinite(tri).all((1, 2))
    degenerate = front & finite & (np.abs(area2) < 1e-12)
    usable = front & finite & ~degenerate
    diagnostics = {"degenerate_faces": int(degenerate.sum()), "clipped_faces": int((~front).sum())}

    fid = np.nonzero(usable)[0]
    lo = tri[fid].min(1) - radius_px - 0.5
    hi = tri[fid].max(1) + radius_px - 0.5
    x0 = np.clip(np.ceil(lo[:, 0]), 0, W).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0]), -1, W - 1).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1]), 0, H).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1]), -1, H - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    keep_f = counts > 0
    fid, x0, y0, nx, counts = fid[keep_f], x0[keep_f], y0[keep_f], nx[keep_f], counts[keep_f]
    total = int(counts.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Fragments(empty, empty, np.zeros(0, bool), np.zeros(0), (H, W), diagnostics, np.zeros(0), np.zeros((len(faces), 3), bool))

    owner = np.repeat(np.arange(len(fid)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nxo = nx[owner]
    px = x0[owner] + local % nxo
    py = y0[owner] + local // nxo
    face = fid[owner]
    # Edge functions evaluated with scalar components (small-axis reductions are slow in numpy).
    tx, ty = tri[..., 0], tri[..., 1]
    ax, ay, bx, by, cx, cy = (tx[face, 0], ty[face, 0], tx[face, 1], ty[face, 1], tx[face, 2], ty[face, 2])
    qx, qy = px + 0.5, py + 0.5
    ar = area2[face]
    e0 = (bx - qx) * (cy - qy) - (by - qy) * (cx - qx)
    e1 = (cx - qx) * (ay - qy) - (cy - qy) * (ax - qx)
    e2 = (ax - qx) * (by - qy) - (ay - qy) * (bx - qx)
    w0, w1, w2 = e0 / ar, e1 / ar, e2 / ar
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)

    if radius_px > 0:
        # Cheap rejection: a pixel farther than the radius from any edge's supporting line,
        # on the outer side, is farther than the radius from the triangle.
        r = radius_px
        sgn = np.sign(ar)
        lens = np.sqrt(np.stack([(cx - bx) ** 2 + (cy - by) ** 2, (ax - cx) ** 2 + (ay - cy) ** 2, (bx - ax) ** 2 + (by - ay) ** 2]))
        near = (sgn * e0 >= -r * lens[0]) & (sgn * e1 >= -r * lens[1]) & (sgn * e2 >= -r * lens[2])
        contour_all = contour_edges(faces, area2)
        has_contour = contour_all.any(1)[face]
        need = near & (~inside | has_contour)
        idx = np.nonzero(need)[0]
        qxi, qyi = qx[idx], qy[idx]
        pts = [(ax[idx], ay[idx]), (bx[idx], by[idx]), (cx[idx], cy[idx])]
        de = np.stack([_seg_dist2_xy(qxi, qyi, *pts[0], *pts[1]), _seg_dist2_xy(qxi, qyi, *pts[1], *pts[2]), _seg_dist2_xy(qxi, qyi, *pts[2], *pts[0])], 1)
        d2 = np.full(total, np.inf)
        d2[idx] = de.min(1)
        d2_in = np.full(total, _FAR2)
        d2_in[idx] = np.where(contour_all[face[idx]], de, _FAR2).min(1)
        sel = inside | (d2 <= r * r)
        key = np.where(inside, -d2_in, d2)[sel]
        signed = np.where(inside, np.sqrt(d2_in + 1e-18), -np.sqrt(np.minimum(d2, _FAR2) + 1e-18))[sel]
    else:
        sel = inside
        contour_all, signed = None, None
    face, px, py, inside = face[sel], px[sel], py[sel], inside[sel]
    w = np.clip(np.stack([w0[sel], w1[sel], w2[sel]], 1), 0.0, None)
    w /= w.sum(1, keepdims=True)
    depth = 1.0 / (w / zf[face]).sum(1)
    pixel = py * W + px
    if radius_px <= 0:
        key = depth

    order = np.lexsort((face, key, pixel))
    pixel, face, inside, depth = pixel[order], face[order], inside[order], depth[order]
    if signed is not None:
        signed = signed[order]
    n = len(pixel)
    if n:
        start = np.r_[True, pixel[1:] != pixel[:-1]]
        rank = np.arange(n) - np.maximum.accumulate(np.where(start, np.arange(n), 0))
        k = rank < faces_per_pixel
        pixel, face, inside, depth = pixel[k], face[k], inside[k], depth[k]
        if signed is not None:
            signed = signed[k]
    return Fragments(pixel, face, inside, depth, (H, W), diagnostics, signed, contour_all)


def _as_tensor(vertices) -> torch.Tensor:
    if isinstance(vertices, torch.Tensor):
        return vertices if vertices.dtype == torch.float64 else vertices.double()
    return torch.as_tensor(np.asarray(vertices, dtype=np.float64))


def _project(vertices, camera: Camera):
    v = _as_tensor(vertices)
    uv, z, _ = project_torch(v, camera)
    return uv, z


def rasterize_silhouette(vertices, faces, camera: Camera, settings: RasterSettings | None = None) -> RenderResult:
    """Coverage image [H, W]; soft (differentiable in vertices) when sigma > 0."""
    settings = settings or RasterSettings()
    H, W = camera.image_size
    faces = np.asarray(faces, dtype=np.int64)
    uv, z = _project(vertices, camera)
    frag = compute_fragments(uv.detach().numpy(), z.detach().numpy(), faces, (H, W), settings.blur_radius_px((H, W)),
                             1 if settings.hard else settings.faces_per_pixel)  # fmt: skip
    if settings.hard:
        img = np.zeros(H * W)
        img[frag.pixel[frag.inside]] = 1.0
        return RenderResult(torch.as_tensor(img.reshape(H, W)), frag.diagnostics)

    # Pixels holding an interior fragment deeper than the blur radius are saturated: their
    # miss probability is below prob_cutoff and their gradient negligible, so they are
    # evaluated in numpy. Only the remaining (boundary) pixels enter the autograd graph.
    scale = min(H, W) * settings.softness_sigma
    log_miss_np = -np.logaddexp(0.0, frag.signed_px / scale)
    saturated = np.zeros(H * W, dtype=bool)
    saturated[frag.pixel[frag.inside & (frag.signed_px > settings.blur_radius_px((H, W)))]] = True
    frozen = saturated[frag.pixel]
    acc_np = np.zeros(H * W)
    np.add.at(acc_np, frag.pixel[frozen], log_miss_np[frozen])
    img = torch.as_tensor(np.where(saturated, 1.0 - np.exp(acc_np), 0.0)).to(uv.dtype)

    live = ~frozen
    if live.any():
        lp = frag.pixel[live]
        pix = torch.as_tensor(lp)
        f = torch.as_tensor(faces[frag.face[live]])
        p = torch.stack([torch.as_tensor(lp % W + 0.5), torch.as_tensor(lp // W + 0.5)], 1).to(uv.dtype)
        a, b, c = uv[f[:, 0]], uv[f[:, 1]], uv[f[:, 2]]
        de = torch.stack([_seg_dist2_torch(p, a, b), _seg_dist2_torch(p, b, c), _seg_dist2_torch(p, c, a)], 1)
        inside = torch.as_tensor(frag.inside[live])
        contour = torch.as_tensor(frag.contour[frag.face[live]])
        use = contour | ~inside[:, None]
        d2 = torch.where(use, de, torch.full_like(de, _FAR2)).min(1).values
        dist = torch.sqrt(d2 + 1e-18) / min(H, W)
        signed = torch.where(inside, dist, -dist)
        log_miss = torch.nn.functional.logsigmoid(-signed / settings.softness_sigma)
        acc = torch.zeros(H * W, dtype=uv.dtype).index_add(0, pix, log_miss)
        touched = torch.zeros(H * W, dtype=torch.bool)
        touched[pix] = True
        img = torch.where(touched, 1.0 - torch.exp(acc), img)
    return RenderResult(img.reshape(H, W), frag.diagnostics)


def rasterize_attributes(vertices, faces, vertex_attrs, camera: Camera, settings: RasterSettings | None = None, return_mask: bool = False):
    """Perspective-correct interpolation of the front-most face's vertex attributes.

    Returns a RenderResult whose image is [H, W, C]; ``diagnostics['mask']`` holds the
    foreground mask when ``return_mask`` is set.
    """
    settings = settings or RasterSettings()
    H, W = camera.image_size
    faces = np.asarray(faces, dtype=np.int64)
    attrs = _as_tensor(vertex_attrs)
    if attrs.ndim == 1:
        attrs = attrs[:, None]
    if not torch.isfinite(attrs).all():
        raise RasterError("vertex attributes must be finite")
    uv, z = _project(vertices, camera)
    frag = compute_fragments(uv.detach().numpy(), z.detach().numpy(), faces, (H, W), 0.0, 1)
    C = attrs.shape[1]
    f = torch.as_tensor(faces[frag.face])
    p = torch.stack([torch.as_tensor(frag.pixel % W + 0.5), torch.as_tensor(frag.pixel // W + 0.5)], 1).to(uv.dtype)
    a, b, c = uv[f[:, 0]], uv[f[:, 1]], uv[f[:, 2]]
    ar = _cross2(b - a, c - a)
    w = torch.stack([_cross2(b - p, c - p), _cross2(c - p, a - p), _cross2(a - p, b - p)], 1) / ar[:, None]
    wz = w / z[f]
    wz = wz / wz.sum(1, keepdim=True)
    vals = (wz[..., None] * attrs[f]).sum(1)
    img = torch.full((H * W, C), float(settings.background_value), dtype=attrs.dtype)
    img = img.index_put((torch.as_tensor(frag.pixel),), vals)
    diag = dict(frag.diagnostics)
    if return_mask:
        mask = np.zeros(H * W, dtype=bool)
        mask[frag.pixel] = True
        diag["mask"] = mask.reshape(H, W)
    return RenderResult(img.reshape(H, W, C), diag)


@dataclass
class DepthMap:
    face: np.ndarray  # [H, W] front face index, -1 for background
    depth: np.ndarray  # [H, W] camera depth at pixel centers, inf for background


def rasterize_depth(vertices, faces, camera: Camera) -> DepthMap:
    H, W = camera.image_size
    uv, z = _project(vertices, camera)
    frag = compute_fragments(uv.detach().numpy(), z.detach().numpy(), np.asarray(faces), (H, W), 0.0, 1)
    face = np.full(H * W, -1, dtype=np.int64)
    depth = np.full(H * W, np.inf)
    face[frag.pixel] = frag.face
    depth[frag.pixel] = frag.depth
    return DepthMap(face.reshape(H, W), depth.reshape(H, W))


def plane_depth(uv_tri: np.ndarray, z_tri: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Depth of each triangle's plane along the ray through image point q (perspective-correct,
    valid outside the triangle as well). uv_tri [N, 3, 2], z_tri [N, 3], q [N, 2]."""
    a, b, c = uv_tri[:, 0], uv_tri[:, 1], uv_tri[:, 2]
    ar = _cross2(b - a, c - a)
    ar = np.where(np.abs(ar) > 1e-300, ar, 1e-300)
    w = np.stack([_cross2(b - q, c - q), _cross2(c - q, a - q), _cross2(a - q, b - q)], 1) / ar[:, None]
    inv = (w / z_tri).sum(1)
    return np.where(inv > 0, 1.0 / np.where(inv > 0, inv, 1.0), np.inf)


def render_preview(vertices, faces, camera: Camera, color=(0.75, 0.75, 0.78), background=1.0) -> np.ndarray:
    """Flat-shaded uint8 RGB preview (headlight at the camera)."""
    v = np.asarray(vertices.detach() if isinstance(vertices, torch.Tensor) else vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    dm = rasterize_depth(v, faces, camera)
    H, W = camera.image_size
    img = np.full((H, W, 3), background)
    fg = dm.face >= 0
    if fg.any():
        tri = v[faces[dm.face[fg]]]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        view = camera.center - tri.mean(1)
        view /= np.linalg.norm(view, axis=1, keepdims=True)
        shade = 0.25 + 0.75 * np.abs((n * view).sum(1))
        img[fg] = shade[:, None] * np.asarray(color)[None]
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
