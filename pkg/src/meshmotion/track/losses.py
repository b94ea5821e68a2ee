"""Tracking objective terms: robust reprojection, silhouette BCE, feature cosine,
temporal smoothness, extreme bending, pose prior and as-rigid-as-possible energy."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

logger = logging.getLogger(__name__)

GM_SIGMA = 0.05
BCE_EPS = 1e-6
# (joint index, axis, sign): elbows bend about y, knees about x; a positive signed angle is hyperextension
BENDING_JOINTS = ((18, 1, 1.0), (19, 1, -1.0), (4, 0, -1.0), (5, 0, -1.0))


class LossError(ValueError):
    pass


def safe_norm(x: torch.Tensor, dim=-1) -> torch.Tensor:
    """Euclidean norm with a zero (sub)gradient at the origin and an exact 0 value there."""
    n2 = (x * x).sum(dim)
    pos = n2 > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, n2, torch.ones_like(n2))), torch.zeros_like(n2))


def geman_mcclure(r2: torch.Tensor, sigma: float = GM_SIGMA) -> torch.Tensor:
    """rho as a function of the squared residual: r^2 sigma^2 / (r^2 + sigma^2)."""
    s2 = sigma * sigma
    return r2 * s2 / (r2 + s2)


def loss_reprojection(joints2d_pred: torch.Tensor, landmarks: torch.Tensor, confidence: torch.Tensor, gm_sigma: float = GM_SIGMA) -> torch.Tensor:
    """(1/N) sum_i w_i rho(|j_i - x_i|) in normalized image units; batched over leading dims
    (the mean is taken over all joints of all frames)."""
    if joints2d_pred.shape != landmarks.shape:
        raise LossError(f"joint count mismatch: {tuple(joints2d_pred.shape)} vs {tuple(landmarks.shape)}")
    r2 = ((joints2d_pred - landmarks) ** 2).sum(-1)
    return (confidence * geman_mcclure(r2, gm_sigma)).mean()


def loss_silhouette(rendered: torch.Tensor, observed, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy, rendered coverage clamped to [eps, 1 - eps]."""
    obs = torch.as_tensor(np.asarray(observed) if not isinstance(observed, torch.Tensor) else observed, dtype=rendered.dtype)
    if obs.shape != rendered.shape:
        raise LossError(f"silhouette size mismatch: {tuple(rendered.shape)} vs {tuple(obs.shape)}")
    p = rendered.clamp(eps, 1.0 - eps)
    return -(obs * torch.log(p) + (1.0 - obs) * torch.log(1.0 - p)).mean()


class FeatureLoss(NamedTuple):
    value: torch.Tensor
    empty: bool  # the rendered and observed foregrounds did not intersect


def loss_feature(rendered_feats: torch.Tensor, observed_feats, foreground_mask) -> FeatureLoss:
    """Mean (1 - cosine similarity) over ``foreground_mask`` pixels (the intersection of
    rendered and observed foreground)."""
    obs = observed_feats if isinstance(observed_feats, torch.Tensor) else torch.as_tensor(np.asarray(observed_feats, dtype=np.float64))
    if obs.shape != rendered_feats.shape:
        raise LossError(f"feature image size mismatch: {tuple(rendered_feats.shape)} vs {tuple(obs.shape)}")
    mask = torch.as_tensor(np.asarray(foreground_mask, dtype=bool)) if not isinstance(foreground_mask, torch.Tensor) else foreground_mask.bool()
    if not mask.any():
        return FeatureLoss(rendered_feats.sum() * 0.0, True)
    a, b = rendered_feats[mask], obs[mask].to(rendered_feats.dtype)
    cos = (a * b).sum(-1) / (safe_norm(a) * safe_norm(b)).clamp_min(1e-12)
    return FeatureLoss((1.0 - cos).mean(), False)


def loss_temporal(series: torch.Tensor) -> torch.Tensor:
    """sum_t |x_t - x_{t-1}| for a series [F, ...] (each frame flattened)."""
    if series.shape[0] < 2:
        raise LossError("temporal loss needs at least two frames")
    d = (series[1:] - series[:-1]).reshape(series.shape[0] - 1, -1)
    return safe_norm(d).sum()


def loss_bending(body_pose: torch.Tensor, joints=BENDING_JOINTS) -> torch.Tensor:
    """sum over elbows and knees of exp(sign * angle) on the primary bending axis.

    ``body_pose`` is [..., 23, 3] or [..., 69] (joint j lives at row j - 1); batched
    inputs are averaged over the leading dims.
    """
    bp = body_pose.reshape(*body_pose.shape[:-1], -1, 3) if body_pose.shape[-1] != 3 else body_pose
    terms = [torch.exp(sign * bp[..., j - 1, axis]) for j, axis, sign in joints]
    return torch.stack(terms, -1).sum(-1).mean()


def loss_pose_prior(body_pose: torch.Tensor) -> torch.Tensor:
    """Mean over frames of the (smoothed) pose norm |theta_t|."""
    flat = body_pose.reshape(body_pose.shape[0], -1) if body_pose.ndim > 1 else body_pose[None]
    return torch.sqrt((flat * flat).sum(-1) + 1e-12).mean()


@dataclass
class ArapGraph:
    edges: np.ndarray  # [E, 2] directed one-ring edges (i -> j), both directions present
    weights: np.ndarray  # [E] cotangent weights, clamped at zero
    degenerate: int  # undirected edges dropped for zero rest length


def cotangent_weights(rest: np.ndarray, faces: np.ndarray) -> dict:
    """Undirected edge -> 1/2 (cot alpha + cot beta) over the faces sharing it."""
    v = np.asarray(rest, dtype=np.float64)
    w: dict = {}
    for corner in range(3):
        i, j, k = faces[:, corner], faces[:, (corner + 1) % 3], faces[:, (corner + 2) % 3]
        a, b = v[j] - v[i], v[k] - v[i]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        cot = (a * b).sum(1) / np.maximum(cross, 1e-300)
        for jj, kk, c in zip(j, k, cot):
            key = (min(jj, kk), max(jj, kk))
            w[key] = w.get(key, 0.0) + 0.5 * c
    return w


def arap_graph(rest, faces) -> ArapGraph:
    v = np.asarray(rest, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    w = cotangent_weights(v, faces)
    keys = np.array(sorted(w), dtype=np.int64).reshape(-1, 2)
    vals = np.array([w[tuple(k)] for k in keys])
    length = np.linalg.norm(v[keys[:, 0]] - v[keys[:, 1]], axis=1)
    ok = length > 0
    degenerate = int((~ok).sum())
    if degenerate:
        logger.warning("ARAP: %d zero-length rest edges excluded", degenerate)
    keys, vals = keys[ok], np.maximum(vals[ok], 0.0)
    return ArapGraph(np.concatenate([keys, keys[:, ::-1]]), np.concatenate([vals, vals]), degenerate)


def loss_arap(deformed: torch.Tensor, rest, faces=None, graph: ArapGraph | None = None) -> torch.Tensor:
    """sum_i sum_{j in N(i)} w_ij |(p'_i - p'_j) - R_i (p_i - p_j)|^2 with per-vertex best-fit
    rotations from one local step (rotations are not differentiated).

    ``deformed`` may be batched [B, V, 3]; ``rest`` is [V, 3] or matches the batch. The
    graph (cotangent weights) comes from ``rest`` unless given.
    """
    rest_t = rest if isinstance(rest, torch.Tensor) else torch.as_tensor(np.asarray(rest, dtype=np.float64))
    if graph is None:
        if faces is None:
            raise LossError("loss_arap needs faces or a precomputed graph")
        graph = arap_graph(rest_t.detach().reshape(-1, *rest_t.shape[-2:])[0].numpy(), faces)
    if deformed.shape[-2] != rest_t.shape[-2]:
        raise LossError("deformed and rest meshes must share topology")
    i = torch.as_tensor(graph.edges[:, 0])
    j = torch.as_tensor(graph.edges[:, 1])
    w = torch.as_tensor(graph.weights, dtype=deformed.dtype)
    e0 = rest_t[..., i, :] - rest_t[..., j, :]
    e1 = deformed[..., i, :] - deformed[..., j, :]
    V = deformed.shape[-2]
    with torch.no_grad():
        cov = (w[:, None, None] * e0.detach()[..., :, None] * e1.detach()[..., None, :])
        S = torch.zeros(*e1.shape[:-2], V, 3, 3, dtype=deformed.dtype).index_add(-3, i, cov)
        U, _, Vh = torch.linalg.svd(S)
        R = Vh.transpose(-1, -2) @ U.transpose(-1, -2)
        flip = torch.det(R) < 0
        if flip.any():
            D = torch.ones(*R.shape[:-1], dtype=R.dtype)
            D[..., 2] = torch.where(flip, -1.0, 1.0)
            R = (Vh.transpose(-1, -2) * D[..., None, :]) @ U.transpose(-1, -2)
    r = e1 - (R[..., i, :, :] @ e0[..., None])[..., 0]
    return (w * (r * r).sum(-1)).sum(-1).mean() if r.ndim > 2 else (w * (r * r).sum(-1)).sum()
