"""The deformation model D(S, Theta_t) = Gamma(R_t * M(beta, theta_t) + T_t) + Delta_t."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..attach import AttachmentMap, apply_attachment
from ..body.model import NUM_BODY_JOINTS, BodyModel
from ..register.fit import world_body
from .params import MotionParams


@dataclass
class DeformedBatch:
    mesh_vertices: torch.Tensor  # [B, V, 3]
    body_vertices: torch.Tensor  # [B, Vs, 3]
    joints: torch.Tensor  # [B, 24, 3] world joints after the global transform


def deform_batch(att: AttachmentMap, model: BodyModel, scale, beta, pose, trans, rot, delta=None) -> DeformedBatch:
    """Batched deformation; tensors pose [B, 69], trans/rot [B, 3], delta [B, V, 3] or None.

    The global rotation acts about the root joint, as in the body model, and the scale
    is the registration scale shared by all frames.
    """
    B = pose.shape[0]
    s = torch.as_tensor(scale, dtype=torch.float64).reshape(1).expand(B)
    b = torch.as_tensor(np.asarray(beta, dtype=np.float64) if not isinstance(beta, torch.Tensor) else beta).reshape(1, -1).expand(B, -1)
    v, j = world_body(model, s, b, pose.reshape(B, NUM_BODY_JOINTS, 3), rot, trans)
    out = apply_attachment(att, v, model.faces)
    if delta is not None:
        out = out + delta
    return DeformedBatch(out, v, j)


def deform(att: AttachmentMap, model: BodyModel, params: MotionParams, t: int) -> np.ndarray:
    """Deformed input-mesh vertices [V, 3] for frame ``t``."""
    with torch.no_grad():
        d = None if params.delta is None else torch.as_tensor(params.delta[t])[None]
        out = deform_batch(att, model, params.scale, params.beta, torch.as_tensor(params.pose[t])[None],
                           torch.as_tensor(params.trans[t])[None], torch.as_tensor(params.rot[t])[None], d)  # fmt: skip
    return out.mesh_vertices[0].numpy()


def deform_sequence(att: AttachmentMap, model: BodyModel, params: MotionParams, chunk: int = 16):
    """(mesh vertices [F, V, 3], body vertices [F, Vs, 3], joints [F, 24, 3]) for every frame."""
    meshes, bodies, joints = [], [], []
    with torch.no_grad():
        for a in range(0, params.num_frames, chunk):
            sl = slice(a, min(a + chunk, params.num_frames))
            d = None if params.delta is None else torch.as_tensor(params.delta[sl])
            out = deform_batch(att, model, params.scale, params.beta, torch.as_tensor(params.pose[sl]),
                               torch.as_tensor(params.trans[sl]), torch.as_tensor(params.rot[sl]), d)  # fmt: skip
            meshes.append(out.mesh_vertices.numpy())
            bodies.append(out.body_vertices.numpy())
            joints.append(out.joints.numpy())
    return np.concatenate(meshes), np.concatenate(bodies), np.concatenate(joints)
