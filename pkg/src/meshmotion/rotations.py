"""Axis-angle / rotation-matrix helpers shared by the body model and the optimizers."""

import numpy as np
import torch

_SMALL = 1e-8


def skew(v: torch.Tensor) -> torch.Tensor:
    """Cross-product matrices for a batch of 3-vectors, shape [..., 3, 3]."""
    x, y, z = v.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack(
        [
            torch.stack([o, -z, y], -1),
            torch.stack([z, o, -x], -1),
            torch.stack([-y, x, o], -1),
        ],
        -2,
    )


def axis_angle_to_matrix(aa: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula with a Taylor branch so that zero rotations stay exact and differentiable."""
    theta2 = (aa * aa).sum(-1, keepdim=True)
    small = theta2 < _SMALL
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = safe2.sqrt()
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    K = skew(aa)
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(K.shape)
    return eye + a[..., None] * K + b[..., None] * (K @ K)


def matrix_to_axis_angle(R: torch.Tensor) -> torch.Tensor:
    # quaternion route is stable near pi, unlike acos(trace)
    from scipy.spatial.transform import Rotation

    flat = R.detach().reshape(-1, 3, 3).cpu().numpy()
    out = Rotation.from_matrix(flat).as_rotvec()
    return torch.as_tensor(out, dtype=R.dtype).reshape(R.shape[:-2] + (3,))


def rot6d_to_matrix(x: torch.Tensor) -> torch.Tensor:
    """Continuous 6-d rotation representation to matrices (Gram-Schmidt on two columns)."""
    a1, a2 = x[..., 0:3], x[..., 3:6]
    b1 = torch.nn.functional.normalize(a1, dim=-1)
    b2 = torch.nn.functional.normalize(a2 - (b1 * a2).sum(-1, keepdim=True) * b1, dim=-1)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_axis_angle_torch(R: torch.Tensor) -> torch.Tensor:
    """Differentiable log map valid away from rotations by pi."""
    cos = ((R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]) - 1.0) / 2.0
    cos = cos.clamp(-1.0 + 1e-7, 1.0 - 1e-7)
    angle = torch.acos(cos)
    w = torch.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1
    )
    sin = torch.sin(angle)
    small = angle < 1e-4
    scale = torch.where(small, 0.5 + angle**2 / 12.0, angle / (2.0 * torch.where(small, torch.ones_like(sin), sin)))
    return w * scale[..., None]


def rotation_matrix_np(aa) -> np.ndarray:
    aa = torch.as_tensor(np.asarray(aa, dtype=np.float64))
    return axis_angle_to_matrix(aa).numpy()


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera rotation for an OpenCV-style camera (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up / np.linalg.norm(up))) > 1.0 - 1e-9:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=0)
