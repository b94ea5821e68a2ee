"""Pinhole cameras (OpenCV axes: x right, y down, z forward) and point projection."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from ..rotations import look_at, rotation_matrix_np

NEAR = 1e-6


class CameraError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    rotation: np.ndarray  # world -> camera, [3, 3]
    translation: np.ndarray  # [3], x_cam = R x_world + t
    focal: tuple  # (fx, fy) pixels
    principal: tuple  # (cx, cy) pixels
    image_size: tuple  # (H, W)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3) or np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise CameraError("camera rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "focal", tuple(float(f) for f in self.focal))
        object.__setattr__(self, "principal", tuple(float(c) for c in self.principal))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def K(self) -> np.ndarray:
        fx, fy = self.focal
        cx, cy = self.principal
        return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.K @ np.hstack([self.rotation, self.translation[:, None]])

    def with_image_size(self, H: int, W: int) -> Camera:
        """Same view at another resolution (intrinsics rescaled)."""
        h0, w0 = self.image_size
        sx, sy = W / w0, H / h0
        fx, fy = self.focal
        cx, cy = self.principal
        return Camera(self.rotation, self.translation, (fx * sx, fy * sy), (cx * sx, cy * sy), (H, W))

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "focal": list(self.focal),
            "principal": list(self.principal),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(np.array(d["rotation"]), np.array(d["translation"]), tuple(d["focal"]), tuple(d["principal"]), tuple(d["image_size"]))


def intrinsics_from_fov(image_size, vfov_deg: float = 50.0):
    H, W = image_size
    fy = (H / 2.0) / math.tan(math.radians(vfov_deg) / 2.0)
    return (fy, fy), (W / 2.0, H / 2.0)


def camera_look_at(eye, target=(0.0, 0.0, 0.0), image_size=(384, 640), vfov_deg: float = 50.0, up=(0.0, 1.0, 0.0)) -> Camera:
    R = look_at(eye, target, up)
    t = -R @ np.asarray(eye, dtype=np.float64)
    focal, principal = intrinsics_from_fov(image_size, vfov_deg)
    return Camera(R, t, focal, principal, image_size)


def fibonacci_sphere(n: int) -> np.ndarray:
    """Unit directions, polar axis +y, first azimuth towards +z (n=1 gives +z)."""
    i = np.arange(n, dtype=np.float64)
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.clip(1.0 - y * y, 0.0, None))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.sin(phi), y, r * np.cos(phi)], axis=1)


def sample_sphere_cameras(n: int, radius: float, look_at_point=(0.0, 0.0, 0.0), image_size=(512, 512), vfov_deg: float = 50.0) -> list[Camera]:
    if n < 1:
        raise CameraError("need at least one camera")
    if not radius > 0:
        raise CameraError(f"radius must be positive, got {radius}")
    target = np.asarray(look_at_point, dtype=np.float64)
    return [camera_look_at(target + radius * d, target, image_size, vfov_deg) for d in fibonacci_sphere(n)]


def ring_cameras(n_azimuth: int, elevations_deg, radius: float, look_at_point=(0.0, 0.0, 0.0), image_size=(1024, 1024), vfov_deg: float = 50.0) -> list[Camera]:
    """Cameras on horizontal rings around the y axis, used for landmark triangulation views."""
    target = np.asarray(look_at_point, dtype=np.float64)
    cams = []
    for el in elevations_deg:
        e = math.radians(el)
        for k in range(n_azimuth):
            a = 2.0 * math.pi * k / n_azimuth
            d = np.array([math.cos(e) * math.sin(a), math.sin(e), math.cos(e) * math.cos(a)])
            cams.append(camera_look_at(target + radius * d, target, image_size, vfov_deg))
    return cams


def camera_tensors(camera: Camera, dtype=torch.float64):
    return (
        torch.as_tensor(camera.rotation, dtype=dtype),
        torch.as_tensor(camera.translation, dtype=dtype),
        torch.tensor(camera.focal, dtype=dtype),
        torch.tensor(camera.principal, dtype=dtype),
    )


def to_camera_frame(points: torch.Tensor, camera: Camera) -> torch.Tensor:
    R, t, _, _ = camera_tensors(camera, points.dtype)
    return points @ R.T + t


def project_torch(points: torch.Tensor, camera: Camera):
    """points [..., 3] world -> (uv pixels [..., 2], depth [...], valid [...])."""
    pc = to_camera_frame(points, camera)
    z = pc[..., 2]
    valid = z > NEAR
    zs = torch.where(valid, z, torch.full_like(z, NEAR))
    _, _, f, c = camera_tensors(camera, points.dtype)
    uv = pc[..., :2] / zs[..., None] * f + c
    return uv, z, valid


def project_points(points, camera: Camera):
    """Numpy convenience wrapper: returns (uv [N, 2], valid [N])."""
    with torch.no_grad():
        uv, _, valid = project_torch(torch.as_tensor(np.asarray(points, dtype=np.float64)), camera)
    return uv.numpy(), valid.numpy()


def save_cameras(path, cameras) -> None:
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in cameras], fh, indent=1)


def load_cameras(path) -> list[Camera]:
    with open(path) as fh:
        return [Camera.from_dict(d) for d in json.load(fh)]


def rotate_camera_about_origin(camera: Camera, axis_angle) -> Camera:
    """The camera that sees R·x the way ``camera`` sees x."""
    R = rotation_matrix_np(axis_angle)
    return Camera(camera.rotation @ R.T, camera.translation, camera.focal, camera.principal, camera.image_size)
