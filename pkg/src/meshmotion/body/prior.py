"""Pose-prior backends.

``raw``: the pose is the 23x3 axis-angle vector itself and the prior is its L2 norm.
``latent``: a 32-d code decoded by a VPoser-style network (two hidden layers of 512,
6-d rotation output for 21 body joints; the two hand joints stay at zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..archive import read_archive, write_archive
from ..rotations import matrix_to_axis_angle_torch
from .model import NUM_BODY_JOINTS, PoseState

LATENT_DIM = 32
DECODED_JOINTS = 21
HIDDEN = 512

# VPoser v2 state-dict names -> ours
_VPOSER_KEYS = {
    "decoder_net.0.weight": "fc1.weight",
    "decoder_net.0.bias": "fc1.bias",
    "decoder_net.3.weight": "fc2.weight",
    "decoder_net.3.bias": "fc2.bias",
    "decoder_net.5.weight": "out.weight",
    "decoder_net.5.bias": "out.bias",
}


class PriorConfigError(RuntimeError):
    pass


class PoseDecoder(nn.Module):
    def __init__(self, hidden: int = HIDDEN):
        super().__init__()
        self.fc1 = nn.Linear(LATENT_DIM, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, DECODED_JOINTS * 6)
        self.act = nn.LeakyReLU(0.01)
        self.double()
        self.eval()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """z [B, 32] -> body_pose [B, 23, 3] axis-angle."""
        h = self.act(self.fc1(z))
        h = self.act(self.fc2(h))
        x = self.out(h).reshape(-1, DECODED_JOINTS, 3, 2)
        b1 = nn.functional.normalize(x[..., 0], dim=-1)
        a2 = x[..., 1]
        b2 = nn.functional.normalize(a2 - (b1 * a2).sum(-1, keepdim=True) * b1, dim=-1)
        b3 = torch.cross(b1, b2, dim=-1)
        R = torch.stack([b1, b2, b3], dim=-1)
        aa = matrix_to_axis_angle_torch(R)
        hands = torch.zeros(aa.shape[0], NUM_BODY_JOINTS - DECODED_JOINTS, 3, dtype=aa.dtype)
        return torch.cat([aa, hands], dim=1)

    def save(self, path):
        arrays = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        return write_archive(path, arrays, meta={"kind": "pose-decoder"}, dtypes={k: "float64" for k in arrays})

    @classmethod
    def load(cls, path) -> PoseDecoder:
        arrays, _ = read_archive(path)
        return cls.from_state_dict(arrays)

    @classmethod
    def from_state_dict(cls, state: dict) -> PoseDecoder:
        state = {_VPOSER_KEYS.get(k, k): v for k, v in state.items()}
        missing = [k for k in ("fc1.weight", "fc2.weight", "out.weight") if k not in state]
        if missing:
            raise PriorConfigError(f"decoder weights missing: {', '.join(missing)}")
        hidden = np.asarray(state["fc1.weight"]).shape[0]
        dec = cls(hidden)
        tensors = {k: torch.as_tensor(np.asarray(v), dtype=torch.float64) for k, v in state.items() if k in dec.state_dict()}
        dec.load_state_dict(tensors)
        return dec


@dataclass
class PosePrior:
    """Chooses how a pose block is parameterized and regularized."""

    mode: str = "raw"
    decoder: PoseDecoder | None = None

    def __post_init__(self):
        if self.mode not in ("raw", "latent"):
            raise PriorConfigError(f"unknown pose prior mode {self.mode!r}")
        if self.mode == "latent" and self.decoder is None:
            raise PriorConfigError("latent pose prior requested but no decoder weights were loaded")
        if self.decoder is not None:
            for p in self.decoder.parameters():
                p.requires_grad_(False)

    @property
    def dim(self) -> int:
        return LATENT_DIM if self.mode == "latent" else NUM_BODY_JOINTS * 3

    def to_body_pose(self, code: torch.Tensor) -> torch.Tensor:
        """code [B, dim] -> body_pose [B, 23, 3]."""
        if self.mode == "raw":
            return code.reshape(-1, NUM_BODY_JOINTS, 3)
        return self.decoder(code)


def decode_pose(latent, prior: PosePrior, stored: PoseState | None = None) -> PoseState:
    """Decode a latent code into a PoseState.

    In raw mode the latent is ignored and ``stored`` comes back unchanged.
    """
    if prior.mode == "raw":
        if stored is None:
            raise PriorConfigError("raw pose prior has no decoder; pass the stored pose")
        return stored
    z = torch.as_tensor(np.asarray(latent, dtype=np.float64).reshape(1, LATENT_DIM))
    with torch.no_grad():
        body = prior.decoder(z)[0].numpy()
    go = stored.global_orient if stored is not None else np.zeros(3)
    return PoseState(body, go, latent=np.asarray(latent, dtype=np.float64).copy())


def load_prior(mode: str, weights_path=None) -> PosePrior:
    if mode == "latent":
        if weights_path is None:
            raise PriorConfigError("latent pose prior requested but no decoder weights path configured")
        return PosePrior("latent", PoseDecoder.load(weights_path))
    return PosePrior(mode)
