"""Per-frame motion parameters and their neural (or direct) parameterization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..archive import read_archive, write_archive
from ..body.model import NUM_BODY_JOINTS

POSE_DIM = NUM_BODY_JOINTS * 3
PE_DIMS = 64
HIDDEN = 128
LAYERS = 4


class TrackError(RuntimeError):
    pass


def positional_encoding(t, num_frames: int, dims: int = PE_DIMS, max_freq: float = 16.0) -> torch.Tensor:
    """Interleaved (sin, cos) pairs at dims/2 geometric frequencies of normalized time.

    Frequencies run from pi to ``max_freq`` * pi (radians per unit of t / (F - 1)).
    ``t`` may be an int or an integer tensor; the result has shape [..., dims].
    """
    if dims % 2:
        raise TrackError(f"positional encoding needs an even dimension, got {dims}")
    t = torch.as_tensor(t, dtype=torch.float64)
    x = t / max(num_frames - 1, 1)
    n = dims // 2
    freqs = math.pi * torch.as_tensor(max_freq, dtype=torch.float64) ** (torch.arange(n, dtype=torch.float64) / max(n - 1, 1))
    ang = x[..., None] * freqs
    return torch.stack([torch.sin(ang), torch.cos(ang)], -1).reshape(*ang.shape[:-1], dims)


class MotionMLP(nn.Module):
    """``LAYERS`` linear layers with SiLU activations; the last layer starts at zero."""

    def __init__(self, out_dim: int, in_dim: int = PE_DIMS, hidden: int = HIDDEN, layers: int = LAYERS):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        mods = []
        for i in range(layers):
            mods.append(nn.Linear(dims[i], dims[i + 1], dtype=torch.float64))
            if i < layers - 1:
                mods.append(nn.SiLU())
        self.net = nn.Sequential(*mods)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class NeuralParameterization(nn.Module):
    """theta_t, T_t, R_t = anchor + Phi(pe(t)) - Phi(pe(0)) for each block."""

    def __init__(self, num_frames: int, pose0, trans0, rot0, max_freq: float = 16.0):
        super().__init__()
        self.num_frames = int(num_frames)
        self.max_freq = float(max_freq)
        self.register_buffer("pose0", torch.as_tensor(np.asarray(pose0, dtype=np.float64).reshape(POSE_DIM)))
        self.register_buffer("trans0", torch.as_tensor(np.asarray(trans0, dtype=np.float64).reshape(3)))
        self.register_buffer("rot0", torch.as_tensor(np.asarray(rot0, dtype=np.float64).reshape(3)))
        self.phi_pose = MotionMLP(POSE_DIM)
        self.phi_trans = MotionMLP(3)
        self.phi_rot = MotionMLP(3)

    def encode(self, t) -> torch.Tensor:
        return positional_encoding(t, self.num_frames, PE_DIMS, self.max_freq)

    def forward(self, t: torch.Tensor):
        """t [B] integer frame indices -> (pose [B, 69], trans [B, 3], rot [B, 3])."""
        e, e0 = self.encode(t), self.encode(torch.zeros(1, dtype=torch.long))
        # batched matmuls may round phi(e) and phi(e0) differently, so frame 0 is pinned exactly
        first = (torch.as_tensor(t).reshape(-1) == 0)[:, None]
        out = []
        for phi, anchor in ((self.phi_pose, self.pose0), (self.phi_trans, self.trans0), (self.phi_rot, self.rot0)):
            off = phi(e) - phi(e0)
            out.append(anchor + torch.where(first, torch.zeros_like(off), off))
        return tuple(out)


class DirectParameterization(nn.Module):
    """Free per-frame offsets from the anchor (frame 0 pinned); the ablation baseline."""

    def __init__(self, num_frames: int, pose0, trans0, rot0):
        super().__init__()
        self.num_frames = int(num_frames)
        self.register_buffer("pose0", torch.as_tensor(np.asarray(pose0, dtype=np.float64).reshape(POSE_DIM)))
        self.register_buffer("trans0", torch.as_tensor(np.asarray(trans0, dtype=np.float64).reshape(3)))
        self.register_buffer("rot0", torch.as_tensor(np.asarray(rot0, dtype=np.float64).reshape(3)))
        self.d_pose = nn.Parameter(torch.zeros(num_frames, POSE_DIM, dtype=torch.float64))
        self.d_trans = nn.Parameter(torch.zeros(num_frames, 3, dtype=torch.float64))
        self.d_rot = nn.Parameter(torch.zeros(num_frames, 3, dtype=torch.float64))

    def forward(self, t: torch.Tensor):
        keep = (t != 0).to(torch.float64)[:, None]
        return (self.pose0 + keep * self.d_pose[t], self.trans0 + keep * self.d_trans[t], self.rot0 + keep * self.d_rot[t])


def eval_params(param: nn.Module, t):
    """(theta_t, T_t, R_t) for one frame index as float64 tensors."""
    if not 0 <= int(t) < param.num_frames:
        raise TrackError(f"frame {t} outside [0, {param.num_frames})")
    pose, trans, rot = param(torch.tensor([int(t)]))
    return pose[0], trans[0], rot[0]


@dataclass
class MotionParams:
    scale: float
    beta: np.ndarray  # [10]
    pose: np.ndarray  # [F, 69]
    trans: np.ndarray  # [F, 3]
    rot: np.ndarray  # [F, 3] axis-angle
    delta: np.ndarray | None = None  # [F, V, 3]

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(-1, POSE_DIM)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(-1, 3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(-1, 3)
        if not len(self.pose) == len(self.trans) == len(self.rot):
            raise TrackError("pose, translation and rotation frame counts differ")
        if self.delta is not None:
            self.delta = np.asarray(self.delta, dtype=np.float64)
            if len(self.delta) != len(self.pose) or not np.all(np.isfinite(self.delta)):
                raise TrackError("vertex offsets must be finite, one array per frame")

    @property
    def num_frames(self) -> int:
        return len(self.pose)

    def save(self, out_dir) -> None:
        """params.jsonl (t, pose, trans, rot, plus shared scale/beta on every line) and delta.zip."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = [
            json.dumps({"t": t, "pose": self.pose[t].tolist(), "trans": self.trans[t].tolist(), "rot": self.rot[t].tolist(),
                        "scale": float(self.scale), "beta": self.beta.tolist()})  # fmt: skip
            for t in range(self.num_frames)
        ]
        (out / "params.jsonl").write_text("\n".join(lines) + "\n")
        if self.delta is not None:
            write_archive(out / "delta.zip", {"delta": self.delta}, meta={"kind": "vertex-offsets"}, dtypes={"delta": "float64"})

    @classmethod
    def load(cls, out_dir) -> MotionParams:
        out = Path(out_dir)
        recs = [json.loads(line) for line in (out / "params.jsonl").read_text().splitlines() if line.strip()]
        if not recs:
            raise TrackError(f"{out}/params.jsonl holds no frames")
        recs.sort(key=lambda r: r["t"])
        delta = read_archive(out / "delta.zip")[0]["delta"] if (out / "delta.zip").exists() else None
        return cls(recs[0]["scale"], recs[0]["beta"], [r["pose"] for r in recs], [r["trans"] for r in recs], [r["rot"] for r in recs], delta)
