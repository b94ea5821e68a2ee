"""Landmark-only tracking (first stage) under different temporal / prior weights.

Shows why the temporal weights are recalibrated: the temporal penalties are unsquared
norms of frame differences, so at unit weight every frame stays at the anchor pose.
Uses the ground-truth registration and features to isolate the tracking objective.

    python3 scripts/temporal_weights.py --iterations 800
"""

import argparse
import logging

import numpy as np

from meshmotion.attach import build_attachment
from meshmotion.body import PoseState, ShapeCoeffs, build_procedural_body
from meshmotion.ingest.landmarks import smooth_landmarks
from meshmotion.ingest.observations import FrameObservations
from meshmotion.metrics import evaluate
from meshmotion.register import Registration, registered_body
from meshmotion.synth import NoiseLevels, SynthSpec, generate_sequence
from meshmotion.track import LossWeights, TrackConfig, deform_sequence, track_sequence

SETTINGS = {
    "unit temporal weights": dict(temp_trans=1.0, temp_rot=1.0, temp_pose=0.5, temp_joints=1.0, pose_prior=1e-2),
    "defaults": {},
    "weak temporal": dict(temp_trans=1e-4, temp_rot=1e-4, temp_pose=1e-4, temp_joints=1e-4),
    "no temporal": dict(temp_trans=0.0, temp_rot=0.0, temp_pose=0.0, temp_joints=0.0),
}


def main(iterations: int, noise_px: float) -> None:
    body = build_procedural_body()
    seq = generate_sequence(SynthSpec(noise=NoiseLevels(landmark_px=noise_px), bake_views=1), body)
    gt = seq.ground_truth
    reg = Registration(gt.scale, ShapeCoeffs(gt.beta), PoseState(gt.pose[0], gt.rot[0]), gt.trans[0], gt.rot[0])
    att = build_attachment(seq.mesh, registered_body(body, reg), body)
    smoothed = smooth_landmarks([o.landmarks for o in seq.observations], 5)
    obs = [FrameObservations(lm, o.silhouette, o.features, o.frame_index) for lm, o in zip(smoothed, seq.observations)]
    for name, w in SETTINGS.items():
        cfg = TrackConfig(iterations=iterations, stage_fractions=(1.0, 0.0, 0.0), weights=LossWeights(**w), log_every=0)
        res = track_sequence(seq.faces, att, body, reg, obs, seq.vertex_features, seq.camera, cfg)
        mesh_v, _, joints = deform_sequence(att, body, res.params)
        rep = evaluate(joints, seq.trajectory.joints, mesh_v, seq.trajectory.vertices, "none")
        motion = np.abs(res.params.pose - res.params.pose[0]).max()
        print(f"{name:22s} MPJPE {rep.mpjpe:.4f}  PVE {rep.pve:.4f}  Accel {rep.accel:.3e}  max pose change {motion:.3f} rad")


if __name__ == "__main__":
    logging.basicConfig(level=logging.WARNING)
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=800)
    ap.add_argument("--noise-px", type=float, default=0.0)
    args = ap.parse_args()
    main(args.iterations, args.noise_px)
