"""Joint triangulation and body-model registration to the input mesh."""

from .fit import (
    P2PTerm,
    Registration,
    RegistrationConfig,
    RegistrationError,
    RegistrationResult,
    fit_registration,
    initial_alignment,
    joint_loss,
    registered_body,
    smooth_norm,
    world_body,
)
from .triangulate import Joints3D, TriangulationError, project_to_landmarks, triangulate_joints, triangulate_point
