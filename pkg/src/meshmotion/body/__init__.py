from .model import (
    JOINT_NAMES,
    NUM_BETAS,
    NUM_BODY_JOINTS,
    NUM_JOINTS,
    BodyModel,
    BodyModelError,
    PosedBody,
    PoseState,
    ShapeCoeffs,
    body_model_from_arrays,
    convert_smpl_npz,
    forward,
    lbs,
    load_body_model,
)
from .prior import PoseDecoder, PosePrior, PriorConfigError, decode_pose, load_prior
from .procedural import build_procedural_body
