"""Input mesh and per-frame observation ingestion."""

from .features import FeatureBasis, FeatureBasisError, fit_feature_basis
from .landmarks import (
    LandmarkError,
    LandmarkFrame,
    LandmarkMap,
    default_landmark_map,
    joints_to_source_landmarks,
    read_landmarks_jsonl,
    remap_landmarks,
    smooth_landmarks,
    write_landmarks_jsonl,
)
from .mesh_io import InputMesh, MeshError, load_and_normalize_mesh, normalize_mesh, read_mesh, vertex_normals, write_obj
from .observations import FrameObservations, ObservationError, frame_name, load_observations, read_dataset_meta
from .silhouette import extract_silhouette, read_mask_png, write_image_png, write_mask_png
