"""Cameras, rasterization and feature baking."""

from .bake import BakeResult, bake_vertex_features, scene_scale, vertex_visibility
from .camera import (
    Camera,
    CameraError,
    camera_look_at,
    fibonacci_sphere,
    intrinsics_from_fov,
    load_cameras,
    project_points,
    project_torch,
    ring_cameras,
    sample_sphere_cameras,
    save_cameras,
)
from .raster import (
    RasterError,
    RasterSettings,
    RenderResult,
    compute_fragments,
    rasterize_attributes,
    rasterize_depth,
    rasterize_silhouette,
    render_preview,
)
