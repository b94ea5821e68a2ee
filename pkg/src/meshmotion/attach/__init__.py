"""Surface attachment of input-mesh vertices to the body model (closest face, barycentrics, normal offset)."""

from .attachment import (
    AttachError,
    AttachmentMap,
    AttachThresholds,
    apply_attachment,
    build_attachment,
    build_attachment_arrays,
    face_frames,
)
