"""Motion segmentation for moving-camera video from flow orientation fields."""

__version__ = "0.1.0"

from .flowio import FlowField, read_flo, write_flo  # noqa: F401
from .orientation import (  # noqa: F401
    CameraIntrinsics,
    MotionLibrary,
    OrientationField,
    build_library,
    flow_to_orientation,
    orientation_field,
)
from .pipeline import PipelineConfig, PipelineState, process_frame, run_video  # noqa: F401
from .sampler import SamplerConfig, SegmentationResult, run_inference, select_alpha  # noqa: F401
