"""Online distillation of a player detector from a pinhole teacher into a fisheye student."""
from .config import RunConfig
from .core import Box, CameraId, Frame, MotionMasks, RegionPartition
from .geometry import FisheyeModel, Homography, build_region_partition, estimate_homography
from .student import BlobDetector, GridDetector

__all__ = [
    "BlobDetector", "Box", "CameraId", "FisheyeModel", "Frame", "GridDetector", "Homography", "MotionMasks",
    "RegionPartition", "RunConfig", "build_region_partition", "estimate_homography",
]
__version__ = "0.1.0"
