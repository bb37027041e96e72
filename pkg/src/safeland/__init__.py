"""Perception pipeline for UAV safe landing: LiDAR/camera alignment,
dynamic-time depth completion with stereo self-evaluation, and landing-site
selection, together with a synthetic-terrain simulator to exercise it."""

__version__ = "0.1.0"

from .errors import SafeLandError
from .geometry import CameraIntrinsics, PoseTrack, TimedPose, Transform
from .maps import DepthMap, SparseDepth

__all__ = [
    "__version__",
    "SafeLandError",
    "CameraIntrinsics",
    "PoseTrack",
    "TimedPose",
    "Transform",
    "DepthMap",
    "SparseDepth",
]
