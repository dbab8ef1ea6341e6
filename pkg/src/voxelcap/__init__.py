"""Multi-camera voxel reconstruction and articulated pose tracking.

Modules:
    geometry: pinhole cameras, rigs and projection.
    silhouette: Gaussian background model, silhouette likelihood and edge maps.
    voxelgrid: occupancy fusion, smoothing, surface extraction, PLY export.
    bodymodel: the 31-DOF cylinder body, kinematics and cylinder projection.
    tracker: annealed particle filter with silhouette/edge weights.
    parallel: deterministic chunked map and reduce.
    synth: synthetic rigs, scenes and datasets.
    pipeline, cli: staged drivers and the ``voxelcap`` command.
    estimators: scikit-learn style wrappers.
"""

from .bodymodel import BodyModel, default_body, forward_kinematics, joint_centers
from .estimators import BackgroundSubtractor, PoseTracker, VoxelReconstructor
from .exceptions import VoxelcapError
from .geometry import CameraModel, CameraRig
from .parallel import ParallelConfig
from .tracker import AnnealSchedule, ParticleSet, apf_frame
from .voxelgrid import FusionParams, VolumeOfInterest, VoxelCloud, fuse_occupancy

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule",
    "BackgroundSubtractor",
    "BodyModel",
    "CameraModel",
    "CameraRig",
    "FusionParams",
    "ParallelConfig",
    "ParticleSet",
    "PoseTracker",
    "VolumeOfInterest",
    "VoxelCloud",
    "VoxelReconstructor",
    "VoxelcapError",
    "apf_frame",
    "default_body",
    "forward_kinematics",
    "fuse_occupancy",
    "joint_centers",
]
