"""Multi-camera SLAM front-end toolkit.

Modules: ``geometry`` (SE(3), cameras, triangulation), ``rig`` (overlap
check and initialization), ``estimator`` (Gauss-Newton PnP, Fisher
information, entropy), ``keyframe_policy``, ``voxel_map``, ``sim_world``,
``pipeline``, ``evaluation``, ``scenario`` and ``cli``.
"""

from .errors import McSlamError
from .geometry import CameraModel, RigidTransform
from .rig import CameraRig

__version__ = "0.1.0"

__all__ = ["CameraModel", "CameraRig", "McSlamError", "RigidTransform", "__version__"]
