"""Federated cross-view geo-localization at desk scale.

A differentiable coarse-to-fine Levenberg-Marquardt pose solver over learned
two-branch multi-scale features, trained per client and aggregated under
full-model or encoder-only federated strategies, evaluated with
lateral/longitudinal/azimuth threshold recalls on synthetic, geometrically
consistent aerial/ground scenes.
"""

__version__ = "0.1.0"

from .geometry import AerialGeoref, CameraIntrinsics, Pose
from .tensor import Tensor, tune_allocator

tune_allocator()

__all__ = ["Tensor", "Pose", "CameraIntrinsics", "AerialGeoref", "__version__"]
