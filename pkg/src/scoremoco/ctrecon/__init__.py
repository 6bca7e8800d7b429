"""2-D fan-beam CT simulation and motion-aware filtered backprojection."""

from .fbp import FBPOperator, fbp_reconstruct, filter_sinogram, ramp_filter_response, recon_vjp
from .geometry import FanBeamGeometry, project_points, source_and_detector
from .phantom import PhantomSampler, rasterize_ellipses, sample_phantom, shepp_logan
from .projector import Sinogram, backproject_adjoint, forward_project, read_sinogram, write_sinogram

__all__ = [
    "FBPOperator",
    "FanBeamGeometry",
    "PhantomSampler",
    "Sinogram",
    "backproject_adjoint",
    "fbp_reconstruct",
    "filter_sinogram",
    "forward_project",
    "project_points",
    "ramp_filter_response",
    "rasterize_ellipses",
    "read_sinogram",
    "recon_vjp",
    "sample_phantom",
    "shepp_logan",
    "source_and_detector",
    "write_sinogram",
]
