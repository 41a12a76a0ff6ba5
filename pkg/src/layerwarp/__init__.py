"""layerwarp: shape-aware layered-video deformation engine.

Propagates a single edited keyframe's shape and appearance change to every
frame of a layered video via atlas-space deformation fields, then refines the
result with a pluggable-guidance optimization.
"""

from .errors import (DegenerateWarpError, GuidanceContractError, LayerWarpError,
                     OptimizationDivergedError, PipelineError, WarpSolveError)
from .field import (DeformationField, JacobianField, SamplingField,
                    as_deformation_field, as_sampling_field, identity_field,
                    invert_jacobians, jacobian_of_field, push_through_warp,
                    read_lwf, sample, scale_deformation, transform_vectors,
                    write_lwf)
from .tps import (ThinPlateSpline, eval_tps, fit_tps, invert_field_via_tps,
                  load_correspondence, tps_to_field)

__version__ = "0.1.0"

__all__ = [
    "DegenerateWarpError", "GuidanceContractError", "LayerWarpError",
    "OptimizationDivergedError", "PipelineError", "WarpSolveError",
    "DeformationField", "JacobianField", "SamplingField",
    "as_deformation_field", "as_sampling_field", "identity_field",
    "invert_jacobians", "jacobian_of_field", "push_through_warp",
    "read_lwf", "sample", "scale_deformation", "transform_vectors",
    "write_lwf",
    "ThinPlateSpline", "eval_tps", "fit_tps", "invert_field_via_tps",
    "load_correspondence", "tps_to_field",
]
