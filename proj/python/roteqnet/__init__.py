"""Rotation equivariant vector field networks.

Thin wrapper over the C++ kernels: rotating convolutions, orientation
pooling into vector fields, and vector-field convolutions, plus helpers
to run saved checkpoints.
"""

from ._core import (
    __version__,
    orientation_pool,
    parameter_count,
    predict,
    rot_conv,
    rotate_canonical,
    vec_conv,
    vec_rot_conv,
)

__all__ = [
    "__version__",
    "orientation_pool",
    "parameter_count",
    "predict",
    "rot_conv",
    "rotate_canonical",
    "vec_conv",
    "vec_rot_conv",
]
