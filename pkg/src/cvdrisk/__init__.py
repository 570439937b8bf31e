"""Cardiovascular risk scoring from chest low-dose CT.

End-to-end pipeline: heart localization on axial slices, fixed-size cardiac
ROI extraction, a tri-planar attention CNN producing a risk probability,
Agatston calcium scoring, and the clinical statistics used to evaluate
predictions (AUC with confidence intervals, significance tests, sensitivity
at fixed PPV, Kaplan-Meier analysis). A synthetic phantom generator makes the
whole pipeline trainable and testable at desk scale.
"""

from .volume import (
    BoundingBox3D,
    CALCIFICATION_RANGE,
    CTVolume,
    FAT_RANGE,
    HURange,
    VoxelMask,
    crop,
    hu_mask,
    normalize_for_net,
    resample_to_shape,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox3D",
    "CALCIFICATION_RANGE",
    "CTVolume",
    "FAT_RANGE",
    "HURange",
    "VoxelMask",
    "crop",
    "hu_mask",
    "normalize_for_net",
    "resample_to_shape",
    "__version__",
]
