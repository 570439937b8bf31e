"""Agatston coronary-calcium scoring and clinical threshold adapters.

Scoring rules: voxels at 130 HU and above are calcium candidates, per-slice
2D connected components (8-connectivity) below 1 mm^2 are discarded, each
remaining lesion contributes area_mm2 x density_weight x (slice_mm / 3),
where the density weight comes from the lesion's peak HU (130-199 -> 1,
200-299 -> 2, 300-399 -> 3, >= 400 -> 4).

Note the scoring threshold is inclusive (>= 130) while the attention masks
elsewhere use the strict > 130 convention; each follows its own source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import MissingSpacing, OutOfRange
from .volume import BoundingBox3D, CTVolume, crop

SCORING_HU_THRESHOLD = 130.0
MIN_LESION_AREA_MM2 = 1.0
REFERENCE_SLICE_MM = 3.0

_EIGHT_CONN = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class CalciumLesion:
    z_index: int
    area_mm2: float
    peak_hu: float

    @property
    def density_weight(self) -> int:
        return density_weight(self.peak_hu)


def density_weight(peak_hu: float) -> int:
    if peak_hu < SCORING_HU_THRESHOLD:
        raise OutOfRange(f"lesion peak {peak_hu} below scoring threshold")
    if peak_hu < 200:
        return 1
    if peak_hu < 300:
        return 2
    if peak_hu < 400:
        return 3
    return 4


def agatston_score(vol: CTVolume, roi: BoundingBox3D | None = None
                   ) -> tuple[float, list[CalciumLesion]]:
    """Total Agatston score and the per-slice lesion list.

    An optional box restricts scoring to a coronary region of interest;
    lesion z indices then refer to the cropped volume.
    """
    sz, sy, sx = vol.spacing
    if not all(math.isfinite(s) and s > 0 for s in (sz, sy, sx)):
        raise MissingSpacing(f"need positive spacing, got {vol.spacing}")
    if roi is not None:
        vol = crop(vol, roi)
    pixel_area = sy * sx
    slice_factor = sz / REFERENCE_SLICE_MM

    lesions: list[CalciumLesion] = []
    total = 0.0
    candidates = vol.voxels >= SCORING_HU_THRESHOLD
    for z in range(vol.shape[0]):
        mask = candidates[z]
        if not mask.any():
            continue
        labeled, n = ndimage.label(mask, structure=_EIGHT_CONN)
        for comp in range(1, n + 1):
            comp_mask = labeled == comp
            area = float(comp_mask.sum()) * pixel_area
            if area < MIN_LESION_AREA_MM2:
                continue
            peak = float(vol.voxels[z][comp_mask].max())
            lesion = CalciumLesion(z, area, peak)
            lesions.append(lesion)
            total += area * lesion.density_weight * slice_factor
    return total, lesions


# --- evaluation-label adapters ---------------------------------------------

SEVERE_CAC_THRESHOLD = 400.0
POSITIVE_CAC_THRESHOLD = 10.0


def cac_positive_labels(score: float) -> dict[str, bool]:
    """Severe (> 400) and screening-positive (> 10) flags for a CAC score."""
    if score < 0:
        raise OutOfRange(f"CAC score must be >= 0, got {score}")
    return {"severe": score > SEVERE_CAC_THRESHOLD,
            "positive": score > POSITIVE_CAC_THRESHOLD}


def cadrads_severe(score: int) -> bool:
    """Severe stenosis iff the 0-5 stenosis report score is >= 4."""
    if not isinstance(score, (int, np.integer)) or not 0 <= score <= 5:
        raise OutOfRange(f"stenosis score must be an integer in 0..5, got {score!r}")
    return score >= 4


def mesa_highrisk(scores: list[float]) -> list[bool]:
    """High-risk flags using the cohort's median as the cut point.

    The median is the lower median for even counts; high risk is a strictly
    greater score.
    """
    if len(scores) < 2:
        raise OutOfRange(f"need >= 2 subjects, got {len(scores)}")
    ordered = sorted(scores)
    median = ordered[(len(scores) - 1) // 2]
    return [s > median for s in scores]


# --- reader-study grades ----------------------------------------------------

def grade_from_fraction(frac: float) -> int:
    """Extent grade 0-3 from the calcified fraction of coronary length.

    0 = none, 1 = under one third, 2 = one third to two thirds (inclusive),
    3 = over two thirds.
    """
    if not 0.0 <= frac <= 1.0:
        raise OutOfRange(f"fraction must be in [0, 1], got {frac}")
    if frac == 0.0:
        return 0
    if frac < 1.0 / 3.0:
        return 1
    if frac <= 2.0 / 3.0:
        return 2
    return 3


def average_grade(grades: list[int]) -> float:
    """Mean of per-reader grades."""
    if not grades:
        raise OutOfRange("need at least one grade")
    for g in grades:
        if not 0 <= g <= 3:
            raise OutOfRange(f"grade must be in 0..3, got {g}")
    return float(np.mean(grades))
