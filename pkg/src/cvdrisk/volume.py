"""Core CT volume type, HU masking, resampling, cropping, and normalization.

All volumes use (z, y, x) dimension order; an axial slice is a fixed z index.
Physical positions are voxel centers: pos_mm = origin + index * spacing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import DegenerateVolume, EmptyBox

HU_MIN = -1024.0
HU_MAX = 3071.0

# network input window, wide enough to cover fat, soft tissue and dense calcium
NET_CLIP_LO = -1024.0
NET_CLIP_HI = 1024.0


@dataclass(frozen=True)
class CTVolume:
    """A 3D grid of Hounsfield units with physical geometry.

    Attributes:
        voxels: HU values, shape (nz, ny, nx).
        spacing: (sz, sy, sx) voxel size in mm, all > 0.
        origin: (z, y, x) position of the center of voxel (0,0,0) in mm.
        subject_id / exam_id: provenance tags carried through the pipeline.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    subject_id: str = ""
    exam_id: str = ""

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise DegenerateVolume(f"expected 3D voxel array, got ndim={self.voxels.ndim}")
        if len(self.spacing) != 3 or any(
            not (math.isfinite(s) and s > 0) for s in self.spacing
        ):
            raise DegenerateVolume(f"spacing must be positive and finite, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def physical_extent_mm(self) -> tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.shape, self.spacing))

    def with_voxels(self, voxels: np.ndarray, **changes) -> "CTVolume":
        return replace(self, voxels=voxels, **changes)


def clamp_hu(voxels: np.ndarray) -> np.ndarray:
    """Clamp raw values into the valid HU range [-1024, 3071] (ingestion rule)."""
    return np.clip(voxels, HU_MIN, HU_MAX)


def validate_ingested(vol: CTVolume, min_dim: int = 8) -> CTVolume:
    """Check the ingestion invariants: clamped HU range and minimum size."""
    if any(n < min_dim for n in vol.shape):
        raise DegenerateVolume(f"ingested volume must have >= {min_dim} voxels per axis, got {vol.shape}")
    v = vol.voxels
    if v.min() < HU_MIN or v.max() > HU_MAX:
        raise DegenerateVolume("HU values outside [-1024, 3071]; clamp on ingest")
    return vol


@dataclass(frozen=True)
class HURange:
    """Half-open or closed HU interval for tissue masking.

    Semantics follow the clinical conventions this pipeline uses:
    an infinite upper bound means a strict lower bound (v > lo, the
    calcification rule), a finite pair is inclusive on both ends
    (lo <= v <= hi, the fat rule).
    """

    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"HURange requires lo < hi, got ({self.lo}, {self.hi})")

    def contains(self, values: np.ndarray) -> np.ndarray:
        if math.isinf(self.hi) and not math.isinf(self.lo):
            return values > self.lo
        if math.isinf(self.lo) and not math.isinf(self.hi):
            return values <= self.hi
        if math.isinf(self.lo) and math.isinf(self.hi):
            return np.ones_like(values, dtype=bool)
        return (values >= self.lo) & (values <= self.hi)


CALCIFICATION_RANGE = HURange(130.0, math.inf)
FAT_RANGE = HURange(-190.0, -30.0)


@dataclass(frozen=True)
class VoxelMask:
    """Boolean mask with the same shape as its source volume."""

    bits: np.ndarray
    source_shape: tuple[int, int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.source_shape is None:
            object.__setattr__(self, "source_shape", self.bits.shape)
        if self.bits.shape != self.source_shape:
            raise ValueError("mask shape must equal source volume shape")

    @property
    def count(self) -> int:
        return int(self.bits.sum())


def hu_mask(vol: CTVolume, hu_range: HURange) -> VoxelMask:
    """Mask voxels whose HU falls in `hu_range` (see HURange for bound rules)."""
    return VoxelMask(hu_range.contains(vol.voxels), vol.shape)


@dataclass(frozen=True)
class BoundingBox3D:
    """Axis-aligned voxel box given by its two extreme corners, inclusive.

    Corner (x_min, y_min, z_min) and corner (x_max, y_max, z_max) are both
    voxel indices inside the box, so the box spans max - min + 1 voxels per
    axis.
    """

    x_min: int
    y_min: int
    z_min: int
    x_max: int
    y_max: int
    z_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max or self.z_min > self.z_max:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def corner_min(self) -> tuple[int, int, int]:
        return (self.x_min, self.y_min, self.z_min)

    @property
    def corner_max(self) -> tuple[int, int, int]:
        return (self.x_max, self.y_max, self.z_max)

    def extents(self) -> tuple[int, int, int]:
        """Box size in voxels as (nz, ny, nx)."""
        return (
            self.z_max - self.z_min + 1,
            self.y_max - self.y_min + 1,
            self.x_max - self.x_min + 1,
        )

    def padded(self, frac: float) -> "BoundingBox3D":
        """Grow each axis by `frac` of its extent on both sides (rounded)."""
        dz, dy, dx = [max(0, int(round(frac * e))) for e in self.extents()]
        return BoundingBox3D(
            self.x_min - dx, self.y_min - dy, self.z_min - dz,
            self.x_max + dx, self.y_max + dy, self.z_max + dz,
        )

    def clamped(self, shape: tuple[int, int, int]) -> "BoundingBox3D":
        """Intersect with a volume of the given (nz, ny, nx) shape."""
        nz, ny, nx = shape
        x0, y0, z0 = max(self.x_min, 0), max(self.y_min, 0), max(self.z_min, 0)
        x1, y1, z1 = min(self.x_max, nx - 1), min(self.y_max, ny - 1), min(self.z_max, nz - 1)
        if x0 > x1 or y0 > y1 or z0 > z1:
            raise EmptyBox(f"box {self} does not intersect volume of shape {shape}")
        return BoundingBox3D(x0, y0, z0, x1, y1, z1)

    @staticmethod
    def full(shape: tuple[int, int, int]) -> "BoundingBox3D":
        nz, ny, nx = shape
        return BoundingBox3D(0, 0, 0, nx - 1, ny - 1, nz - 1)


def crop(vol: CTVolume, box: BoundingBox3D, clamp: bool = True) -> CTVolume:
    """Extract the subvolume covered by `box`.

    Out-of-bounds boxes are clamped to the volume by default (detector
    aggregates can overshoot slightly); pass clamp=False to require the box
    to lie fully inside.
    """
    if clamp:
        box = box.clamped(vol.shape)
    else:
        nz, ny, nx = vol.shape
        if (box.x_min < 0 or box.y_min < 0 or box.z_min < 0
                or box.x_max >= nx or box.y_max >= ny or box.z_max >= nz):
            raise EmptyBox(f"box {box} exceeds volume of shape {vol.shape} and clamping is off")
    sub = vol.voxels[
        box.z_min:box.z_max + 1,
        box.y_min:box.y_max + 1,
        box.x_min:box.x_max + 1,
    ].copy()
    sz, sy, sx = vol.spacing
    oz, oy, ox = vol.origin
    new_origin = (oz + box.z_min * sz, oy + box.y_min * sy, ox + box.x_min * sx)
    return vol.with_voxels(sub, origin=new_origin)


def resample_to_shape(vol: CTVolume, target_shape: tuple[int, int, int]) -> CTVolume:
    """Resample to `target_shape` with anti-alias Gaussian smoothing.

    Axes that shrink by factor f > 1 are pre-smoothed with sigma = f/2 source
    voxels; upsampled axes are not smoothed. Interpolation is trilinear with
    voxel centers aligned, and spacing is rescaled so the physical extent is
    preserved.
    """
    if any(n < 2 for n in vol.shape):
        raise DegenerateVolume(f"cannot resample volume of shape {vol.shape}")
    if any(t < 8 for t in target_shape):
        raise DegenerateVolume(f"target shape must be >= 8 per axis, got {target_shape}")

    src = vol.voxels.astype(np.float32)
    factors = [n / t for n, t in zip(vol.shape, target_shape)]
    sigmas = [f / 2.0 if f > 1.0 else 0.0 for f in factors]
    if any(s > 0 for s in sigmas):
        src = ndimage.gaussian_filter(src, sigma=sigmas, mode="nearest")

    if tuple(target_shape) == vol.shape:
        out = src
    else:
        grids = [
            (np.arange(t, dtype=np.float64) + 0.5) * f - 0.5
            for t, f in zip(target_shape, factors)
        ]
        coords = np.meshgrid(*grids, indexing="ij")
        out = ndimage.map_coordinates(
            src, coords, order=1, mode="nearest"
        ).astype(np.float32)

    new_spacing = tuple(s * f for s, f in zip(vol.spacing, factors))
    # voxel centers shift so the physical bounding box stays fixed
    new_origin = tuple(
        o - s / 2.0 + ns / 2.0 for o, s, ns in zip(vol.origin, vol.spacing, new_spacing)
    )
    return vol.with_voxels(out, spacing=new_spacing, origin=new_origin)


def normalize_for_net(vol: CTVolume | np.ndarray) -> np.ndarray:
    """Map HU to [0, 1]: clamp to [-1024, 1024] then scale affinely."""
    v = vol.voxels if isinstance(vol, CTVolume) else vol
    return ((np.clip(v, NET_CLIP_LO, NET_CLIP_HI) + 1024.0) / 2048.0).astype(np.float32)
