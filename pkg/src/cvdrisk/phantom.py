"""Synthetic thorax phantoms with known geometry, labels, and survival times.

A phantom is a coarse chest: an elliptical soft-tissue thorax holding two
low-density lungs and a heart ellipsoid wrapped in a fat shell. Positives
carry calcified blobs placed along an arc on the heart surface. Everything
needed to verify the pipeline is recorded analytically: the cardiac bounding
box, per-slice boxes, calcified voxel coordinates, tissue volumes, the label,
and a survival draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidParams, InvalidSpec
from .volume import HU_MAX, HU_MIN, BoundingBox3D, CTVolume

AIR_HU = -1000.0
LUNG_HU = -800.0
SOFT_TISSUE_HU = 40.0
FAT_HU = -100.0


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 80, 80)            # (nz, ny, nx)
    spacing: tuple[float, float, float] = (2.5, 2.0, 2.0)  # mm
    thorax_semi_mm: tuple[float, float, float] = (76.0, 62.0, 70.0)
    heart_center_mm: tuple[float, float, float] = (0.0, 4.0, -6.0)  # offset from volume center
    heart_semi_mm: tuple[float, float, float] = (34.0, 27.0, 30.0)
    fat_shell_mm: float = 5.0
    n_calc_blobs: int = 0
    calc_radius_mm: tuple[float, float] = (2.5, 4.0)
    calc_hu_range: tuple[float, float] = (200.0, 800.0)
    noise_sigma_hu: float = 20.0
    calc_label_threshold_mm3: float = 50.0
    fat_label_threshold_mm3: float = 1e9

    def validate(self):
        if any(n < 8 for n in self.shape):
            raise InvalidSpec(f"shape too small: {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise InvalidSpec(f"spacing must be positive: {self.spacing}")
        half = [n * s / 2.0 for n, s in zip(self.shape, self.spacing)]
        if any(t > h for t, h in zip(self.thorax_semi_mm, half)):
            raise InvalidSpec("thorax ellipsoid exceeds the volume")
        heart_outer = [abs(c) + a + self.fat_shell_mm
                       for c, a in zip(self.heart_center_mm, self.heart_semi_mm)]
        if any(o > t for o, t in zip(heart_outer, self.thorax_semi_mm)):
            raise InvalidSpec("heart plus fat shell exceeds the thorax")
        if self.n_calc_blobs < 0:
            raise InvalidSpec("n_calc_blobs must be >= 0")
        if self.noise_sigma_hu < 0:
            raise InvalidSpec("noise sigma must be >= 0")


@dataclass(frozen=True)
class SurvivalDraw:
    time_days: int
    event: bool


@dataclass(frozen=True)
class PhantomTruth:
    heart_box: BoundingBox3D                 # cardiac region incl. fat shell
    slice_boxes: dict[int, tuple[int, int, int, int]]  # z -> (x0, y0, x1, y1)
    calc_volume_mm3: float
    fat_volume_mm3: float
    calc_voxels: np.ndarray                  # (k, 3) array of (z, y, x) indices
    label: int
    survival: SurvivalDraw | None = None


def _ellipsoid_mask(shape, spacing, center_mm, semi_mm):
    """Boolean mask of voxel centers inside the ellipsoid (mm, volume-center origin)."""
    zz, yy, xx = [
        (np.arange(n) - (n - 1) / 2.0) * s
        for n, s in zip(shape, spacing)
    ]
    dz = (zz - center_mm[0]) / semi_mm[0]
    dy = (yy - center_mm[1]) / semi_mm[1]
    dx = (xx - center_mm[2]) / semi_mm[2]
    return (dz[:, None, None] ** 2 + dy[None, :, None] ** 2
            + dx[None, None, :] ** 2) <= 1.0


def _analytic_boxes(spec: PhantomSpec):
    """Voxel-space cardiac box and per-slice boxes from the ellipse geometry."""
    outer = tuple(a + spec.fat_shell_mm for a in spec.heart_semi_mm)
    center_vox = []
    for n, s, c in zip(spec.shape, spec.spacing, spec.heart_center_mm):
        center_vox.append((n - 1) / 2.0 + c / s)
    cz, cy, cx = center_vox
    az = outer[0] / spec.spacing[0]
    ay = outer[1] / spec.spacing[1]
    ax = outer[2] / spec.spacing[2]
    box = BoundingBox3D(
        x_min=int(math.ceil(cx - ax)), y_min=int(math.ceil(cy - ay)),
        z_min=int(math.ceil(cz - az)),
        x_max=int(math.floor(cx + ax)), y_max=int(math.floor(cy + ay)),
        z_max=int(math.floor(cz + az)),
    )
    slice_boxes = {}
    for z in range(spec.shape[0]):
        t = (z - cz) / az
        if abs(t) >= 1.0:
            continue
        scale = math.sqrt(1.0 - t * t)
        hy, hx = ay * scale, ax * scale
        x0, x1 = int(math.ceil(cx - hx)), int(math.floor(cx + hx))
        y0, y1 = int(math.ceil(cy - hy)), int(math.floor(cy + hy))
        if x1 - x0 >= 2 and y1 - y0 >= 2:
            slice_boxes[z] = (x0, y0, x1, y1)
    return box, slice_boxes


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator,
                     subject_id: str = "phantom") -> tuple[CTVolume, PhantomTruth]:
    """Render one phantom volume and its analytic ground truth."""
    spec.validate()
    shape, spacing = spec.shape, spec.spacing
    voxel_mm3 = spacing[0] * spacing[1] * spacing[2]

    hu = np.full(shape, AIR_HU, dtype=np.float32)
    thorax = _ellipsoid_mask(shape, spacing, (0.0, 0.0, 0.0), spec.thorax_semi_mm)
    hu[thorax] = SOFT_TISSUE_HU

    # two lungs flanking the heart
    lung_semi = (spec.thorax_semi_mm[0] * 0.82, spec.thorax_semi_mm[1] * 0.62,
                 spec.thorax_semi_mm[2] * 0.34)
    lung_dx = spec.thorax_semi_mm[2] * 0.52
    for side in (-1.0, 1.0):
        lung = _ellipsoid_mask(shape, spacing, (0.0, 0.0, side * lung_dx), lung_semi)
        hu[lung & thorax] = LUNG_HU

    heart = _ellipsoid_mask(shape, spacing, spec.heart_center_mm, spec.heart_semi_mm)
    fat_mask = np.zeros(shape, dtype=bool)
    if spec.fat_shell_mm > 0:
        outer_semi = tuple(a + spec.fat_shell_mm for a in spec.heart_semi_mm)
        outer = _ellipsoid_mask(shape, spacing, spec.heart_center_mm, outer_semi)
        fat_mask = outer & ~heart
        hu[fat_mask] = FAT_HU
    hu[heart] = SOFT_TISSUE_HU

    # calcified blobs along an arc on the heart surface
    calc_mask = np.zeros(shape, dtype=bool)
    if spec.n_calc_blobs > 0:
        angles = rng.uniform(0.0, math.pi, size=spec.n_calc_blobs)
        elev = rng.uniform(0.1, 0.5, size=spec.n_calc_blobs)
        radii = rng.uniform(*spec.calc_radius_mm, size=spec.n_calc_blobs)
        values = rng.uniform(*spec.calc_hu_range, size=spec.n_calc_blobs)
        az, ay, ax = spec.heart_semi_mm
        for theta, e, r, v in zip(angles, elev, radii, values):
            # point just inside the heart surface
            cz = spec.heart_center_mm[0] + 0.88 * az * e
            cy = spec.heart_center_mm[1] + 0.88 * ay * math.sqrt(1 - e * e) * math.sin(theta)
            cx = spec.heart_center_mm[2] + 0.88 * ax * math.sqrt(1 - e * e) * math.cos(theta)
            blob = _ellipsoid_mask(shape, spacing, (cz, cy, cx), (r, r, r))
            calc_mask |= blob
            hu[blob] = v

    if spec.noise_sigma_hu > 0:
        hu = hu + rng.normal(0.0, spec.noise_sigma_hu, size=shape).astype(np.float32)
    hu = np.clip(hu, HU_MIN, HU_MAX).astype(np.float32)

    calc_volume = float(calc_mask.sum()) * voxel_mm3
    fat_volume = float(fat_mask.sum()) * voxel_mm3
    label = int(calc_volume > spec.calc_label_threshold_mm3
                or fat_volume > spec.fat_label_threshold_mm3)
    box, slice_boxes = _analytic_boxes(spec)
    truth = PhantomTruth(
        heart_box=box,
        slice_boxes=slice_boxes,
        calc_volume_mm3=calc_volume,
        fat_volume_mm3=fat_volume,
        calc_voxels=np.argwhere(calc_mask),
        label=label,
    )
    vol = CTVolume(hu, spacing=spacing, subject_id=subject_id, exam_id="e0")
    return vol, truth


# --- cohorts ----------------------------------------------------------------

CENSOR_HORIZON_DAYS = 2000
BASE_HAZARD_PER_DAY = 1.25e-4   # negatives; positives get 4x this
HAZARD_RATIO = 4.0


def _draw_survival(label: int, rng: np.random.Generator) -> SurvivalDraw:
    hazard = BASE_HAZARD_PER_DAY * (HAZARD_RATIO if label else 1.0)
    t = rng.exponential(1.0 / hazard)
    if t >= CENSOR_HORIZON_DAYS:
        return SurvivalDraw(CENSOR_HORIZON_DAYS, False)
    return SurvivalDraw(max(1, int(round(t))), True)


def _positive_spec(base: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    return replace(base, n_calc_blobs=int(rng.integers(4, 9)),
                   fat_shell_mm=float(rng.uniform(4.0, 7.0)))


def _negative_spec(base: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    return replace(base, n_calc_blobs=0,
                   fat_shell_mm=float(rng.uniform(4.0, 7.0)))


def iter_cohort(n: int, pos_rate: float, seed: int,
                base_spec: PhantomSpec | None = None):
    """Yield (CTVolume, PhantomTruth) pairs one at a time (memory-friendly)."""
    if n < 2:
        raise InvalidParams(f"need n >= 2, got {n}")
    if not 0.0 < pos_rate < 1.0:
        raise InvalidParams(f"pos_rate must be in (0, 1), got {pos_rate}")
    base = base_spec or PhantomSpec()
    n_pos = int(round(n * pos_rate))
    seq = np.random.SeedSequence(seed)
    order_rng = np.random.default_rng(seq.spawn(1)[0])
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    order_rng.shuffle(labels)
    child_seeds = seq.spawn(n)
    for i, (lab, child) in enumerate(zip(labels, child_seeds)):
        rng = np.random.default_rng(child)
        spec = _positive_spec(base, rng) if lab else _negative_spec(base, rng)
        vol, truth = generate_phantom(spec, rng, subject_id=f"ph{i:04d}")
        truth = replace(truth, survival=_draw_survival(int(lab), rng))
        if truth.label != lab:
            raise InvalidSpec("generated phantom violates its label rule")
        yield vol, truth


def generate_cohort(n: int, pos_rate: float, seed: int,
                    base_spec: PhantomSpec | None = None
                    ) -> list[tuple[CTVolume, PhantomTruth]]:
    """Materialized cohort; class counts are round(n * pos_rate) positives."""
    return list(iter_cohort(n, pos_rate, seed, base_spec))
