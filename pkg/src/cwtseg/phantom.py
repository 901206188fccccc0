"""Synthetic multi-site CT-like phantoms with ground-truth lesion masks.

Each phantom is a skull-stripped head: an ellipsoidal brain of soft-tissue
density on an air background, carrying one or more blobby hyperdense
lesions (unions of overlapping random ellipsoids).  Lesion load per volume
is drawn from a site-specific log-normal, which is how inter-site
distribution shift is injected.  Generation is bit-deterministic given
(site seed, volume index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, GenerationError
from .volumes import SegmentationMask, VolumeImage

__all__ = ["SitePhantomParams", "generate_phantom"]

BACKGROUND_HU = -1000.0


@dataclass(frozen=True)
class SitePhantomParams:
    site_id: str
    n_volumes: int
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    lesion_volume_median_mm3: float
    lesion_volume_log_sd: float
    lesion_count_range: tuple[int, int] = (1, 3)
    tissue_hu_mean: float = 30.0
    tissue_hu_sd: float = 5.0
    lesion_hu_range: tuple[float, float] = (50.0, 90.0)
    noise_hu_sd: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_volumes < 1:
            raise ContractViolation("n_volumes must be >= 1")
        if any(d < 4 for d in self.dims):
            raise ContractViolation(f"dims too small: {self.dims}")
        if any(s <= 0 for s in self.spacing_mm):
            raise ContractViolation(f"spacing must be positive: {self.spacing_mm}")
        if self.lesion_volume_median_mm3 <= 0 or self.lesion_volume_log_sd <= 0:
            raise ContractViolation("lesion volume distribution scales must be positive")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ContractViolation(f"bad lesion count range {self.lesion_count_range}")
        lo_hu, hi_hu = self.lesion_hu_range
        if not (0.0 < lo_hu < hi_hu <= 300.0):
            raise ContractViolation(
                f"lesion HU range {self.lesion_hu_range} outside plausible blood density"
            )
        if self.tissue_hu_sd < 0 or self.noise_hu_sd < 0:
            raise ContractViolation("HU spreads must be non-negative")


def _mm_coordinates(dims, spacing):
    return [
        (np.arange(n, dtype=np.float64) + 0.5) * s for n, s in zip(dims, spacing)
    ]


def _ellipsoid_union_mask(coords, centers, semi_axes, scale):
    """Boolean union of ellipsoids evaluated over an open coordinate grid."""
    xs, ys, zs = coords
    mask = np.zeros((len(xs), len(ys), len(zs)), dtype=bool)
    for c, ax in zip(centers, semi_axes):
        dx = ((xs - c[0]) / (scale * ax[0])) ** 2
        dy = ((ys - c[1]) / (scale * ax[1])) ** 2
        dz = ((zs - c[2]) / (scale * ax[2])) ** 2
        mask |= dx[:, None, None] + dy[None, :, None] + dz[None, None, :] <= 1.0
    return mask


def _lesion_box(coords, centers, semi_axes, scale):
    """Bounding-box slices covering the ellipsoid union at ``scale``."""
    reach = scale * max(float(np.max(ax)) for ax in semi_axes)
    slices = []
    for axis, axis_coords in enumerate(coords):
        lo_mm = min(c[axis] for c in centers) - reach
        hi_mm = max(c[axis] for c in centers) + reach
        i0, i1 = np.searchsorted(axis_coords, [lo_mm, hi_mm])
        slices.append(slice(max(0, i0 - 1), min(len(axis_coords), i1 + 1)))
    return tuple(slices)


def _rasterize_lesion(coords, brain, voxel_mm3, target_mm3, centers, semi_axes):
    """Scale the ellipsoid union so its brain-clipped volume hits the target."""
    # Grow the trial upper bound only as needed; the bounding box (and the
    # per-iteration rasterization cost) scales with it.
    for hi in (1.8, 2.7, 4.0, 6.0):
        box = _lesion_box(coords, centers, semi_axes, hi)
        box_coords = [axis_coords[s] for axis_coords, s in zip(coords, box)]
        box_brain = brain[box]
        if _clipped_volume(box_coords, box_brain, voxel_mm3, centers, semi_axes, hi) >= target_mm3:
            break
    else:
        raise GenerationError(
            f"lesion target volume {target_mm3:.0f} mm^3 exceeds brain region capacity"
        )
    lo = 0.25
    for _ in range(16):
        mid = 0.5 * (lo + hi)
        vol = _clipped_volume(box_coords, box_brain, voxel_mm3, centers, semi_axes, mid)
        if vol < target_mm3:
            lo = mid
        else:
            hi = mid
            if vol < 1.02 * target_mm3:
                break
    mask = np.zeros(brain.shape, dtype=bool)
    mask[box] = _ellipsoid_union_mask(box_coords, centers, semi_axes, hi) & box_brain
    return mask


def _clipped_volume(coords, brain, voxel_mm3, centers, semi_axes, scale):
    m = _ellipsoid_union_mask(coords, centers, semi_axes, scale)
    return np.count_nonzero(m & brain) * voxel_mm3


def generate_phantom(
    params: SitePhantomParams, volume_index: int
) -> tuple[VolumeImage, SegmentationMask]:
    """Deterministic phantom volume and truth mask for (params.seed, index)."""
    params.validate()
    rng = np.random.default_rng([params.seed & 0x7FFFFFFF, volume_index])
    nx, ny, nz = params.dims
    sx, sy, sz = params.spacing_mm
    voxel_mm3 = sx * sy * sz
    coords = _mm_coordinates(params.dims, params.spacing_mm)
    center_mm = np.array([nx * sx / 2.0, ny * sy / 2.0, nz * sz / 2.0])

    # Brain: one ellipsoid nearly filling the field of view.
    brain_axes = np.array(
        [
            nx * sx / 2.0 * rng.uniform(0.80, 0.92),
            ny * sy / 2.0 * rng.uniform(0.80, 0.92),
            nz * sz / 2.0 * rng.uniform(0.85, 0.97),
        ]
    )
    brain = _ellipsoid_union_mask(coords, [center_mm], [brain_axes], 1.0)
    brain_mm3 = np.count_nonzero(brain) * voxel_mm3

    volume = np.full(params.dims, BACKGROUND_HU, dtype=np.float64)
    volume[brain] = rng.normal(
        params.tissue_hu_mean, params.tissue_hu_sd, np.count_nonzero(brain)
    )

    mask = np.zeros(params.dims, dtype=bool)
    lo, hi = params.lesion_count_range
    n_lesions = int(rng.integers(lo, hi + 1))
    if n_lesions > 0:
        total_target = params.lesion_volume_median_mm3 * float(
            np.exp(params.lesion_volume_log_sd * rng.standard_normal())
        )
        if total_target > 0.5 * brain_mm3:
            raise GenerationError(
                f"total lesion target {total_target:.0f} mm^3 exceeds half the "
                f"brain region ({brain_mm3:.0f} mm^3)"
            )
        shares = rng.uniform(0.5, 1.5, n_lesions)
        shares /= shares.sum()
        for share in shares:
            target = total_target * share
            r0 = (3.0 * target / (4.0 * np.pi)) ** (1.0 / 3.0)
            # Center well inside the brain so clipping stays mild.
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            radial = rng.uniform(0.0, 0.55)
            lesion_center = center_mm + direction * radial * brain_axes
            n_sub = int(rng.integers(2, 5))
            centers = [
                lesion_center + rng.normal(0.0, 0.35 * r0, 3) for _ in range(n_sub)
            ]
            semi_axes = [r0 * rng.uniform(0.55, 0.95, 3) for _ in range(n_sub)]
            # Calibrate against still-unlesioned brain so overlapping lesions
            # do not undershoot the per-volume total.
            mask |= _rasterize_lesion(
                coords, brain & ~mask, voxel_mm3, target, centers, semi_axes
            )

    n_lesion_vox = np.count_nonzero(mask)
    if n_lesion_vox:
        volume[mask] = rng.uniform(*params.lesion_hu_range, n_lesion_vox)
    if params.noise_hu_sd > 0:
        volume[brain] += rng.normal(0.0, params.noise_hu_sd, np.count_nonzero(brain))

    return (
        VolumeImage(volume.astype(np.float32), params.spacing_mm),
        SegmentationMask(mask.astype(np.uint8), params.spacing_mm),
    )
