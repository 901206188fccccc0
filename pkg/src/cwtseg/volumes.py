"""Volume containers: scalar fields in Hounsfield units and binary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

__all__ = ["VolumeImage", "SegmentationMask", "lesion_volume_mm3"]


def _check_geometry(voxels: np.ndarray, spacing_mm: tuple[float, float, float]) -> None:
    if voxels.ndim != 3:
        raise ContractViolation(f"volume must be 3D, got shape {voxels.shape}")
    if any(e < 1 for e in voxels.shape):
        raise ContractViolation(f"all extents must be >= 1, got {voxels.shape}")
    if len(spacing_mm) != 3 or any(s <= 0 for s in spacing_mm):
        raise ContractViolation(f"spacing must be 3 positive reals, got {spacing_mm}")


@dataclass
class VolumeImage:
    """3D scalar field in Hounsfield units, indexed ``voxels[x, y, z]``.

    Slice order within a flat serialization is x-fastest.
    """

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        _check_geometry(self.voxels, self.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def axial_slice(self, z: int) -> np.ndarray:
        return self.voxels[:, :, z]


@dataclass
class SegmentationMask:
    """Binary lesion mask congruent with its source volume."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        arr = np.asarray(self.voxels)
        if not np.isin(arr, (0, 1)).all():
            raise ContractViolation("mask voxels must all be 0 or 1")
        self.voxels = arr.astype(np.uint8)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        _check_geometry(self.voxels, self.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def matches(self, other: "VolumeImage | SegmentationMask") -> bool:
        return self.dims == other.dims and self.spacing_mm == other.spacing_mm


def lesion_volume_mm3(mask: SegmentationMask) -> float:
    """Total lesion volume: foreground voxel count times voxel volume."""
    sx, sy, sz = mask.spacing_mm
    return float(np.count_nonzero(mask.voxels)) * sx * sy * sz
