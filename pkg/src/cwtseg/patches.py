"""2D training patch sampling with a held-out validation split.

Patch centers are drawn uniformly from brain-region voxels (anything above
an air threshold), with rejection resampling so a configurable fraction of
patches contains at least one lesion voxel.  Raw HU values are kept as-is;
no intensity normalization is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .volumes import SegmentationMask, VolumeImage

__all__ = ["PatchSet", "extract_patches", "merge_patch_sets"]

BRAIN_THRESHOLD_HU = -500.0
MAX_REJECTION_ATTEMPTS = 200

Patch = tuple[np.ndarray, np.ndarray]  # image [1,s,s] float32, mask [1,s,s] uint8


@dataclass
class PatchSet:
    size: int
    training: list[Patch]
    validation: list[Patch]
    source_id: str
    seed: int = 0

    def __len__(self) -> int:
        return len(self.training) + len(self.validation)


def extract_patches(
    volume: VolumeImage,
    mask: SegmentationMask,
    n: int = 1000,
    size: int = 255,
    seed: int = 0,
    lesion_fraction: float = 0.5,
    source_id: str = "",
) -> PatchSet:
    """Sample ``n`` square patches from axial slices; last 20% become validation."""
    if not mask.matches(volume):
        raise ContractViolation("mask geometry does not match volume")
    nx, ny, _ = volume.dims
    if size < 1 or size % 2 == 0:
        raise ContractViolation(f"patch size must be odd and >= 1, got {size}")
    if nx < size or ny < size:
        raise ContractViolation(
            f"in-plane dims {(nx, ny)} smaller than patch size {size}"
        )
    if n < 1:
        raise ContractViolation(f"patch count must be >= 1, got {n}")
    if not 0.0 <= lesion_fraction <= 1.0:
        raise ContractViolation(f"lesion_fraction must lie in [0,1], got {lesion_fraction}")

    rng = np.random.default_rng(seed)
    brain_vox = np.argwhere(volume.voxels > BRAIN_THRESHOLD_HU)
    if len(brain_vox) == 0:
        brain_vox = np.argwhere(np.ones(volume.dims, dtype=bool))
    has_lesion = bool(mask.voxels.any())
    half = size // 2

    def crop(center) -> Patch:
        cx = int(np.clip(center[0], half, nx - half - 1))
        cy = int(np.clip(center[1], half, ny - half - 1))
        z = int(center[2])
        img = volume.voxels[cx - half : cx + half + 1, cy - half : cy + half + 1, z]
        msk = mask.voxels[cx - half : cx + half + 1, cy - half : cy + half + 1, z]
        return img[None].astype(np.float32), msk[None].astype(np.uint8)

    patches: list[Patch] = []
    for _ in range(n):
        want_lesion = has_lesion and rng.random() < lesion_fraction
        patch = crop(brain_vox[rng.integers(len(brain_vox))])
        if want_lesion:
            for _ in range(MAX_REJECTION_ATTEMPTS):
                if patch[1].any():
                    break
                patch = crop(brain_vox[rng.integers(len(brain_vox))])
        patches.append(patch)

    n_val = n // 5
    split = n - n_val
    return PatchSet(
        size=size,
        training=patches[:split],
        validation=patches[split:],
        source_id=source_id,
        seed=seed,
    )


def merge_patch_sets(sets: list[PatchSet], source_id: str = "merged") -> PatchSet:
    """Concatenate per-volume patch sets into one site-level set."""
    if not sets:
        raise ContractViolation("cannot merge an empty list of patch sets")
    size = sets[0].size
    if any(s.size != size for s in sets):
        raise ContractViolation("patch sets have mixed patch sizes")
    return PatchSet(
        size=size,
        training=[p for s in sets for p in s.training],
        validation=[p for s in sets for p in s.validation],
        source_id=source_id,
        seed=sets[0].seed,
    )
