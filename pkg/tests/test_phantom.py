"""Phantom generator: determinism, construction guarantees, site shift."""

import numpy as np
import pytest

from cwtseg.errors import GenerationError
from cwtseg.phantom import BACKGROUND_HU, SitePhantomParams, generate_phantom
from cwtseg.stats import wilcoxon_signed_rank
from cwtseg.volumes import lesion_volume_mm3

CI_DIMS = (96, 96, 10)
SPACING = (0.5, 0.5, 5.0)


def ci_params(**kw):
    base = dict(
        site_id="t", n_volumes=4, dims=CI_DIMS, spacing_mm=SPACING,
        lesion_volume_median_mm3=500.0, lesion_volume_log_sd=0.4,
        lesion_count_range=(1, 2), seed=11,
    )
    base.update(kw)
    return SitePhantomParams(**base)


def test_generation_is_bit_deterministic():
    a_vol, a_mask = generate_phantom(ci_params(), 2)
    b_vol, b_mask = generate_phantom(ci_params(), 2)
    assert a_vol.voxels.tobytes() == b_vol.voxels.tobytes()
    assert a_mask.voxels.tobytes() == b_mask.voxels.tobytes()


def test_different_indices_differ():
    a, _ = generate_phantom(ci_params(), 0)
    b, _ = generate_phantom(ci_params(), 1)
    assert a.voxels.tobytes() != b.voxels.tobytes()


def test_zero_lesions_gives_empty_mask():
    _, mask = generate_phantom(ci_params(lesion_count_range=(0, 0)), 0)
    assert not mask.voxels.any()


def test_lesion_voxels_in_configured_hu_range_before_noise():
    params = ci_params(noise_hu_sd=0.0, lesion_hu_range=(50.0, 90.0))
    vol, mask = generate_phantom(params, 1)
    lesion_values = vol.voxels[mask.voxels.astype(bool)]
    assert lesion_values.size > 0
    assert lesion_values.min() >= 50.0 and lesion_values.max() <= 90.0


def test_background_is_air():
    vol, mask = generate_phantom(ci_params(), 0)
    corner = vol.voxels[0, 0, 0]
    assert corner == pytest.approx(BACKGROUND_HU)


def test_mask_lies_inside_brain():
    vol, mask = generate_phantom(ci_params(noise_hu_sd=0.0), 3)
    assert vol.voxels[mask.voxels.astype(bool)].min() > BACKGROUND_HU + 500


def test_capacity_error_for_oversized_lesion():
    # CI-scale brain holds ~35,000 mm^3; ask for far more.
    params = ci_params(lesion_volume_median_mm3=200_000.0, lesion_volume_log_sd=0.01)
    with pytest.raises(GenerationError):
        generate_phantom(params, 0)


def test_paper_scale_median_within_quarter():
    """50 volumes at the 41,000 mm^3 config land within +/-25% of target."""
    params = SitePhantomParams(
        "vumc", 50, (256, 256, 20), SPACING, 41000.0, 0.4, (1, 3), seed=9
    )
    totals = [lesion_volume_mm3(generate_phantom(params, i)[1]) for i in range(50)]
    median = float(np.median(totals))
    assert 41000.0 * 0.75 <= median <= 41000.0 * 1.25


def test_site_shift_detectable_by_rank_test():
    """3x median shift separates the sites' lesion-volume distributions."""
    small = ci_params(site_id="small", lesion_volume_median_mm3=500.0, seed=21)
    large = ci_params(site_id="large", lesion_volume_median_mm3=1500.0, seed=22)
    vols_small = [lesion_volume_mm3(generate_phantom(small, i)[1]) for i in range(50)]
    vols_large = [lesion_volume_mm3(generate_phantom(large, i)[1]) for i in range(50)]
    pairs = [
        (f"c{i}", s, l) for i, (s, l) in enumerate(zip(vols_small, vols_large))
    ]
    stat, p = wilcoxon_signed_rank(pairs)
    assert stat < 0  # the small site is consistently smaller
    assert p < 0.01


def test_validation_rejects_bad_params():
    with pytest.raises(Exception):
        ci_params(lesion_hu_range=(90.0, 50.0)).validate()
    with pytest.raises(Exception):
        ci_params(lesion_volume_median_mm3=-5.0).validate()
