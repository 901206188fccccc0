"""Experiment configuration: profiles, JSON round trip, seed derivation.

A single master seed fans out to every random decision through a
documented derivation: ``derive_seed(master, *tags)`` hashes the master
seed and a tag path (e.g. ``("phantom", site_id)`` or
``("shuffle", epoch)``), so any subset of the pipeline can be reproduced
independently.

Two built-in profiles ship: ``paper`` (full-scale volumes, 255-pixel
patches, patience 10) and ``ci`` (small volumes, 95-pixel patches,
patience 2) for minutes-scale end-to-end runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .arch import ArchitectureSpec, compact_architecture, reference_architecture
from .errors import ConfigError
from .phantom import SitePhantomParams
from .protocol import TrainingParams

__all__ = [
    "derive_seed",
    "SiteConfig",
    "PatchConfig",
    "ExperimentConfig",
    "load_config",
    "builtin_profile",
]


def derive_seed(master: int, *tags: str) -> int:
    """Deterministic 63-bit child seed for a tag path under a master seed."""
    text = f"{master}" + "".join(f"/{t}" for t in tags)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


@dataclass
class SiteConfig:
    site_id: str
    train_volumes: int
    test_volumes: int
    lesion_volume_median_mm3: float
    lesion_volume_log_sd: float = 0.4
    lesion_count_range: tuple[int, int] = (1, 3)
    tissue_hu_mean: float = 30.0
    tissue_hu_sd: float = 5.0
    lesion_hu_range: tuple[float, float] = (50.0, 90.0)
    noise_hu_sd: float = 3.0

    def phantom_params(
        self, dims, spacing_mm, master_seed: int
    ) -> SitePhantomParams:
        return SitePhantomParams(
            site_id=self.site_id,
            n_volumes=self.train_volumes + self.test_volumes,
            dims=tuple(dims),
            spacing_mm=tuple(spacing_mm),
            lesion_volume_median_mm3=self.lesion_volume_median_mm3,
            lesion_volume_log_sd=self.lesion_volume_log_sd,
            lesion_count_range=tuple(self.lesion_count_range),
            tissue_hu_mean=self.tissue_hu_mean,
            tissue_hu_sd=self.tissue_hu_sd,
            lesion_hu_range=tuple(self.lesion_hu_range),
            noise_hu_sd=self.noise_hu_sd,
            seed=derive_seed(master_seed, "phantom", self.site_id),
        )


@dataclass
class PatchConfig:
    size: int = 255
    per_volume: int = 1000
    lesion_fraction: float = 0.5


@dataclass
class ExperimentConfig:
    profile: str = "ci"
    master_seed: int = 1234
    architecture: str = "compact"  # "compact", "reference", or a spec file path
    dims: tuple[int, int, int] = (96, 96, 10)
    spacing_mm: tuple[float, float, float] = (0.5, 0.5, 5.0)
    sites: list[SiteConfig] = field(default_factory=list)
    patch: PatchConfig = field(default_factory=PatchConfig)
    training: TrainingParams = field(default_factory=TrainingParams)
    threshold: float = 0.5
    poll_interval: float = 0.5
    timeout: float = 600.0

    def validate(self) -> None:
        if not self.sites:
            raise ConfigError("config needs at least one site")
        ids = [s.site_id for s in self.sites]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate site ids: {ids}")
        for s in self.sites:
            if s.train_volumes < 1 or s.test_volumes < 0:
                raise ConfigError(f"site {s.site_id}: bad volume counts")
        if min(self.dims[0], self.dims[1]) < self.patch.size:
            raise ConfigError(
                f"patch size {self.patch.size} does not fit in-plane dims {self.dims[:2]}"
            )
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0,1), got {self.threshold}")

    @property
    def roster(self) -> tuple[str, ...]:
        return tuple(s.site_id for s in self.sites)

    def site(self, site_id: str) -> SiteConfig:
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise ConfigError(f"unknown site {site_id!r} (roster {self.roster})")

    def arch_spec(self) -> ArchitectureSpec:
        if self.architecture == "reference":
            return reference_architecture()
        if self.architecture == "compact":
            return compact_architecture()
        path = Path(self.architecture)
        if path.is_file():
            return ArchitectureSpec.from_text(path.read_text(encoding="utf-8"))
        raise ConfigError(
            f"architecture must be 'reference', 'compact', or a spec file path; "
            f"got {self.architecture!r}"
        )

    def init_seed(self) -> int:
        return derive_seed(self.master_seed, "init")

    def site_train_seed(self, site_id: str) -> int:
        return derive_seed(self.master_seed, "train", site_id)

    def patch_seed(self, site_id: str, case_id: str) -> int:
        return derive_seed(self.master_seed, "patches", site_id, case_id)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            sites = [SiteConfig(**s) for s in raw.pop("sites", [])]
            patch = PatchConfig(**raw.pop("patch", {}))
            training = TrainingParams(**raw.pop("training", {}))
            cfg = cls(sites=sites, patch=patch, training=training, **raw)
        except TypeError as exc:
            raise ConfigError(f"bad config structure: {exc}") from exc
        cfg.dims = tuple(cfg.dims)
        cfg.spacing_mm = tuple(cfg.spacing_mm)
        for s in cfg.sites:
            s.lesion_count_range = tuple(s.lesion_count_range)
            s.lesion_hu_range = tuple(s.lesion_hu_range)
        cfg.validate()
        return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return ExperimentConfig.from_dict(raw)


def builtin_profile(name: str, master_seed: int = 1234) -> ExperimentConfig:
    """The two shipped experiment profiles."""
    if name == "paper":
        cfg = ExperimentConfig(
            profile="paper",
            master_seed=master_seed,
            architecture="reference",
            dims=(256, 256, 20),
            spacing_mm=(0.5, 0.5, 5.0),
            sites=[
                SiteConfig("nih", 17, 10, lesion_volume_median_mm3=13700.0),
                SiteConfig("vumc", 10, 8, lesion_volume_median_mm3=41000.0),
            ],
            patch=PatchConfig(size=255, per_volume=1000),
            training=TrainingParams(
                learning_rate=1e-4, batch_size=8, min_delta=1e-4,
                patience=10, max_epochs=500,
            ),
        )
    elif name == "ci":
        cfg = ExperimentConfig(
            profile="ci",
            master_seed=master_seed,
            architecture="compact",
            dims=(96, 96, 10),
            spacing_mm=(0.5, 0.5, 5.0),
            sites=[
                SiteConfig(
                    "site_a", 2, 3,
                    lesion_volume_median_mm3=500.0,
                    lesion_count_range=(1, 2),
                ),
                SiteConfig(
                    "site_b", 2, 3,
                    lesion_volume_median_mm3=1500.0,
                    lesion_count_range=(1, 2),
                ),
            ],
            patch=PatchConfig(size=95, per_volume=24),
            training=TrainingParams(
                learning_rate=3e-4, batch_size=4, min_delta=1e-4,
                patience=2, max_epochs=60, convergence_mode="per_site",
            ),
            poll_interval=0.01,
            timeout=300.0,
        )
    else:
        raise ConfigError(f"unknown profile {name!r} (available: ci, paper)")
    cfg.validate()
    return cfg
