"""Multi-site lesion segmentation training via cyclic weight transfer.

Sites holding private imaging data train one shared convolutional network
by exchanging only weight checkpoints through a shared store, one epoch per
site in strict rotation, under a common convergence rule.
"""

from .arch import ArchitectureSpec, compact_architecture, reference_architecture
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, builtin_profile, derive_seed, load_config
from .evaluate import EvaluationReport, evaluate_models
from .network import (
    Network,
    TrainReport,
    build_network,
    cdc_loss,
    forward_full,
    predict_volume,
    train_epoch,
)
from .nifti import parse_nifti, write_nifti
from .patches import PatchSet, extract_patches, merge_patch_sets
from .phantom import SitePhantomParams, generate_phantom
from .protocol import (
    ConvergenceMonitor,
    SiteRuntime,
    TrainingParams,
    TurnToken,
    acquire_turn,
    check_convergence,
    init_msl,
    release_turn,
    run_site_worker,
    run_ssl,
)
from .stats import dice, pearson, wilcoxon_signed_rank
from .store import DirectoryStore, ExchangeStore, InMemoryStore
from .volumes import SegmentationMask, VolumeImage, lesion_volume_mm3

__version__ = "0.1.0"
