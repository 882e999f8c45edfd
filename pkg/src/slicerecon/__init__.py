"""Next-slice reconstruction of volumetric scans and reconstruction-error anomaly scoring."""

from .data import (
    DatasetManifest,
    ManifestEntry,
    PhantomSpec,
    Volume,
    generate_phantoms,
    load_preprocessed,
    load_volume,
    normalize_volume,
    preprocess,
    save_volume,
    select_slices,
    zero_pad_slice,
)
from .evaluation import EvalReport, auc, evaluate_staged, export_distributions, roc_curve
from .losses import LossConfig, l1_loss, l2_loss, soft_dice_loss, ssim, ssim_loss
from .nets import Checkpoint, CriticConfig, GeneratorConfig, build_critic, build_generator
from .scoring import ScoreRecord, ScoreSelection, score_reconstruction, score_scan, select_score
from .trainer import TrainConfig, reconstruct_volume, train
from .windowing import WindowPair, make_window_pairs, stack_channels

__version__ = "0.1.0"
