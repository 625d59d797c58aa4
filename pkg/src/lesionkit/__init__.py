"""Small-lesion segmentation toolkit.

Inverse-volume weighted losses, tumor-centred patch sampling, lesion-wise
precision-recall evaluation, multi-rater contour comparison and synthetic
phantoms, plus a minimal per-voxel classifier to train end to end.
"""

__version__ = "0.1.0"

from .exceptions import (
    DataError,
    DegenerateInputError,
    FormatError,
    GenerationError,
    TruncationError,
    ValidationError,
)
from .imbalance import LossReport, WeightGrid, bce, build_weight_grid, component_weights, compute_loss, dice_loss, iwbce
from .labeling import LabelMap, binarize, label_components
from .lesion_metrics import (
    LesionPRC,
    MatchTable,
    bootstrap_prc,
    extract_predicted_lesions,
    lesion_dice,
    lesion_prc,
    match_case,
    match_lesions,
    volumetric_dice,
)
from .phantom import (
    Lesion,
    PhantomParams,
    PredictorModel,
    RaterModel,
    StudyParams,
    gen_case,
    simulate_predictor,
    simulate_rater,
    simulate_study,
)
from .rater_protocol import CaseStudy, RaterRecord, compare_settings, consensus, sign_test, timing_summary
from .sampler import Patch, PatchSpec, TrainingCase, sample_batch, sample_patch
from .trainer import (
    TrainConfig,
    VoxelClassifier,
    VoxelFeatures,
    VoxelModel,
    evaluate,
    evaluate_probabilities,
    extract_features,
    train,
)
from .volgrid import (
    CaseEntry,
    DatasetManifest,
    Mask,
    ProbabilityMap,
    VoxelGrid,
    read_volume,
    write_volume,
)

__all__ = [name for name in dir() if not name.startswith("_")]
