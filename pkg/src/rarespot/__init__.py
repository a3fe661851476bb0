"""Small-object aerial detection tooling: feature-pyramid consistency losses,
context-aware hard-sample augmentation, tiling, mining and mAP evaluation."""

__version__ = "0.1.0"

from .tensor import FeatureMap, PyramidSet, channel_softmax, read_tensor, upsample, write_tensor
from .losses import (
    LossReport,
    LossWeights,
    PairingTopology,
    consistency_loss,
    gradcheck,
    loss_cos,
    loss_kl,
    loss_mse,
)
from .annotations import Annotation, BBox, Detection, TileSpec, dataset_stats, read_annotations, tile_image, write_annotations
from .mining import MatchResult, Patch, extract_patches, iou, match
from .context import ContextMap, HSVThresholds, build_context_map
from .poisson import poisson_blend
from .augment import AugmentParams, PlacementPolicy, ThetaRanges, augment_image, sample_placement, transform_patch
from .evaluation import PRCurve, average_precision, evaluate, pr_curve
