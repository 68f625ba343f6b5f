"""Joint segmentation-registration training with soft pseudo-mask fusion."""

__version__ = "0.1.0"

from .datasets import (DataConfig, DatasetSplit, Sample, derive_rng,
                       generate_synthetic, load_dataset, load_split, make_split,
                       preprocess, save_dataset)
from .errors import ContractViolation
from .losses import (LambdaSchedule, gncc, registration_objective,
                     smoothness_penalty, soft_dice_loss)
from .metrics import (MetricRow, MetricsReport, dsc, evaluate, hausdorff,
                      wilcoxon_signed_rank)
from .models import (RegModel, SegModel, build_reg_model, build_seg_model,
                     load_checkpoint, reg_forward, save_checkpoint, seg_forward)
from .panels import render_iteration_panel
from .pseudo_masks import (MaskSource, SoftPseudoMask, combined_inference, fuse,
                           generate_pseudo_mask, generate_pseudo_mask_detailed,
                           load_soft_mask, reg_masks, save_soft_mask,
                           select_sources, tta_seg_masks)
from .trainer import (ExperimentConfig, TrainState, audit_split_hygiene,
                      pretrain_registration, pretrain_segmentation,
                      train_joint, train_mean_teacher)
from .warp import (AugmentSpec, apply_augment, compose_fields, invert_augment,
                   sample_augment, upsample_field, warp)

__all__ = [
    "AugmentSpec", "ContractViolation", "DataConfig", "DatasetSplit",
    "ExperimentConfig", "LambdaSchedule", "MaskSource", "MetricRow",
    "MetricsReport", "RegModel", "Sample", "SegModel", "SoftPseudoMask",
    "TrainState", "__version__", "apply_augment", "audit_split_hygiene",
    "build_reg_model", "build_seg_model", "combined_inference",
    "compose_fields", "derive_rng", "dsc", "evaluate", "fuse",
    "generate_pseudo_mask", "generate_pseudo_mask_detailed",
    "generate_synthetic", "gncc", "hausdorff", "invert_augment",
    "load_checkpoint", "load_dataset", "load_soft_mask", "load_split",
    "make_split", "preprocess", "pretrain_registration",
    "pretrain_segmentation", "reg_forward", "reg_masks",
    "registration_objective", "render_iteration_panel", "sample_augment",
    "save_checkpoint", "save_dataset", "save_soft_mask", "seg_forward",
    "select_sources", "smoothness_penalty", "soft_dice_loss", "train_joint",
    "train_mean_teacher", "tta_seg_masks", "upsample_field", "warp",
]
