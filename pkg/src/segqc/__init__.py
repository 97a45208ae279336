"""Segmentation quality control from Monte Carlo dropout samples.

Structure-wise uncertainty metrics (volume CV, pairwise Dice, N-way IoU,
mean entropy), their evaluation against reference labels, Rician noise
injection, a phantom-based sample simulator and uncertainty-weighted group
regression.
"""

from .degradation import NoiseSpec, rician_corrupt
from .group import WeightScheme, group_analysis, wls_fit
from .io import load_svol, read_cohort_csv, read_svol, save_svol, write_cohort_csv, write_svol
from .phantom import PhantomSpec, SamplerSpec, cohort_generate, make_phantom, mc_segment
from .quality import QualityClass, classify, iou_proxy_mae, pearson, proxy_accuracy
from .uncertainty import (
    StructureMetrics,
    cv_volume,
    entropy_stability,
    global_entropy,
    mc_iou,
    mean_structure_entropy,
    pairwise_dice,
    structure_metrics,
    voxel_entropy,
)
from .volume import IntensityVolume, LabelVolume, McSampleSet, ProbStack, aggregate_mean_argmax, dice

__version__ = "0.1.0"

__all__ = [
    "IntensityVolume",
    "LabelVolume",
    "McSampleSet",
    "NoiseSpec",
    "PhantomSpec",
    "ProbStack",
    "QualityClass",
    "SamplerSpec",
    "StructureMetrics",
    "WeightScheme",
    "aggregate_mean_argmax",
    "classify",
    "cohort_generate",
    "cv_volume",
    "dice",
    "entropy_stability",
    "global_entropy",
    "group_analysis",
    "iou_proxy_mae",
    "load_svol",
    "make_phantom",
    "mc_iou",
    "mc_segment",
    "mean_structure_entropy",
    "pairwise_dice",
    "pearson",
    "proxy_accuracy",
    "read_cohort_csv",
    "read_svol",
    "rician_corrupt",
    "save_svol",
    "structure_metrics",
    "voxel_entropy",
    "wls_fit",
    "write_cohort_csv",
    "write_svol",
]
