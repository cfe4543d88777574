"""Two-step conformal prediction for object detection.

Step one builds class label sets with per-class conformal thresholds;
step two builds coordinate-wise box intervals from class-conditional
quantiles, corrected for the four coordinates jointly.
"""

from .box_intervals import (
    BoxInterval,
    BoxMethod,
    BoxPrediction,
    Sidedness,
    box_scores,
    build_interval,
    build_one_sided_interval,
    cqr_scores,
    ens_scores,
    fuse_ensemble,
    fuse_members,
    interval_bounds,
    std_scores,
)
from .conformal import (
    CoverageDistribution,
    ScoreSet,
    conformal_pvalue,
    conformal_quantile,
    conformal_rank,
    coverage_distribution,
)
from .geometry import Box, SizeStratum, area, iou, iou_matrix, stratum
from .label_sets import (
    ClassThresholdClassifier,
    LabelMethod,
    LabelQuantiles,
    LabelSet,
    calibrate_label_quantiles,
    calibrate_labels,
    expected_calibration_error,
    predict_label_set_classthr,
    predict_label_set_full,
    predict_label_set_naive,
    predict_label_set_top,
    temperature_scale,
)
from .matching import IOU_THRESHOLD, assign_max_iou, match_arrays, match_dataset, match_image
from .metrics import EvaluationReport, empirical_coverage, mean_set_size, mpiw, stratified_report, stretch
from .multiple_testing import (
    bonferroni_alpha,
    bonferroni_quantiles,
    max_rank_quantiles,
    max_rank_threshold,
    max_score_quantile,
)
from .pipeline import (
    CalibrationModel,
    Correction,
    DetectionBatch,
    GroundTruthBatch,
    MiscoverageConfig,
    TwoStepConformalDetector,
    TwoStepPrediction,
    calibrate,
    calibrate_batch,
    predict,
    predict_batch,
    sequential_guarantee,
)
from .records import DetectionRecord, GroundTruthObject, MatchedSample

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
