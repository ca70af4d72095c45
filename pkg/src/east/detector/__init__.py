from .ap import DEFAULT_THRESHOLDS, detection_ap, interpolated_ap, nms, tiou
from .losses import detector_loss, diou_loss_1d, focal_loss
from .model import (Detector, DetectorConfig, FeaturePyramid, Predictions, frame_to_cell, level_extent,
                    max_levels, regression_upper_bounds)
from .targets import RegressionTarget, assign_targets, decode_proposals, sampling_period

__all__ = [name for name in dir() if not name.startswith("_")]
