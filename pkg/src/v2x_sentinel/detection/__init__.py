"""Misbehaviour detectors producing :class:`DetectionReport` records."""

from .can import BaselineModel, CanDetectConfig, CanTimingDetector, can_detect, can_learn_baseline
from .checks import (CrossChecker, Finding, LocalObject, Region, check_consistency, check_plausibility,
                     check_security, cross_check_cpm)
from .cpa import CollisionMonitor, closest_approach, predict_vru_collision
from .deviation import DeviationConfig, DeviationMonitor, check_cam_perception_deviation
from .ekf import (EkfState, GateConfig, NisGate, OnboardFix, VruEkfMonitor, ekf_gate, ekf_predict, ekf_update,
                  nis_threshold)
from .reports import Anomaly, DetectionReport, Detector, Source, Track
from .spat import SpatHistory, check_spat_conflicts

__all__ = [
    "Anomaly", "BaselineModel", "CanDetectConfig", "CanTimingDetector", "CollisionMonitor", "CrossChecker",
    "DetectionReport", "Detector", "DeviationConfig", "DeviationMonitor", "EkfState", "Finding", "GateConfig",
    "LocalObject", "NisGate", "OnboardFix", "Region", "Source", "SpatHistory", "Track", "VruEkfMonitor",
    "can_detect", "can_learn_baseline", "check_cam_perception_deviation", "check_consistency",
    "check_plausibility", "check_security", "check_spat_conflicts", "closest_approach", "cross_check_cpm",
    "ekf_gate", "ekf_predict", "ekf_update", "nis_threshold", "predict_vru_collision",
]
