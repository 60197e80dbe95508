from .februus import FebruusPurifier, diffusion_inpaint, februus_style_purify, grad_cam, repair_success_rate
from .neural_cleanse import (
    DetectionVerdict,
    ExtendedNeuralCleanse,
    ReversedTrigger,
    anomaly_indices,
    extended_neural_cleanse,
    pair_anomaly_scores,
)
from .scan import ScanStyleDetector, mixture_gain, scan_style_detect

__all__ = [
    "DetectionVerdict",
    "ExtendedNeuralCleanse",
    "FebruusPurifier",
    "ReversedTrigger",
    "ScanStyleDetector",
    "anomaly_indices",
    "diffusion_inpaint",
    "extended_neural_cleanse",
    "februus_style_purify",
    "grad_cam",
    "mixture_gain",
    "pair_anomaly_scores",
    "repair_success_rate",
    "scan_style_detect",
]
