"""Class-aware Bhattacharyya knowledge distillation for a grid-proposal detector.

Modules:
    geometry   boxes, IoU, box encoding and NMS
    synthdata  synthetic polyp and multi-class corpora with exact manifests
    augment    geometric and photometric augmentation with box transforms
    detector   anchor grid, region descriptors and linear detection heads
    distill    Bhattacharyya penalty, detection losses and their gradients
    train      SGD loops, frozen teacher, k-fold runs, checkpoints
    evaluate   matching, AP/mAP and the brute-force reference
    experiment end-to-end protocols behind the command-line tool
"""

from .detector import DetectorModel, build_grid, describe, detect
from .distill import KDConfig, bhattacharyya_distance, kd_penalty, total_student_loss
from .evaluate import EvalReport, average_precision, evaluate_model
from .geometry import Box, BoxDelta, decode_box, encode_box, iou, nms
from .train import TrainConfig, freeze, train_student, train_teacher

__version__ = "0.1.0"

__all__ = [
    "Box", "BoxDelta", "DetectorModel", "EvalReport", "KDConfig", "TrainConfig",
    "average_precision", "bhattacharyya_distance", "build_grid", "decode_box", "describe",
    "detect", "encode_box", "evaluate_model", "freeze", "iou", "kd_penalty", "nms",
    "total_student_loss", "train_student", "train_teacher",
]
