"""Bidirectional recurrent propagation for moving small-target detection in infrared video."""
from .config import RunConfig
from .detection import Detection
from .evaluation import MetricReport, average_precision, benchmark, evaluate, match_detections, prf1
from .model import BIRDDetector
from .propagation import BIRD, ModelConfig
from .synthdata import SceneSpec, generate_sequence, make_sequences, read_dataset, write_dataset
from .training import train

__all__ = [
    "BIRD",
    "BIRDDetector",
    "Detection",
    "MetricReport",
    "ModelConfig",
    "RunConfig",
    "SceneSpec",
    "average_precision",
    "benchmark",
    "evaluate",
    "generate_sequence",
    "make_sequences",
    "match_detections",
    "prf1",
    "read_dataset",
    "train",
    "write_dataset",
]
