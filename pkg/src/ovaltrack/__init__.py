"""Detection, segmentation and tracking of crowded oval-shaped objects."""

__version__ = "0.1.0"

from .assign import AssignParams, Tracklet, link_tracklets, solve_lap, track_frames
from .detector import Detection, DetectorConfig, detect_iterative, fit_value, scan
from .dog import DogKernel, DogParams, build_kernel, eval_dog, solve_variances
from .features import FeatureVector, Observation, pair_features
from .forest import Forest, TrainingSample, train, votes
from .metrics import MotReport, clear_mot, voc_score
from .raster import GrayImage, Patch, extract_patch, load_sequence
from .segmenter import EvolveParams, LevelSet, SegmentMask, energy, evolve, init_levelset, reinitialize
from .synth import GroundTruth, SceneConfig, generate

__all__ = [
    "AssignParams", "Detection", "DetectorConfig", "DogKernel", "DogParams",
    "EvolveParams", "FeatureVector", "Forest", "GrayImage", "GroundTruth",
    "LevelSet", "MotReport", "Observation", "Patch", "SceneConfig",
    "SegmentMask", "Tracklet", "TrainingSample", "build_kernel", "clear_mot",
    "detect_iterative", "energy", "eval_dog", "evolve", "extract_patch",
    "fit_value", "generate", "init_levelset", "link_tracklets",
    "load_sequence", "pair_features", "reinitialize", "scan",
    "solve_lap", "solve_variances", "track_frames", "train", "votes",
    "voc_score",
]
