"""Progressive score refinement and evaluation for crowded object detection."""

__version__ = "0.1.0"

from .estimator import ProgressiveRefiner
from .geometry import GroundTruth
from .harness import CorruptionSpec, SceneSpec
from .metrics import EvalScene
from .stage import Prediction, StageConfig, StageParams, run_stage

__all__ = [
    "ProgressiveRefiner",
    "GroundTruth",
    "CorruptionSpec",
    "SceneSpec",
    "EvalScene",
    "Prediction",
    "StageConfig",
    "StageParams",
    "run_stage",
    "__version__",
]
