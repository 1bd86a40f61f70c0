"""Joint dynamic road-segment and trajectory representation learning."""

from .data import (RoadNetwork, Store, TimeSliceIndex, TrafficStateGrid,
                   TrafficStateSeq, Trajectory, TrajectorySet, chrono_split, ingest)
from .model import JointModel, ModelConfig
from .training import TrainConfig, load_pretrained, pretrain

__version__ = "0.1.0"

__all__ = [
    "RoadNetwork", "Store", "TimeSliceIndex", "TrafficStateGrid", "TrafficStateSeq",
    "Trajectory", "TrajectorySet", "chrono_split", "ingest",
    "JointModel", "ModelConfig", "TrainConfig", "load_pretrained", "pretrain",
    "__version__",
]
