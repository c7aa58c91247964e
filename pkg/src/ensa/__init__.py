"""Native sparse attention over ball-tree partitions of 3D point clouds."""

from .balltree import BallTree, PointCloud, build_ball_tree, build_tree_set
from .model import Model, NsaConfig, TrainConfig, model_forward, train

__all__ = [
    "BallTree",
    "Model",
    "NsaConfig",
    "PointCloud",
    "TrainConfig",
    "build_ball_tree",
    "build_tree_set",
    "model_forward",
    "train",
]
__version__ = "0.1.0"
