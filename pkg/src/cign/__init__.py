"""Conditional information gain networks: tree-structured CNNs with information-gain routers."""

from .estimator import CIGNClassifier
from .graph import CIGN, RoutingPolicy, TreeSpec
from .schedules import FASHION_SCHEDULE, MNIST_SCHEDULE, ScheduleSet

__all__ = [
    "CIGN",
    "CIGNClassifier",
    "FASHION_SCHEDULE",
    "MNIST_SCHEDULE",
    "RoutingPolicy",
    "ScheduleSet",
    "TreeSpec",
]

__version__ = "0.1.0"
