"""Retrieval-oriented segmentation enhancement (ROSE) with a dataset
engine and evaluation harness for the novel/emerging segmentation task
(NEST)."""

from .config import ABLATIONS, RoseConfig, apply_ablation, build_ports, load_config
from .core import BinaryMask, BoundingBox, DetectedEntity, FeatureVector, RasterImage
from .mocks import FixtureWorld, make_mock_suite
from .pipeline import RoseResult, UserRequest, run_batch, run_sample
from .ports import PortSuite

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "BinaryMask",
    "BoundingBox",
    "DetectedEntity",
    "FeatureVector",
    "FixtureWorld",
    "PortSuite",
    "RasterImage",
    "RoseConfig",
    "RoseResult",
    "UserRequest",
    "apply_ablation",
    "build_ports",
    "load_config",
    "make_mock_suite",
    "run_batch",
    "run_sample",
    "__version__",
]
