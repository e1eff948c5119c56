"""Dense descriptors with symmetric (multi-modal) correspondences, in plain numpy."""

from .evaluation import EvalReport, evaluate, inference_path_for
from .inference import DegenerateModes, ModeSet, extract_modes
from .model import DescriptorNet, ModelConfig
from .synthgen import MeshConfig, ObjectKind, generate_dataset, load_dataset
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DegenerateModes", "DescriptorNet", "EvalReport", "MeshConfig", "ModeSet", "ModelConfig", "ObjectKind",
    "TrainConfig", "evaluate", "extract_modes", "generate_dataset", "inference_path_for", "load_dataset", "train",
]
