"""Online prototype-guided adaptation of a multi-task point-cloud model on shifting target streams."""

__version__ = "0.1.0"

from .adaptation import AdaptationConfig, Adapter, run_continual
from .config import RunConfig
from .estimator import PCoTTA
from .geometry import ShapeSpec, chamfer_distance, generate_shape
from .model import ModelDims, MPMModel
from .prototypes import PrototypeBank
from .tasks import TaskKind, TaskSample

__all__ = [
    "AdaptationConfig",
    "Adapter",
    "MPMModel",
    "ModelDims",
    "PCoTTA",
    "PrototypeBank",
    "RunConfig",
    "ShapeSpec",
    "TaskKind",
    "TaskSample",
    "chamfer_distance",
    "generate_shape",
    "run_continual",
]
