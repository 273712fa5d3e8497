"""Speaker diarization with region proposal networks, in NumPy."""

__version__ = "0.1.0"

from .annotation import Annotation, Turn
from .checkpoint import load_checkpoint, save_checkpoint
from .estimator import RPNSDiarizer, SpeakerKMeans
from .exceptions import CheckpointError, ConfigError, DataError, RPNSDError
from .model import ModelConfig, RPNSDNet
from .scoring import ScoringConfig, der

__all__ = [
    "Annotation",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "ModelConfig",
    "RPNSDError",
    "RPNSDNet",
    "RPNSDiarizer",
    "ScoringConfig",
    "SpeakerKMeans",
    "Turn",
    "__version__",
    "der",
    "load_checkpoint",
    "save_checkpoint",
]
