"""Text-only adaptations of vision-and-language encoders, with probing and fine-tuning harnesses."""

__version__ = "0.1.0"

from .adaptations import AdaptationSpec, AdaptedModel, Resources, resolve_adaptation  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError, InputError, ModeError, ParseError, ResolutionError, ShapeError, TrainingDivergence,
    UnsupportedRelation, VLAdaptError,
)
from .model import ForwardMode, ModelConfig, VisualFeatureSet, VLEncoder, Vocab  # noqa: E402

__all__ = [
    "AdaptationSpec", "AdaptedModel", "Resources", "resolve_adaptation",
    "ConfigError", "InputError", "ModeError", "ParseError", "ResolutionError", "ShapeError",
    "TrainingDivergence", "UnsupportedRelation", "VLAdaptError",
    "ForwardMode", "ModelConfig", "VisualFeatureSet", "VLEncoder", "Vocab",
]
