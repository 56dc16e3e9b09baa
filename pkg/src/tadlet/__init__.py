"""Tadlet - a desk-scale one-stage temporal action detector."""

from .threads import pin_process_threads as _pin_process_threads

_pin_process_threads()

from .anchors import AnchorSet, AssignmentResult, assign, decode, encode, generate_anchors
from .augment import AnnotatedClip, AugmentPipeline, Clip
from .bootstrap import Bootstrap
from .config import (
    AnchorConfig,
    AugmentPolicy,
    InferConfig,
    LossConfig,
    NetConfig,
    SectionAbstract,
    SynthSpec,
    TrainConfig,
)
from .errors import ConfigurationError, FormatError, NonFiniteError, TadError, TrainingDivergedError
from .evaluator import EvalReport, evaluate
from .helpers import Resolve
from .inference import detect_video, plan_windows
from .losses import detection_loss, focal_loss
from .network import Detector
from .registrant import RegistrantAbstract
from .registrar import Registrar
from .registry import Registry
from .resource import ResourceAbstract, ResourceRegistry
from .segments import Detection, LabeledSegment, ScoredSegment, Segment, diou_loss, suppress, tiou
from .trainer import fit, lr_at
from .types import RegistrantIdentity, RegistrantKind, Tr


__version__ = "0.1.0"

__all__ = [
    # Types
    "RegistrantKind",
    "RegistrantIdentity",
    "Tr",

    # Helpers
    "Resolve",

    # Core classes
    "RegistrantAbstract",
    "Registry",
    "Registrar",
    "ResourceAbstract",
    "ResourceRegistry",
    "SectionAbstract",
    "Bootstrap",

    # Configuration sections
    "AnchorConfig",
    "NetConfig",
    "LossConfig",
    "TrainConfig",
    "InferConfig",
    "AugmentPolicy",
    "SynthSpec",

    # Errors
    "TadError",
    "ConfigurationError",
    "FormatError",
    "NonFiniteError",
    "TrainingDivergedError",

    # Detection
    "Segment",
    "ScoredSegment",
    "LabeledSegment",
    "Detection",
    "tiou",
    "diou_loss",
    "suppress",
    "AnchorSet",
    "AssignmentResult",
    "generate_anchors",
    "assign",
    "decode",
    "encode",
    "Clip",
    "AnnotatedClip",
    "AugmentPipeline",
    "Detector",
    "focal_loss",
    "detection_loss",
    "lr_at",
    "fit",
    "plan_windows",
    "detect_video",
    "EvalReport",
    "evaluate",
]
