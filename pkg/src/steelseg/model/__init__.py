from .backbones import REGISTRY, BackboneSpec, get_backbone_spec
from .networks import (
    ASPP,
    Baseline,
    DeepLabV3Plus,
    Decoder,
    ModelConfig,
    ShapeError,
    build_model,
    count_parameters,
    pad_to_multiple,
    predict_padded,
)

__all__ = [
    "ASPP",
    "REGISTRY",
    "BackboneSpec",
    "Baseline",
    "DeepLabV3Plus",
    "Decoder",
    "ModelConfig",
    "ShapeError",
    "build_model",
    "count_parameters",
    "get_backbone_spec",
    "pad_to_multiple",
    "predict_padded",
]
