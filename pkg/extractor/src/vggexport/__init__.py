"""Export pretrained VGG activations into the discovery pipeline's file formats."""

from .extract import (
    DEFAULT_LAYERS,
    LAYER_INDICES,
    ExtractionError,
    ExtractionSpec,
    MissingWeights,
    UnreadableImage,
    extract,
)

__all__ = [
    "DEFAULT_LAYERS",
    "LAYER_INDICES",
    "ExtractionError",
    "ExtractionSpec",
    "MissingWeights",
    "UnreadableImage",
    "extract",
]
