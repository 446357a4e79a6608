"""Exact per-token attributions from one frozen linear map per input."""

from .engine import (
    ExplanationResult,
    FrozenTrace,
    augment,
    contribution_matrix,
    contribution_row,
    explain,
    explain_gradient,
    freeze_network,
    model_forward,
)
from .errors import (
    CapabilityError,
    DynlinError,
    FormatError,
    IntegrityError,
    ParameterError,
    ResourceError,
    ShapeError,
    UndefinedCorrelationError,
)
from .faithfulness import (
    FaithfulnessConfig,
    faithfulness_correlation,
    pearson,
    random_attribution,
)
from .layers import LayerSpec, TokenShape, freeze_layer, layer_out_shape
from .modelio import (
    ModelGraph,
    generate_random_model,
    load_grid,
    load_model,
    random_input,
    save_grid,
    save_model,
)
from .oracle import compose_fused, compose_unfused, materialize, oracle_explain
from .postprocess import PostConfig, postprocess

__version__ = "0.1.0"

__all__ = [
    "CapabilityError", "DynlinError", "ExplanationResult",
    "FaithfulnessConfig", "FormatError", "FrozenTrace", "IntegrityError",
    "LayerSpec", "ModelGraph", "ParameterError", "PostConfig",
    "ResourceError", "ShapeError", "TokenShape",
    "UndefinedCorrelationError", "augment", "compose_fused",
    "compose_unfused", "contribution_matrix", "contribution_row", "explain",
    "explain_gradient", "faithfulness_correlation", "freeze_layer",
    "freeze_network", "generate_random_model", "layer_out_shape",
    "load_grid", "load_model", "materialize", "model_forward",
    "oracle_explain", "pearson", "postprocess", "random_attribution",
    "random_input", "save_grid", "save_model",
]
