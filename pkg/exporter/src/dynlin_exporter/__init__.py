"""Torch-to-bundle checkpoint exporter.

Writes model bundles and grid files per FORMAT.md so the dynlin CLI can
consume, verify and explain the exported networks. This package never
imports dynlin; the file formats are the whole contract.
"""

from .bundle import ExportError, write_bundle, write_grid, write_probes
from .convert import (
    batch_to_tokens,
    export_bundle,
    to_ir,
    tokens_to_batch,
    torch_logits,
)
from .modules import Residual, SelectToken, SelfAttention
from .training import (
    build_attention_demo,
    build_toy_cnn,
    build_toy_mlp,
    toy_dataset,
    train_toy_cnn,
)

__all__ = [
    "ExportError",
    "Residual",
    "SelectToken",
    "SelfAttention",
    "batch_to_tokens",
    "build_attention_demo",
    "build_toy_cnn",
    "build_toy_mlp",
    "export_bundle",
    "to_ir",
    "tokens_to_batch",
    "torch_logits",
    "toy_dataset",
    "train_toy_cnn",
    "write_bundle",
    "write_grid",
    "write_probes",
]
