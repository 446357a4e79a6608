"""Freeze a whole model at one input and read contributions off the adjoint.

The frozen layers compose into one linear map from the augmented input
to the augmented logits.  One adjoint sweep with a unit cotangent at
logit ``k`` therefore yields the entire row of that map: a per-token,
per-channel weight block plus a per-token bias column.  Contracting the
weight block with the input and adding the bias column gives the
per-token contributions, whose total reproduces the logit itself.
That identity is checked on every explanation.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError, ShapeError
from .layers import TokenShape, forward_layer, freeze_layer, vjp_layer
from .modelio import ModelGraph
from .tensor_ops import Tensor, vec

log = logging.getLogger("dynlin")

SOFT_TOL = 1e-6    # relative residual that flags an explanation as suspect
HARD_TOL = 1e-4    # relative residual treated as a correctness breach


def augment(x) -> Tensor:
    """Append the all-ones channel that carries biases through the freeze."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a (tokens, channels) matrix, got {x.shape}")
    return np.hstack([x, np.ones((x.shape[0], 1))])


@dataclass
class FrozenTrace:
    """The frozen linear ops plus every intermediate augmented activation."""

    ops: list
    activations: list      # augmented matrices, input first, logits last
    shapes: list           # TokenShape per stage (without augmentation)

    @property
    def output_aug(self) -> Tensor:
        return self.activations[-1]


@dataclass
class ExplanationResult:
    attribution: Tensor        # (t,) per-token contribution
    weight_part: Tensor        # (t, d) contribution weights before the input product
    bias_part: Tensor          # (t,) bias routed to each token
    logits: Tensor             # (K,)
    class_index: int
    completeness_residual: float
    relative_residual: float
    flagged: bool              # soft-tolerance breach


def model_forward(model: ModelGraph, x) -> Tensor:
    """Plain forward pass; returns the logits as a vector."""
    x = _check_input(model, x)
    cur = x
    shapes = model.shape_chain()
    for spec, shape in zip(model.layers, shapes):
        cur, _ = forward_layer(spec, cur, shape)
    return cur[0]


def freeze_network(model: ModelGraph, x) -> FrozenTrace:
    """Freeze every layer at this input and verify the trace is trustworthy."""
    x = _check_input(model, x)
    shapes = model.shape_chain()
    xa = augment(x)
    ops = []
    acts = [xa]
    for i, (spec, shape) in enumerate(zip(model.layers, shapes)):
        op = freeze_layer(spec, xa, shape)
        xa = op.forward_aug(xa)
        if not np.all(xa[:, -1] == 1.0):
            raise IntegrityError(
                f"augmentation channel corrupted after layer {i} ({spec.kind})")
        ops.append(op)
        acts.append(xa)
    plain = model_forward(model, x)
    frozen = xa[0, :-1]
    gap = np.max(np.abs(frozen - plain)) / max(1.0, float(np.max(np.abs(plain))))
    if gap > 1e-9:
        raise IntegrityError(
            f"frozen trace drifted from the plain forward pass by {gap:.3e}")
    return FrozenTrace(ops=ops, activations=acts, shapes=shapes)


def contribution_matrix(trace: FrozenTrace, k: int) -> Tensor:
    """Row ``k`` of the end-to-end map, reshaped to (tokens, channels + 1).

    Columns ``:d`` are the weights against the input; the last column is
    the bias mass routed to each token.
    """
    out = trace.output_aug
    n_logits = out.shape[1] - 1
    if not 0 <= k < n_logits:
        raise ShapeError(f"class {k} out of range 0..{n_logits - 1}")
    u = np.zeros((1, n_logits + 1))
    u[0, k] = 1.0
    for op in reversed(trace.ops):
        u = op.adjoint_mat(u)
    return u


def contribution_row(trace: FrozenTrace, k: int) -> Tensor:
    """Same row in the column-stacked vector layout."""
    return vec(contribution_matrix(trace, k))


def explain(model: ModelGraph, x, class_index: int | None = None,
            soft_tol: float = SOFT_TOL, hard_tol: float = HARD_TOL
            ) -> ExplanationResult:
    """Exact per-token attribution for one logit of one input."""
    x = _check_input(model, x)
    trace = freeze_network(model, x)
    logits = trace.output_aug[0, :-1].copy()
    k = int(np.argmax(logits)) if class_index is None else int(class_index)
    m = contribution_matrix(trace, k)
    weight = m[:, :-1]
    bias = m[:, -1]
    attribution = (weight * x).sum(axis=1) + bias
    total = float(attribution.sum())
    target = float(logits[k])
    residual = abs(total - target)
    rel = residual / max(1.0, abs(target))
    if rel > hard_tol:
        raise IntegrityError(
            f"attribution total {total!r} misses logit {target!r} by a "
            f"relative {rel:.3e} (limit {hard_tol:g})")
    flagged = rel > soft_tol
    if flagged:
        log.warning("attribution residual %.3e above the soft tolerance", rel)
    return ExplanationResult(
        attribution=attribution, weight_part=weight, bias_part=bias,
        logits=logits, class_index=k, completeness_residual=residual,
        relative_residual=rel, flagged=flagged)


def explain_gradient(model: ModelGraph, x, class_index: int | None = None
                     ) -> Tensor:
    """Reverse-mode input gradient of one logit, as a (tokens, channels) map."""
    x = _check_input(model, x)
    shapes = model.shape_chain()
    cur = x
    saved = []
    for spec, shape in zip(model.layers, shapes):
        out, ctx = forward_layer(spec, cur, shape)
        saved.append((spec, shape, ctx))
        cur = out
    logits = cur[0]
    k = int(np.argmax(logits)) if class_index is None else int(class_index)
    if not 0 <= k < logits.size:
        raise ShapeError(f"class {k} out of range 0..{logits.size - 1}")
    u = np.zeros((1, logits.size))
    u[0, k] = 1.0
    for spec, shape, ctx in reversed(saved):
        u = vjp_layer(spec, ctx, u, shape)
    return u


def _check_input(model: ModelGraph, x) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    s = model.input_shape
    if x.shape != (s.tokens, s.channels):
        raise ShapeError(
            f"input {x.shape} does not match the model's "
            f"({s.tokens}, {s.channels})")
    if not np.all(np.isfinite(x)):
        raise ShapeError("input contains non-finite values")
    return x
