"""Brute-force dense counterpart of the frozen operators.

Every frozen op is materialised as an explicit matrix on the
column-stacked augmented layout, using the textbook constructions
(Kronecker lifts for dense layers and attention, block-diagonal forms
for elementwise ops, banded matrices for convolutions, 0/1 selection
matrices for pooling and reshapes).  Composition is plain matrix
multiplication.  None of this shares the engine's structured
apply/adjoint code, which is the point: the two routes must agree.

Dense matrices grow quadratically, so everything here refuses to build
maps whose input or output vector exceeds a configurable cap.
"""

import numpy as np

from .engine import FrozenTrace, augment, freeze_network
from .errors import CapabilityError, ResourceError
from .layers import (
    AttentionOp,
    AvgPoolOp,
    ConvOp,
    DynLinearOp,
    ElementwiseAffineOp,
    FlattenOp,
    MatOp,
    MaxPoolOp,
    MultiHeadConcatOp,
    ResidualOp,
    SeqOp,
    TokenSelectOp,
)
from .modelio import ModelGraph
from .tensor_ops import Tensor, dbt_matrix, kron, unvec, vec

DENSE_CAP_DEFAULT = 4096


def _check_cap(op: DynLinearOp, cap: int):
    n_in = op.in_tokens * op.in_channels
    n_out = op.out_tokens * op.out_channels
    if max(n_in, n_out) > cap:
        raise ResourceError(
            f"dense form of {op.kind} is {n_out}x{n_in}, above the cap {cap}")


def materialize(op: DynLinearOp, cap: int = DENSE_CAP_DEFAULT) -> Tensor:
    """Explicit (out_size, in_size) matrix of a frozen op."""
    _check_cap(op, cap)
    if isinstance(op, MatOp):
        return kron(op.m.T, np.eye(op.in_tokens))
    if isinstance(op, ElementwiseAffineOp):
        return _dense_elementwise(op)
    if isinstance(op, AttentionOp):
        ones_pick = np.zeros((1, op.in_channels))
        ones_pick[0, -1] = 1.0
        return np.vstack([
            kron(op.wv_full.T, op.a),
            kron(ones_pick, np.eye(op.in_tokens)),
        ])
    if isinstance(op, MultiHeadConcatOp):
        ones_pick = np.zeros((1, op.in_channels))
        ones_pick[0, -1] = 1.0
        blocks = [kron(w.T, a) for a, w in zip(op.mats, op.wv_fulls)]
        blocks.append(kron(ones_pick, np.eye(op.in_tokens)))
        return np.vstack(blocks)
    if isinstance(op, SeqOp):
        m = np.eye(op.in_tokens * op.in_channels)
        for sub in op.ops:
            m = materialize(sub, cap) @ m
        return m
    if isinstance(op, ConvOp):
        return _dense_conv(op, cap)
    if isinstance(op, MaxPoolOp):
        return _dense_maxpool(op)
    if isinstance(op, AvgPoolOp):
        return _dense_avgpool(op)
    if isinstance(op, FlattenOp):
        return _dense_flatten(op)
    if isinstance(op, TokenSelectOp):
        return _dense_token_select(op)
    if isinstance(op, ResidualOp):
        m = np.zeros((op.out_tokens * op.out_channels,
                      op.in_tokens * op.in_channels))
        ones_rows = (op.out_channels - 1) * op.out_tokens
        for i, br in enumerate(op.branches):
            mb = materialize(br, cap)
            if i != op.owner:
                mb = mb.copy()
                mb[ones_rows:, :] = 0.0
            m += mb
        return m
    raise CapabilityError(f"no dense form for op {type(op).__name__}")


def _dense_elementwise(op: ElementwiseAffineOp) -> Tensor:
    t = op.in_tokens
    d = op.in_channels - 1
    n = t * op.in_channels
    m = np.zeros((n, n))
    idx = np.arange(t)
    for j in range(d):
        m[j * t + idx, j * t + idx] = op.scale[:, j]
        if op.offset is not None:
            m[j * t + idx, d * t + idx] = op.offset[:, j]
    m[d * t + idx, d * t + idx] = 1.0
    return m


def _dense_conv(op: ConvOp, cap: int) -> Tensor:
    g = op.geom
    t_in, t_out = op.in_tokens, op.out_tokens
    d_in, d_out = op.d_in, op.d_out
    m = np.zeros((t_out * (d_out + 1), t_in * (d_in + 1)))
    m[:t_out * d_out, :t_in * d_in] = dbt_matrix(
        op.kernel, g.h, g.w, g.stride, g.pad, cap=cap)
    rows_m = np.arange(d_out) * t_out
    for o in range(t_out):
        s_o = op.support[o]
        for p in range(g.kh * g.kw):
            i = g.index[p, o]
            if i < 0:
                continue
            m[rows_m + o, d_in * t_in + i] += op.bias / s_o
            m[d_out * t_out + o, d_in * t_in + i] += 1.0 / s_o
    return m


def _dense_maxpool(op: MaxPoolOp) -> Tensor:
    t_in, t_out = op.in_tokens, op.out_tokens
    d = op.in_channels - 1
    m = np.zeros((t_out * (d + 1), t_in * (d + 1)))
    for o in range(t_out):
        for j in range(d):
            m[j * t_out + o, j * t_in + op.sel[o, j]] = 1.0
        m[d * t_out + o, d * t_in + op.ones_src[o]] = 1.0
    return m


def _dense_avgpool(op: AvgPoolOp) -> Tensor:
    g = op.geom
    t_in, t_out = op.in_tokens, op.out_tokens
    share = 1.0 / (g.kh * g.kw)
    m = np.zeros((t_out * op.out_channels, t_in * op.in_channels))
    for o in range(t_out):
        for p in range(g.kh * g.kw):
            i = g.index[p, o]
            for j in range(op.in_channels):
                m[j * t_out + o, j * t_in + i] += share
    return m


def _dense_flatten(op: FlattenOp) -> Tensor:
    t, d = op.t, op.d
    m = np.zeros((t * d + 1, t * (d + 1)))
    for j in range(d):
        for i in range(t):
            m[j * t + i, j * t + i] = 1.0
    m[t * d, d * t + 0] = 1.0
    return m


def _dense_token_select(op: TokenSelectOp) -> Tensor:
    t = op.in_tokens
    c = op.in_channels
    m = np.zeros((c, t * c))
    for j in range(c):
        if op.mode == "index":
            m[j, j * t + op.index] = 1.0
        else:
            m[j, j * t:(j + 1) * t] = 1.0 / t
    return m


def compose_fused(ops: list, cap: int = DENSE_CAP_DEFAULT) -> Tensor:
    """Product of the augmented dense forms: the whole network as one matrix."""
    if not ops:
        raise CapabilityError("nothing to compose")
    m = materialize(ops[0], cap)
    for op in ops[1:]:
        m = materialize(op, cap) @ m
    return m


def unfused_parts(op: DynLinearOp, cap: int = DENSE_CAP_DEFAULT):
    """Split a frozen op into its plain weight matrix and bias vector.

    The weight acts on the un-augmented vectorised input; the bias is
    what the ones channel would deliver.
    """
    m = materialize(op, cap)
    rows = (op.out_channels - 1) * op.out_tokens
    cols = (op.in_channels - 1) * op.in_tokens
    w = m[:rows, :cols]
    b = m[:rows, cols:] @ np.ones(op.in_tokens)
    return w, b


def compose_unfused(ops: list, cap: int = DENSE_CAP_DEFAULT):
    """Fold per-layer (weight, bias) pairs into one affine map.

    Walking front to back: the weight is the running product, and each
    layer's bias is pushed through everything after it.  Returns
    (weight, bias) with ``vec(out) == weight @ vec(in) + bias``.
    """
    if not ops:
        raise CapabilityError("nothing to compose")
    w0, b0 = unfused_parts(ops[0], cap)
    w, b = w0, b0
    for op in ops[1:]:
        wi, bi = unfused_parts(op, cap)
        w = wi @ w
        b = wi @ b + bi
    return w, b


def oracle_explain(model: ModelGraph, x, class_index: int,
                   cap: int = DENSE_CAP_DEFAULT):
    """Attribution computed through the dense matrices alone.

    Returns ``(attribution, row_matrix)`` where ``row_matrix`` is row
    ``class_index`` of the composed map reshaped to (tokens, channels+1).
    """
    x = np.asarray(x, dtype=np.float64)
    trace = freeze_network(model, x)
    omega = compose_fused(trace.ops, cap)
    row = omega[class_index, :]
    m = unvec(row, model.input_shape.tokens, model.input_shape.channels + 1)
    attribution = (m[:, :-1] * x).sum(axis=1) + m[:, -1]
    return attribution, m


def oracle_forward(trace: FrozenTrace, x, cap: int = DENSE_CAP_DEFAULT) -> Tensor:
    """Logits obtained by multiplying the composed dense matrix with the input."""
    omega = compose_fused(trace.ops, cap)
    out = omega @ vec(augment(np.asarray(x, dtype=np.float64)))
    return out[:-1]
