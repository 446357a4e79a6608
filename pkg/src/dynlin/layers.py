"""Layer kinds, their plain forward passes, and their frozen linear forms.

Freezing a layer at a concrete input produces a :class:`DynLinearOp`:
an exactly linear map on the ones-augmented token matrix ``[X, 1]``.
Every multiplicative quantity that depends on the input (activation
multipliers, attention weights, normalisation statistics, pooling
selections) is evaluated at that input and then held fixed, so the op
reproduces the layer's output at the freeze point while exposing its
adjoint for cheap row extraction.

The trailing augmentation channel is all ones on entry and must be all
ones on exit of every op; biases ride on it.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from .errors import CapabilityError, ParameterError, ShapeError
from .tensor_ops import ConvGeometry, Tensor, kernel_matrix, unvec, vec

log = logging.getLogger("dynlin")

SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class TokenShape:
    """Shape of the data between two layers: token count, channels, optional grid."""

    tokens: int
    channels: int
    height: int | None = None
    width: int | None = None

    def with_grid(self):
        if self.height is None or self.width is None:
            raise ShapeError("layer needs a spatial (height, width) input")
        if self.height * self.width != self.tokens:
            raise ShapeError("token count does not match the spatial grid")
        return self.height, self.width


@dataclass
class LayerSpec:
    kind: str
    params: object


@dataclass
class FCParams:
    w: Tensor          # (d_in, d_out)
    b: Tensor          # (d_out,)


@dataclass
class NormParams:
    mode: str          # "batch" (stored statistics) or "layer" (per token)
    gamma: Tensor
    beta: Tensor
    mu: Tensor | None = None
    sigma: Tensor | None = None
    eps: float = 1e-5


@dataclass
class ActivationParams:
    fn: str
    alpha: float = 0.01    # slope for leaky_relu only


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    b_q: Tensor | None = None
    b_k: Tensor | None = None
    b_v: Tensor | None = None


@dataclass
class MultiHeadParams:
    heads: list          # list[AttentionParams], equal head widths
    w_u: Tensor          # (heads * d_v, d_out)
    b_u: Tensor | None = None


@dataclass
class ConvParams:
    kernel: Tensor       # (kh, kw, d_in, d_out)
    bias: Tensor | None = None
    stride: int = 1
    pad: int = 0


@dataclass
class PoolParams:
    window: int
    stride: int


@dataclass
class TokenSelectParams:
    mode: str            # "index" or "mean"
    index: int = 0


@dataclass
class ResidualParams:
    branches: list       # list[list[LayerSpec]]; [] is the identity branch
    ones_branch: int = 0


@dataclass
class SoftmaxParams:
    pass


# --- activations ------------------------------------------------------------
# Each activation is x * multiplier(x); freezing keeps the multiplier.

def _gauss_pdf(x):
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _act_table(alpha: float):
    return {
        "gelu": (lambda x: ndtr(x), lambda x: ndtr(x) + x * _gauss_pdf(x)),
        "swish": (expit, lambda x: expit(x) * (1.0 + x * (1.0 - expit(x)))),
        "relu": (
            lambda x: (x > 0).astype(np.float64),
            lambda x: (x > 0).astype(np.float64),
        ),
        "leaky_relu": (
            lambda x: np.where(x > 0, 1.0, alpha),
            lambda x: np.where(x > 0, 1.0, alpha),
        ),
    }


def activation_multiplier(params: ActivationParams, x):
    table = _act_table(params.alpha)
    if params.fn not in table:
        raise CapabilityError(f"unknown activation {params.fn!r}")
    return table[params.fn][0](np.asarray(x, dtype=np.float64))


def activation_value(params: ActivationParams, x):
    x = np.asarray(x, dtype=np.float64)
    return x * activation_multiplier(params, x)


def activation_derivative(params: ActivationParams, x):
    table = _act_table(params.alpha)
    if params.fn not in table:
        raise CapabilityError(f"unknown activation {params.fn!r}")
    return table[params.fn][1](np.asarray(x, dtype=np.float64))


# --- frozen linear operators -------------------------------------------------

class DynLinearOp:
    """Linear map on augmented token matrices, with an exact adjoint.

    ``in_channels`` and ``out_channels`` count the augmentation column,
    so the map sends ``(in_tokens, in_channels)`` matrices to
    ``(out_tokens, out_channels)`` ones.  ``apply``/``apply_adjoint``
    are the same maps on column-stacked vectors.
    """

    kind = "op"
    in_tokens: int
    in_channels: int
    out_tokens: int
    out_channels: int

    def _apply_mat(self, xa: Tensor) -> Tensor:
        raise NotImplementedError

    def _adjoint_mat(self, u: Tensor) -> Tensor:
        raise NotImplementedError

    def forward_aug(self, xa: Tensor) -> Tensor:
        xa = np.asarray(xa, dtype=np.float64)
        if xa.shape != (self.in_tokens, self.in_channels):
            raise ShapeError(
                f"{self.kind}: expected input {(self.in_tokens, self.in_channels)}, "
                f"got {xa.shape}"
            )
        return self._apply_mat(xa)

    def apply(self, v) -> Tensor:
        return vec(self._apply_mat(unvec(v, self.in_tokens, self.in_channels)))

    def apply_adjoint(self, u) -> Tensor:
        ua = unvec(u, self.out_tokens, self.out_channels)
        return vec(self._adjoint_mat(ua))

    def adjoint_mat(self, u: Tensor) -> Tensor:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.out_tokens, self.out_channels):
            raise ShapeError(
                f"{self.kind}: expected cotangent {(self.out_tokens, self.out_channels)}, "
                f"got {u.shape}"
            )
        return self._adjoint_mat(u)


class MatOp(DynLinearOp):
    """Right-multiplication by a fused weight matrix (dense layers)."""

    kind = "fc"

    def __init__(self, m: Tensor, tokens: int):
        self.m = np.asarray(m, dtype=np.float64)
        self.in_tokens = self.out_tokens = tokens
        self.in_channels = self.m.shape[0]
        self.out_channels = self.m.shape[1]

    def _apply_mat(self, xa):
        return xa @ self.m

    def _adjoint_mat(self, u):
        return u @ self.m.T


class ElementwiseAffineOp(DynLinearOp):
    """Per-entry scale of the value channels plus a ones-channel offset.

    Covers frozen activations (scale only) and frozen normalisation
    (scale and offset both built from the frozen statistics).
    """

    kind = "elementwise"

    def __init__(self, scale: Tensor, offset: Tensor | None = None):
        self.scale = np.asarray(scale, dtype=np.float64)
        self.offset = None if offset is None else np.asarray(offset, dtype=np.float64)
        t, d = self.scale.shape
        self.in_tokens = self.out_tokens = t
        self.in_channels = self.out_channels = d + 1

    def _apply_mat(self, xa):
        d = self.in_channels - 1
        out = np.empty_like(xa)
        out[:, :d] = xa[:, :d] * self.scale
        if self.offset is not None:
            out[:, :d] += xa[:, [d]] * self.offset
        out[:, d] = xa[:, d]
        return out

    def _adjoint_mat(self, u):
        d = self.in_channels - 1
        v = np.empty_like(u)
        v[:, :d] = u[:, :d] * self.scale
        v[:, d] = u[:, d]
        if self.offset is not None:
            v[:, d] += (u[:, :d] * self.offset).sum(axis=1)
        return v


class AttentionOp(DynLinearOp):
    """Frozen single-head attention: fixed mixing matrix times a value projection."""

    kind = "attention"

    def __init__(self, a: Tensor, wv_full: Tensor):
        self.a = np.asarray(a, dtype=np.float64)            # (t, t)
        self.wv_full = np.asarray(wv_full, dtype=np.float64)  # (d+1, d_v)
        t = self.a.shape[0]
        self.in_tokens = self.out_tokens = t
        self.in_channels = self.wv_full.shape[0]
        self.out_channels = self.wv_full.shape[1] + 1

    def _apply_mat(self, xa):
        out = np.empty((self.out_tokens, self.out_channels))
        out[:, :-1] = self.a @ (xa @ self.wv_full)
        out[:, -1] = xa[:, -1]
        return out

    def _adjoint_mat(self, u):
        v = (self.a.T @ u[:, :-1]) @ self.wv_full.T
        v[:, -1] += u[:, -1]
        return v


class MultiHeadConcatOp(DynLinearOp):
    """Frozen heads side by side; the output projection is a separate MatOp."""

    kind = "multihead-concat"

    def __init__(self, mats: list, wv_fulls: list):
        self.mats = [np.asarray(a, dtype=np.float64) for a in mats]
        self.wv_fulls = [np.asarray(w, dtype=np.float64) for w in wv_fulls]
        t = self.mats[0].shape[0]
        self.d_v = self.wv_fulls[0].shape[1]
        self.in_tokens = self.out_tokens = t
        self.in_channels = self.wv_fulls[0].shape[0]
        self.out_channels = len(self.mats) * self.d_v + 1

    def _apply_mat(self, xa):
        parts = [a @ (xa @ w) for a, w in zip(self.mats, self.wv_fulls)]
        parts.append(xa[:, [-1]])
        return np.hstack(parts)

    def _adjoint_mat(self, u):
        v = np.zeros((self.in_tokens, self.in_channels))
        for i, (a, w) in enumerate(zip(self.mats, self.wv_fulls)):
            block = u[:, i * self.d_v:(i + 1) * self.d_v]
            v += (a.T @ block) @ w.T
        v[:, -1] += u[:, -1]
        return v


class SeqOp(DynLinearOp):
    """Composition of ops applied left to right."""

    kind = "seq"

    def __init__(self, ops: list, in_tokens=None, in_channels=None):
        self.ops = ops
        if ops:
            self.in_tokens = ops[0].in_tokens
            self.in_channels = ops[0].in_channels
            self.out_tokens = ops[-1].out_tokens
            self.out_channels = ops[-1].out_channels
        else:
            if in_tokens is None or in_channels is None:
                raise ParameterError("empty composition needs explicit shapes")
            self.in_tokens = self.out_tokens = in_tokens
            self.in_channels = self.out_channels = in_channels

    def _apply_mat(self, xa):
        for op in self.ops:
            xa = op._apply_mat(xa)
        return xa

    def _adjoint_mat(self, u):
        for op in reversed(self.ops):
            u = op._adjoint_mat(u)
        return u


class ConvOp(DynLinearOp):
    """Frozen convolution: static kernel plus a per-position bias kernel.

    The bias of output position ``o`` is spread over the ``support[o]``
    in-bounds cells of its receptive field, so a ones channel flowing in
    reconstructs the bias exactly, padded borders included.
    """

    kind = "conv2d"

    def __init__(self, geom: ConvGeometry, kernel: Tensor, bias: Tensor | None):
        self.geom = geom
        k = np.asarray(kernel, dtype=np.float64)
        self.kernel = k
        self.d_in = k.shape[2]
        self.d_out = k.shape[3]
        self.k_mat = kernel_matrix(k)
        self.bias = (
            np.zeros(self.d_out) if bias is None
            else np.asarray(bias, dtype=np.float64)
        )
        self.support = geom.support.astype(np.float64)
        if np.any(self.support < 1):
            raise ParameterError(
                "convolution has output positions with empty receptive fields"
            )
        self.in_tokens = geom.h * geom.w
        self.in_channels = self.d_in + 1
        self.out_tokens = geom.t_out
        self.out_channels = self.d_out + 1

    def _apply_mat(self, xa):
        d = self.d_in
        cols_val = self.geom.gather(xa[:, :d])
        ones_sums = self.geom.gather(xa[:, [d]]).sum(axis=0)
        ratio = ones_sums / self.support
        out = np.empty((self.out_tokens, self.out_channels))
        out[:, :self.d_out] = (self.k_mat @ cols_val).T + np.outer(ratio, self.bias)
        out[:, self.d_out] = ratio
        return out

    def _adjoint_mat(self, u):
        dcols_val = self.k_mat.T @ u[:, :self.d_out].T
        v_val = self.geom.scatter(dcols_val, self.d_in)
        w = (u[:, :self.d_out] @ self.bias + u[:, self.d_out]) / self.support
        dcols_one = np.broadcast_to(w, (self.geom.kh * self.geom.kw, self.out_tokens))
        v_one = self.geom.scatter(np.ascontiguousarray(dcols_one), 1)
        return np.hstack([v_val, v_one])


class MaxPoolOp(DynLinearOp):
    """Pooling frozen into a gather of each window's argmax cell."""

    kind = "maxpool2d"

    def __init__(self, sel: Tensor, ones_src: Tensor, in_tokens: int, out_tokens: int):
        self.sel = sel                  # (t_out, d) flat input token per channel
        self.ones_src = ones_src        # (t_out,) input token carrying the ones
        self.in_tokens = in_tokens
        self.out_tokens = out_tokens
        d = sel.shape[1]
        self.in_channels = self.out_channels = d + 1

    def _apply_mat(self, xa):
        d = self.sel.shape[1]
        out = np.empty((self.out_tokens, d + 1))
        out[:, :d] = xa[self.sel, np.arange(d)[None, :]]
        out[:, d] = xa[self.ones_src, d]
        return out

    def _adjoint_mat(self, u):
        d = self.sel.shape[1]
        v = np.zeros((self.in_tokens, d + 1))
        np.add.at(v, (self.sel, np.broadcast_to(np.arange(d), self.sel.shape)),
                  u[:, :d])
        np.add.at(v[:, d], self.ones_src, u[:, d])
        return v


class AvgPoolOp(DynLinearOp):
    """Uniform window average on every channel, ones included."""

    kind = "avgpool2d"

    def __init__(self, geom: ConvGeometry, channels: int):
        if geom.pad != 0:
            raise ParameterError("pooling does not pad")
        self.geom = geom
        self.d = channels
        self.in_tokens = geom.h * geom.w
        self.out_tokens = geom.t_out
        self.in_channels = self.out_channels = channels + 1
        self.win = geom.kh * geom.kw

    def _apply_mat(self, xa):
        cols = self.geom.gather(xa)     # ((d+1)*win, t_out)
        return cols.reshape(self.d + 1, self.win, self.out_tokens).mean(axis=1).T

    def _adjoint_mat(self, u):
        spread = np.repeat(u.T[:, None, :] / self.win, self.win, axis=1)
        return self.geom.scatter(spread.reshape(-1, self.out_tokens), self.d + 1)


class FlattenOp(DynLinearOp):
    """Collapse all tokens into one; feature order is column-stacked."""

    kind = "flatten"

    def __init__(self, tokens: int, channels: int):
        self.t = tokens
        self.d = channels
        self.in_tokens = tokens
        self.in_channels = channels + 1
        self.out_tokens = 1
        self.out_channels = tokens * channels + 1

    def _apply_mat(self, xa):
        out = np.empty((1, self.out_channels))
        out[0, :-1] = xa[:, :self.d].ravel(order="F")
        out[0, -1] = xa[0, self.d]
        return out

    def _adjoint_mat(self, u):
        v = np.zeros((self.t, self.d + 1))
        v[:, :self.d] = u[0, :-1].reshape((self.t, self.d), order="F")
        v[0, self.d] = u[0, -1]
        return v


class TokenSelectOp(DynLinearOp):
    """Reduce to a single token, by index or by mean."""

    kind = "token_select"

    def __init__(self, mode: str, index: int, tokens: int, channels: int):
        if mode not in ("index", "mean"):
            raise ParameterError(f"unknown token selection mode {mode!r}")
        if mode == "index" and not (0 <= index < tokens):
            raise ParameterError(f"token index {index} out of range 0..{tokens - 1}")
        self.mode = mode
        self.index = index
        self.in_tokens = tokens
        self.out_tokens = 1
        self.in_channels = self.out_channels = channels + 1

    def _apply_mat(self, xa):
        if self.mode == "index":
            return xa[[self.index], :].copy()
        return xa.mean(axis=0, keepdims=True)

    def _adjoint_mat(self, u):
        v = np.zeros((self.in_tokens, self.in_channels))
        if self.mode == "index":
            v[self.index] = u[0]
        else:
            v[:] = u[0] / self.in_tokens
        return v


class ResidualOp(DynLinearOp):
    """Sum of parallel branch compositions over a shared input.

    Exactly one branch (``owner``) carries the ones channel to the output;
    the others contribute zero there so the augmentation stays exact.
    """

    kind = "residual"

    def __init__(self, branches: list, owner: int):
        if not 0 <= owner < len(branches):
            raise ParameterError("ones-carrying branch index out of range")
        first = branches[0]
        for b in branches[1:]:
            if (b.in_tokens, b.in_channels, b.out_tokens, b.out_channels) != (
                first.in_tokens, first.in_channels, first.out_tokens,
                first.out_channels,
            ):
                raise ShapeError("residual branches disagree on shapes")
        self.branches = branches
        self.owner = owner
        self.in_tokens = first.in_tokens
        self.in_channels = first.in_channels
        self.out_tokens = first.out_tokens
        self.out_channels = first.out_channels

    def _apply_mat(self, xa):
        out = np.zeros((self.out_tokens, self.out_channels))
        for i, br in enumerate(self.branches):
            y = br._apply_mat(xa)
            if i != self.owner:
                y = y.copy()
                y[:, -1] = 0.0
            out += y
        return out

    def _adjoint_mat(self, u):
        v = np.zeros((self.in_tokens, self.in_channels))
        for i, br in enumerate(self.branches):
            ui = u
            if i != self.owner:
                ui = u.copy()
                ui[:, -1] = 0.0
            v += br._adjoint_mat(ui)
        return v


# --- freezing ----------------------------------------------------------------

def fused_fc_matrix(w: Tensor, b: Tensor) -> Tensor:
    d_in, d_out = w.shape
    m = np.zeros((d_in + 1, d_out + 1))
    m[:d_in, :d_out] = w
    m[d_in, :d_out] = b
    m[d_in, d_out] = 1.0
    return m


def freeze_fc(params: FCParams, xa: Tensor) -> MatOp:
    w = np.asarray(params.w, dtype=np.float64)
    b = np.asarray(params.b, dtype=np.float64)
    if w.ndim != 2 or b.shape != (w.shape[1],):
        raise ShapeError(f"dense layer shapes w{w.shape} b{b.shape} do not agree")
    if xa.shape[1] != w.shape[0] + 1:
        raise ShapeError(
            f"dense layer expects {w.shape[0]} channels, input has {xa.shape[1] - 1}"
        )
    return MatOp(fused_fc_matrix(w, b), tokens=xa.shape[0])


def _norm_stats(params: NormParams, x: Tensor):
    """Frozen (scale, offset) rows for each token."""
    gamma = np.asarray(params.gamma, dtype=np.float64)
    beta = np.asarray(params.beta, dtype=np.float64)
    t, d = x.shape
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("normalisation parameter length does not match channels")
    if params.mode == "batch":
        if params.mu is None or params.sigma is None:
            raise ParameterError("stored-statistics normalisation needs mu and sigma")
        mu = np.broadcast_to(np.asarray(params.mu, dtype=np.float64), (t, d))
        sigma = np.broadcast_to(np.asarray(params.sigma, dtype=np.float64), (t, d))
    elif params.mode == "layer":
        mu_t = x.mean(axis=1, keepdims=True)
        var_t = ((x - mu_t) ** 2).mean(axis=1, keepdims=True)
        mu = np.broadcast_to(mu_t, (t, d))
        sigma = np.broadcast_to(np.sqrt(var_t + params.eps), (t, d))
    else:
        raise ParameterError(f"unknown normalisation mode {params.mode!r}")
    if np.any(sigma < SIGMA_FLOOR):
        n = int((sigma < SIGMA_FLOOR).sum())
        log.warning("clamping %d normalisation denominators below %g", n, SIGMA_FLOOR)
        sigma = np.maximum(sigma, SIGMA_FLOOR)
    scale = gamma / sigma
    offset = beta - gamma * mu / sigma
    return scale, offset


def freeze_norm(params: NormParams, xa: Tensor) -> ElementwiseAffineOp:
    scale, offset = _norm_stats(params, xa[:, :-1])
    return ElementwiseAffineOp(scale, offset)


def freeze_activation(params: ActivationParams, xa: Tensor) -> ElementwiseAffineOp:
    if params.fn == "leaky_relu" and not 0.0 <= params.alpha < 1.0:
        raise ParameterError(f"leaky slope {params.alpha} outside [0, 1)")
    return ElementwiseAffineOp(activation_multiplier(params, xa[:, :-1]))


def stacked_value_matrix(params: AttentionParams) -> Tensor:
    """Value projection with its bias folded in as a trailing row."""
    w_v = np.asarray(params.w_v, dtype=np.float64)
    b_v = (
        np.zeros(w_v.shape[1]) if params.b_v is None
        else np.asarray(params.b_v, dtype=np.float64)
    )
    return np.vstack([w_v, b_v])


def attention_mixing(params: AttentionParams, x: Tensor) -> Tensor:
    """Row-stochastic mixing matrix evaluated at the given tokens."""
    w_q = np.asarray(params.w_q, dtype=np.float64)
    w_k = np.asarray(params.w_k, dtype=np.float64)
    d_k = w_q.shape[1]
    if d_k < 1 or w_k.shape[1] != d_k:
        raise ShapeError("query/key projections disagree on width")
    if w_q.shape[0] != x.shape[1] or w_k.shape[0] != x.shape[1]:
        raise ShapeError("attention projections do not match the input channels")
    q = x @ w_q + (0.0 if params.b_q is None else params.b_q)
    k = x @ w_k + (0.0 if params.b_k is None else params.b_k)
    scores = q @ k.T / np.sqrt(d_k)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    a = e / e.sum(axis=1, keepdims=True)
    if np.any(np.abs(a.sum(axis=1) - 1.0) > 1e-9):
        raise ParameterError("attention rows failed to normalise")
    return a


def freeze_attention(params: AttentionParams, xa: Tensor) -> AttentionOp:
    a = attention_mixing(params, xa[:, :-1])
    return AttentionOp(a, stacked_value_matrix(params))


def freeze_multihead(params: MultiHeadParams, xa: Tensor) -> SeqOp:
    x = xa[:, :-1]
    mats = [attention_mixing(h, x) for h in params.heads]
    wv_fulls = [stacked_value_matrix(h) for h in params.heads]
    widths = {w.shape[1] for w in wv_fulls}
    if len(widths) != 1:
        raise ShapeError("attention heads disagree on value width")
    concat = MultiHeadConcatOp(mats, wv_fulls)
    w_u = np.asarray(params.w_u, dtype=np.float64)
    if w_u.shape[0] != concat.out_channels - 1:
        raise ShapeError(
            f"output projection expects {w_u.shape[0]} channels, heads give "
            f"{concat.out_channels - 1}"
        )
    b_u = np.zeros(w_u.shape[1]) if params.b_u is None else params.b_u
    proj = MatOp(fused_fc_matrix(w_u, np.asarray(b_u, dtype=np.float64)),
                 tokens=xa.shape[0])
    return SeqOp([concat, proj])


def freeze_conv(params: ConvParams, xa: Tensor, in_shape: TokenShape) -> ConvOp:
    h, w = in_shape.with_grid()
    k = np.asarray(params.kernel, dtype=np.float64)
    if k.shape[2] != in_shape.channels:
        raise ShapeError(
            f"kernel expects {k.shape[2]} channels, input has {in_shape.channels}"
        )
    geom = ConvGeometry(h, w, k.shape[0], k.shape[1], params.stride, params.pad)
    return ConvOp(geom, k, params.bias)


def freeze_maxpool(params: PoolParams, xa: Tensor, in_shape: TokenShape) -> MaxPoolOp:
    h, w = in_shape.with_grid()
    d = in_shape.channels
    geom = ConvGeometry(h, w, params.window, params.window, params.stride, 0)
    patches = xa[:, :d][geom.index]           # (win*win, t_out, d)
    best = patches.argmax(axis=0)             # first max wins: lowest flat index
    sel = np.take_along_axis(geom.index[:, :, None].repeat(d, axis=2),
                             best[None], axis=0)[0]
    return MaxPoolOp(sel, geom.index[0].copy(), in_tokens=h * w,
                     out_tokens=geom.t_out)


def freeze_avgpool(params: PoolParams, xa: Tensor, in_shape: TokenShape) -> AvgPoolOp:
    h, w = in_shape.with_grid()
    geom = ConvGeometry(h, w, params.window, params.window, params.stride, 0)
    return AvgPoolOp(geom, in_shape.channels)


def freeze_layer(spec: LayerSpec, xa: Tensor, in_shape: TokenShape) -> DynLinearOp:
    """Freeze one layer at the given augmented input."""
    p = spec.params
    if spec.kind == "fc":
        return freeze_fc(p, xa)
    if spec.kind == "norm":
        return freeze_norm(p, xa)
    if spec.kind == "activation":
        return freeze_activation(p, xa)
    if spec.kind == "attention":
        return freeze_attention(p, xa)
    if spec.kind == "multihead_attention":
        return freeze_multihead(p, xa)
    if spec.kind == "conv2d":
        return freeze_conv(p, xa, in_shape)
    if spec.kind == "maxpool2d":
        return freeze_maxpool(p, xa, in_shape)
    if spec.kind == "avgpool2d":
        return freeze_avgpool(p, xa, in_shape)
    if spec.kind == "flatten":
        return FlattenOp(in_shape.tokens, in_shape.channels)
    if spec.kind == "token_select":
        return TokenSelectOp(p.mode, p.index, in_shape.tokens, in_shape.channels)
    if spec.kind == "residual":
        return _freeze_residual(p, xa, in_shape)
    if spec.kind == "softmax":
        raise CapabilityError(
            "softmax over channels has no frozen linear form; explain the "
            "pre-softmax score instead"
        )
    raise CapabilityError(f"cannot freeze layer kind {spec.kind!r}")


def _freeze_residual(params: ResidualParams, xa: Tensor,
                     in_shape: TokenShape) -> ResidualOp:
    branches = []
    for chain in params.branches:
        ops = []
        cur, cur_shape = xa, in_shape
        for spec in chain:
            op = freeze_layer(spec, cur, cur_shape)
            cur = op.forward_aug(cur)
            cur_shape = layer_out_shape(spec, cur_shape)
            ops.append(op)
        branches.append(SeqOp(ops, in_tokens=xa.shape[0], in_channels=xa.shape[1]))
    return ResidualOp(branches, params.ones_branch)


# --- shape inference ----------------------------------------------------------

def layer_out_shape(spec: LayerSpec, s: TokenShape) -> TokenShape:
    """Output shape of a layer; raises ShapeError when the input cannot fit."""
    p = spec.params
    if spec.kind == "fc":
        if p.w.shape[0] != s.channels:
            raise ShapeError(
                f"dense layer expects {p.w.shape[0]} channels, got {s.channels}"
            )
        return TokenShape(s.tokens, p.w.shape[1], s.height, s.width)
    if spec.kind in ("norm", "activation", "softmax"):
        return s
    if spec.kind == "attention":
        if p.w_v.shape[0] != s.channels:
            raise ShapeError("value projection does not match the input channels")
        return TokenShape(s.tokens, p.w_v.shape[1])
    if spec.kind == "multihead_attention":
        return TokenShape(s.tokens, p.w_u.shape[1])
    if spec.kind == "conv2d":
        h, w = s.with_grid()
        k = p.kernel
        if k.shape[2] != s.channels:
            raise ShapeError(
                f"kernel expects {k.shape[2]} channels, got {s.channels}"
            )
        g = ConvGeometry(h, w, k.shape[0], k.shape[1], p.stride, p.pad)
        return TokenShape(g.t_out, k.shape[3], g.out_h, g.out_w)
    if spec.kind in ("maxpool2d", "avgpool2d"):
        h, w = s.with_grid()
        g = ConvGeometry(h, w, p.window, p.window, p.stride, 0)
        return TokenShape(g.t_out, s.channels, g.out_h, g.out_w)
    if spec.kind == "flatten":
        return TokenShape(1, s.tokens * s.channels)
    if spec.kind == "token_select":
        if p.mode == "index" and not 0 <= p.index < s.tokens:
            raise ShapeError(f"token index {p.index} out of range 0..{s.tokens - 1}")
        return TokenShape(1, s.channels)
    if spec.kind == "residual":
        outs = []
        for chain in p.branches:
            cur = s
            for sub in chain:
                cur = layer_out_shape(sub, cur)
            outs.append(cur)
        first = outs[0]
        for o in outs[1:]:
            if (o.tokens, o.channels) != (first.tokens, first.channels):
                raise ShapeError("residual branches disagree on output shape")
        if not 0 <= p.ones_branch < len(p.branches):
            raise ParameterError("ones-carrying branch index out of range")
        return first
    raise CapabilityError(f"unknown layer kind {spec.kind!r}")


# --- plain forward and its vector-Jacobian products ----------------------------
# These run the layer as the underlying network would, without augmentation.
# They back the gradient baseline and double as the reference the frozen ops
# are checked against.

def forward_layer(spec: LayerSpec, x: Tensor, in_shape: TokenShape):
    p = spec.params
    if spec.kind == "fc":
        return x @ p.w + p.b, x
    if spec.kind == "norm":
        scale, offset = _norm_stats(p, x)
        return x * scale + offset, (x, scale)
    if spec.kind == "activation":
        return activation_value(p, x), x
    if spec.kind == "attention":
        return _attention_forward(p, x)
    if spec.kind == "multihead_attention":
        ctxs = []
        parts = []
        for h in params_heads(p):
            y, ctx = _attention_forward(h, x)
            parts.append(y)
            ctxs.append(ctx)
        cat = np.hstack(parts)
        b_u = 0.0 if p.b_u is None else p.b_u
        return cat @ p.w_u + b_u, ctxs
    if spec.kind == "conv2d":
        h, w = in_shape.with_grid()
        geom = ConvGeometry(h, w, p.kernel.shape[0], p.kernel.shape[1],
                            p.stride, p.pad)
        cols = geom.gather(x)
        y = (kernel_matrix(p.kernel) @ cols).T
        if p.bias is not None:
            y = y + p.bias
        return y, geom
    if spec.kind == "maxpool2d":
        h, w = in_shape.with_grid()
        d = in_shape.channels
        geom = ConvGeometry(h, w, p.window, p.window, p.stride, 0)
        patches = x[geom.index]
        best = patches.argmax(axis=0)
        sel = np.take_along_axis(geom.index[:, :, None].repeat(d, axis=2),
                                 best[None], axis=0)[0]
        return x[sel, np.arange(d)[None, :]], sel
    if spec.kind == "avgpool2d":
        h, w = in_shape.with_grid()
        geom = ConvGeometry(h, w, p.window, p.window, p.stride, 0)
        cols = geom.gather(x)
        win = p.window * p.window
        return cols.reshape(in_shape.channels, win, geom.t_out).mean(axis=1).T, geom
    if spec.kind == "flatten":
        return x.ravel(order="F")[None, :], x.shape
    if spec.kind == "token_select":
        if p.mode == "index":
            return x[[p.index], :].copy(), x.shape
        return x.mean(axis=0, keepdims=True), x.shape
    if spec.kind == "residual":
        outs = []
        ctxs = []
        for chain in p.branches:
            cur, cur_shape = x, in_shape
            chain_ctx = []
            for sub in chain:
                y, c = forward_layer(sub, cur, cur_shape)
                chain_ctx.append((sub, cur_shape, c))
                cur_shape = layer_out_shape(sub, cur_shape)
                cur = y
            outs.append(cur)
            ctxs.append(chain_ctx)
        return sum(outs), ctxs
    if spec.kind == "softmax":
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        return y, y
    raise CapabilityError(f"unknown layer kind {spec.kind!r}")


def params_heads(p: MultiHeadParams):
    return p.heads


def _attention_forward(p: AttentionParams, x: Tensor):
    a = attention_mixing(p, x)
    v = x @ p.w_v + (0.0 if p.b_v is None else p.b_v)
    q = x @ p.w_q + (0.0 if p.b_q is None else p.b_q)
    k = x @ p.w_k + (0.0 if p.b_k is None else p.b_k)
    return a @ v, (a, q, k, v, x)


def _attention_vjp(p: AttentionParams, ctx, u: Tensor) -> Tensor:
    a, q, k, v, x = ctx
    d_k = p.w_q.shape[1]
    dv = a.T @ u
    da = u @ v.T
    dscores = a * (da - (da * a).sum(axis=1, keepdims=True))
    dq = dscores @ k / np.sqrt(d_k)
    dk = dscores.T @ q / np.sqrt(d_k)
    return dq @ p.w_q.T + dk @ p.w_k.T + dv @ p.w_v.T


def vjp_layer(spec: LayerSpec, ctx, u: Tensor, in_shape: TokenShape) -> Tensor:
    p = spec.params
    if spec.kind == "fc":
        return u @ p.w.T
    if spec.kind == "norm":
        x, scale = ctx
        if p.mode == "batch":
            return u * scale
        # true per-token statistics pull gradient through mean and variance
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        sigma = np.maximum(np.sqrt(var + p.eps), SIGMA_FLOOR)
        xhat = (x - mu) / sigma
        g = u * p.gamma
        return (g - g.mean(axis=1, keepdims=True)
                - xhat * (g * xhat).mean(axis=1, keepdims=True)) / sigma
    if spec.kind == "activation":
        return u * activation_derivative(p, ctx)
    if spec.kind == "attention":
        return _attention_vjp(p, ctx, u)
    if spec.kind == "multihead_attention":
        dcat = u @ p.w_u.T
        d_v = p.heads[0].w_v.shape[1]
        out = np.zeros_like(ctx[0][4])
        for i, (head, c) in enumerate(zip(p.heads, ctx)):
            out += _attention_vjp(head, c, dcat[:, i * d_v:(i + 1) * d_v])
        return out
    if spec.kind == "conv2d":
        geom = ctx
        dcols = kernel_matrix(p.kernel).T @ u.T
        return geom.scatter(dcols, in_shape.channels)
    if spec.kind == "maxpool2d":
        sel = ctx
        d = in_shape.channels
        v = np.zeros((in_shape.tokens, d))
        np.add.at(v, (sel, np.broadcast_to(np.arange(d), sel.shape)), u)
        return v
    if spec.kind == "avgpool2d":
        geom = ctx
        win = p.window * p.window
        spread = np.repeat(u.T[:, None, :] / win, win, axis=1)
        return geom.scatter(spread.reshape(-1, geom.t_out), in_shape.channels)
    if spec.kind == "flatten":
        t, d = ctx
        return u[0].reshape((t, d), order="F")
    if spec.kind == "token_select":
        v = np.zeros(ctx)
        if p.mode == "index":
            v[p.index] = u[0]
        else:
            v[:] = u[0] / ctx[0]
        return v
    if spec.kind == "residual":
        out = np.zeros((in_shape.tokens, in_shape.channels))
        for chain_ctx in ctx:
            cur = u
            for sub, sub_shape, c in reversed(chain_ctx):
                cur = vjp_layer(sub, c, cur, sub_shape)
            out += cur
        return out
    if spec.kind == "softmax":
        y = ctx
        return y * (u - (u * y).sum(axis=1, keepdims=True))
    raise CapabilityError(f"unknown layer kind {spec.kind!r}")
