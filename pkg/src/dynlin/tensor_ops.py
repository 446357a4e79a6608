"""Core array plumbing: vectorisation, Kronecker products, patch extraction.

Conventions used across the whole package:

* A token matrix ``X`` has shape ``(t, d)``: one row per token (pixel,
  patch, or the single token of a flat vector), one column per channel.
* ``vec`` stacks columns: ``vec(X)[j*t + i] == X[i, j]``.
* Spatial grids are ``(h, w, d)`` arrays and flatten to tokens row by
  row, so token ``i`` sits at ``(i // w, i % w)``.
* Patch rows produced by :func:`im2col` order the channel slowest:
  row ``j*kh*kw + dr*kw + dc`` holds channel ``j`` at kernel offset
  ``(dr, dc)``.
"""

import numpy as np

from .errors import ParameterError, ResourceError, ShapeError

Tensor = np.ndarray
Shape2D = tuple[int, int]

DBT_CAP_DEFAULT = 4096


def as_matrix(x, name: str = "array") -> Tensor:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def vec(x) -> Tensor:
    """Column-major flattening of a matrix into a vector."""
    return as_matrix(x, "vec input").ravel(order="F")


def unvec(v, t: int, d: int) -> Tensor:
    """Inverse of :func:`vec` for a ``(t, d)`` matrix."""
    a = np.asarray(v, dtype=np.float64).ravel()
    if a.size != t * d:
        raise ShapeError(f"cannot unvec length {a.size} into ({t}, {d})")
    return a.reshape((t, d), order="F")


def kron(a, b) -> Tensor:
    return np.kron(as_matrix(a, "kron lhs"), as_matrix(b, "kron rhs"))


def grid_to_tokens(x) -> Tensor:
    """Reshape ``(h, w, d)`` into ``(h*w, d)`` token rows."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"grid must be 3-D, got shape {a.shape}")
    return a.reshape(a.shape[0] * a.shape[1], a.shape[2])


def tokens_to_grid(x, h: int, w: int) -> Tensor:
    a = as_matrix(x, "token matrix")
    if a.shape[0] != h * w:
        raise ShapeError(f"{a.shape[0]} tokens cannot form a {h}x{w} grid")
    return a.reshape(h, w, a.shape[1])


class ConvGeometry:
    """Index bookkeeping for one 2-D convolution configuration.

    Precomputes, for every output position, which flat input token each
    kernel cell reads (-1 where the cell falls into zero padding).
    """

    def __init__(self, h: int, w: int, kh: int, kw: int, stride: int, pad: int):
        if min(h, w, kh, kw, stride) < 1 or pad < 0:
            raise ParameterError(
                f"bad convolution geometry: h={h} w={w} kh={kh} kw={kw} "
                f"stride={stride} pad={pad}"
            )
        if kh > h + 2 * pad or kw > w + 2 * pad:
            raise ParameterError("kernel larger than padded input")
        self.h, self.w, self.kh, self.kw = h, w, kh, kw
        self.stride, self.pad = stride, pad
        self.out_h = (h + 2 * pad - kh) // stride + 1
        self.out_w = (w + 2 * pad - kw) // stride + 1
        self.t_out = self.out_h * self.out_w

        rr = (np.arange(self.out_h) * stride - pad)[:, None, None, None]
        cc = (np.arange(self.out_w) * stride - pad)[None, :, None, None]
        dr = np.arange(kh)[None, None, :, None]
        dc = np.arange(kw)[None, None, None, :]
        r_in = rr + dr
        c_in = cc + dc
        inside = (r_in >= 0) & (r_in < h) & (c_in >= 0) & (c_in < w)
        flat = np.where(inside, r_in * w + c_in, -1)
        # (kh*kw, t_out): patch cell index varies along rows
        self.index = flat.reshape(self.t_out, kh * kw).T.copy()
        self.support = (self.index >= 0).sum(axis=0)

    def gather(self, tokens: Tensor) -> Tensor:
        """Patch matrix ``(kh*kw*d, t_out)`` from ``(h*w, d)`` tokens."""
        d = tokens.shape[1]
        padded = np.vstack([tokens, np.zeros((1, d))])
        cols = padded[self.index]          # (kh*kw, t_out, d)
        return cols.transpose(2, 0, 1).reshape(d * self.kh * self.kw, self.t_out)

    def scatter(self, cols: Tensor, d: int) -> Tensor:
        """Adjoint of :meth:`gather`: accumulate patches back onto tokens."""
        out = np.zeros((self.h * self.w + 1, d))
        patches = cols.reshape(d, self.kh * self.kw, self.t_out).transpose(1, 2, 0)
        np.add.at(out, self.index, patches)
        return out[:-1]


def im2col(x, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Extract sliding patches of ``(h, w, d)`` into a ``(kh*kw*d, n_patches)`` matrix.

    Cells that fall outside the input read as zero.  Patch ``o`` covers the
    output position ``(o // out_w, o % out_w)``.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"im2col expects (h, w, d), got shape {a.shape}")
    geom = ConvGeometry(a.shape[0], a.shape[1], kh, kw, stride, pad)
    return geom.gather(a.reshape(-1, a.shape[2]))


def kernel_matrix(kernel) -> Tensor:
    """Flatten a ``(kh, kw, d_in, d_out)`` kernel to ``(d_out, kh*kw*d_in)``.

    Row layout matches :func:`im2col`, so ``kernel_matrix(K) @ im2col(X, ...)``
    is the convolution.
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 4:
        raise ShapeError(f"kernel must be (kh, kw, d_in, d_out), got {k.shape}")
    kh, kw, d_in, d_out = k.shape
    return k.transpose(2, 0, 1, 3).reshape(kh * kw * d_in, d_out).T


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``(h, w, d_in)`` with the kernel; returns ``(out_h, out_w, d_out)``."""
    a = np.asarray(x, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if a.ndim != 3 or k.ndim != 4:
        raise ShapeError("conv2d expects (h, w, d_in) input and 4-D kernel")
    if a.shape[2] != k.shape[2]:
        raise ShapeError(f"input channels {a.shape[2]} != kernel channels {k.shape[2]}")
    geom = ConvGeometry(a.shape[0], a.shape[1], k.shape[0], k.shape[1], stride, pad)
    cols = geom.gather(a.reshape(-1, a.shape[2]))
    out = (kernel_matrix(k) @ cols).T        # (t_out, d_out)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out.reshape(geom.out_h, geom.out_w, k.shape[3])


def dbt_matrix(kernel, h: int, w: int, stride: int = 1, pad: int = 0,
               cap: int = DBT_CAP_DEFAULT) -> Tensor:
    """Dense matrix T with ``T @ vec(X) == vec(conv2d(X, kernel))``.

    The operand matrices use the package-wide token layout, so T is the
    doubly-blocked banded form of the kernel.  Refuses to build anything
    with more than ``cap`` input entries.
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 4:
        raise ShapeError(f"kernel must be (kh, kw, d_in, d_out), got {k.shape}")
    kh, kw, d_in, d_out = k.shape
    t_in = h * w
    if t_in * d_in > cap:
        raise ResourceError(
            f"dense convolution matrix over {t_in * d_in} input entries "
            f"exceeds cap {cap}"
        )
    geom = ConvGeometry(h, w, kh, kw, stride, pad)
    t_out = geom.t_out
    T = np.zeros((t_out * d_out, t_in * d_in))
    rows = np.arange(d_out) * t_out
    for o in range(t_out):
        for p in range(kh * kw):
            i = geom.index[p, o]
            if i < 0:
                continue
            dr, dc = divmod(p, kw)
            for j in range(d_in):
                T[rows + o, j * t_in + i] += k[dr, dc, j, :]
    return T
