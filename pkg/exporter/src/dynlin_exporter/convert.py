"""Torch module walking: map a small eval-mode network onto bundle layers.

Anything outside the supported set fails loudly with ExportError rather
than being approximated. Dropout and Identity disappear (the bundle is
an inference format), BatchNorm folds to its running statistics.
"""

import numpy as np
import torch
from torch import nn

from .bundle import ExportError, write_bundle
from .modules import Residual, SelectToken, SelfAttention


def _np(t) -> np.ndarray:
    return t.detach().cpu().numpy()


def _pair(v):
    return (int(v), int(v)) if isinstance(v, int) else tuple(int(x) for x in v)


def _square(v, what: str) -> int:
    a, b = _pair(v)
    if a != b:
        raise ExportError(f"{what} must be square, got {(a, b)}")
    return a


def _linear_ir(m: nn.Linear) -> dict:
    ir = {"kind": "fc", "w": _np(m.weight).T}
    if m.bias is not None:
        ir["b"] = _np(m.bias)
    return ir


def _conv_ir(m: nn.Conv2d) -> dict:
    if m.groups != 1:
        raise ExportError("grouped convolutions are not supported")
    if _pair(m.dilation) != (1, 1):
        raise ExportError("dilated convolutions are not supported")
    if m.padding_mode != "zeros":
        raise ExportError(f"padding mode {m.padding_mode!r} is not supported")
    if isinstance(m.padding, str):
        raise ExportError("string padding is not supported; use an integer")
    ir = {"kind": "conv2d",
          "kernel": _np(m.weight).transpose(2, 3, 1, 0),
          "stride": _square(m.stride, "conv stride"),
          "pad": _square(m.padding, "conv padding")}
    if m.bias is not None:
        ir["bias"] = _np(m.bias)
    return ir


def _pool_ir(m) -> dict:
    kind = "maxpool2d" if isinstance(m, nn.MaxPool2d) else "avgpool2d"
    if _pair(m.padding) != (0, 0):
        raise ExportError("padded pooling is not supported")
    if m.ceil_mode:
        raise ExportError("ceil-mode pooling is not supported")
    if kind == "maxpool2d":
        if _pair(m.dilation) != (1, 1):
            raise ExportError("dilated pooling is not supported")
        if m.return_indices:
            raise ExportError("index-returning pooling is not supported")
    elif m.divisor_override is not None:
        raise ExportError("average pooling divisor overrides are not supported")
    return {"kind": kind,
            "window": _square(m.kernel_size, "pool window"),
            "stride": _square(m.stride, "pool stride")}


def _layernorm_ir(m: nn.LayerNorm) -> dict:
    if len(tuple(m.normalized_shape)) != 1:
        raise ExportError("layer norm must normalise the channel axis only")
    d = int(m.normalized_shape[0])
    gamma = _np(m.weight) if m.weight is not None else np.ones(d)
    beta = _np(m.bias) if m.bias is not None else np.zeros(d)
    return {"kind": "norm", "mode": "layer", "gamma": gamma, "beta": beta,
            "eps": float(m.eps)}


def _batchnorm_ir(m: nn.BatchNorm2d) -> dict:
    if m.running_mean is None or m.running_var is None:
        raise ExportError("batch norm without tracked statistics cannot "
                          "be exported")
    d = m.num_features
    gamma = _np(m.weight) if m.weight is not None else np.ones(d)
    beta = _np(m.bias) if m.bias is not None else np.zeros(d)
    return {"kind": "norm", "mode": "batch", "gamma": gamma, "beta": beta,
            "mu": _np(m.running_mean),
            "sigma": np.sqrt(_np(m.running_var) + float(m.eps)),
            "eps": float(m.eps)}


def _activation_ir(m) -> dict:
    if isinstance(m, nn.ReLU):
        return {"kind": "activation", "fn": "relu"}
    if isinstance(m, nn.LeakyReLU):
        return {"kind": "activation", "fn": "leaky_relu",
                "alpha": float(m.negative_slope)}
    if isinstance(m, nn.GELU):
        if m.approximate != "none":
            raise ExportError("only the exact gelu can be exported")
        return {"kind": "activation", "fn": "gelu"}
    if isinstance(m, nn.SiLU):
        return {"kind": "activation", "fn": "swish"}
    raise ExportError(f"unsupported activation {type(m).__name__}")


def _attention_ir(wrapper: SelfAttention) -> dict:
    m = wrapper.inner
    if not m.batch_first:
        raise ExportError("attention must be batch-first")
    if not m._qkv_same_embed_dim:
        raise ExportError("attention with distinct key/value widths is not "
                          "supported")
    if m.bias_k is not None or m.add_zero_attn:
        raise ExportError("attention bias_k/add_zero_attn are not supported")
    if m.dropout != 0.0:
        raise ExportError("attention dropout must be zero")
    d = m.embed_dim
    dh = m.head_dim
    ipw = _np(m.in_proj_weight)
    ipb = _np(m.in_proj_bias) if m.in_proj_bias is not None else None
    heads = []
    for h in range(m.num_heads):
        rows = slice(h * dh, (h + 1) * dh)
        head = {"w_q": ipw[rows, :].T,
                "w_k": ipw[d:2 * d][rows, :].T,
                "w_v": ipw[2 * d:][rows, :].T}
        if ipb is not None:
            head["b_q"] = ipb[:d][rows]
            head["b_k"] = ipb[d:2 * d][rows]
            head["b_v"] = ipb[2 * d:][rows]
        heads.append(head)
    ir = {"kind": "multihead_attention", "heads": heads,
          "w_u": _np(m.out_proj.weight).T}
    if m.out_proj.bias is not None:
        ir["b_u"] = _np(m.out_proj.bias)
    return ir


def to_ir(module: nn.Module) -> list:
    """Flattened layer descriptions for one module tree."""
    if isinstance(module, nn.Sequential):
        out = []
        for child in module:
            out.extend(to_ir(child))
        return out
    if isinstance(module, (nn.Identity, nn.Dropout)):
        return []
    if isinstance(module, Residual):
        return [{"kind": "residual", "ones_branch": 0,
                 "branches": [to_ir(b) for b in module.branches]}]
    if isinstance(module, SelectToken):
        return [{"kind": "token_select", "mode": "index",
                 "index": module.index}]
    if isinstance(module, SelfAttention):
        return [_attention_ir(module)]
    if isinstance(module, nn.Linear):
        return [_linear_ir(module)]
    if isinstance(module, nn.Conv2d):
        return [_conv_ir(module)]
    if isinstance(module, (nn.MaxPool2d, nn.AvgPool2d)):
        return [_pool_ir(module)]
    if isinstance(module, nn.Flatten):
        if module.start_dim != 1 or module.end_dim != -1:
            raise ExportError("flatten must collapse everything after the "
                              "batch axis")
        return [{"kind": "flatten"}]
    if isinstance(module, nn.LayerNorm):
        return [_layernorm_ir(module)]
    if isinstance(module, nn.BatchNorm2d):
        return [_batchnorm_ir(module)]
    if isinstance(module, (nn.ReLU, nn.LeakyReLU, nn.GELU, nn.SiLU)):
        return [_activation_ir(module)]
    raise ExportError(f"unsupported module {type(module).__name__}")


# --- running the torch side on token matrices -----------------------------------

def check_input_block(input_block: dict) -> dict:
    keys = set(input_block)
    if keys == {"height", "width", "channels"} or keys == {"tokens", "channels"}:
        return {k: int(v) for k, v in input_block.items()}
    raise ExportError(f"input block must give height/width/channels or "
                      f"tokens/channels, got {sorted(keys)}")


def tokens_to_batch(tokens: np.ndarray, input_block: dict) -> torch.Tensor:
    """Token matrix (t, d) to the matching single-example torch input."""
    x = np.asarray(tokens, dtype=np.float32)
    if "height" in input_block:
        h, w = input_block["height"], input_block["width"]
        c = input_block["channels"]
        return torch.from_numpy(
            np.ascontiguousarray(x.reshape(h, w, c).transpose(2, 0, 1))[None])
    return torch.from_numpy(x)[None]


def batch_to_tokens(x) -> np.ndarray:
    """Image example (c, h, w), batched or not, to a token matrix (t, c).

    2-D arrays are taken to be token matrices already.
    """
    a = _np(x) if isinstance(x, torch.Tensor) else np.asarray(x)
    if a.ndim == 4 and a.shape[0] == 1:
        a = a[0]
    if a.ndim == 3:
        c, h, w = a.shape
        return a.transpose(1, 2, 0).reshape(h * w, c).astype(np.float64)
    if a.ndim == 2:
        return a.astype(np.float64)
    raise ExportError(f"cannot tokenise an array of shape {tuple(a.shape)}")


def torch_logits(module: nn.Module, tokens: np.ndarray,
                 input_block: dict) -> np.ndarray:
    module.eval()
    with torch.no_grad():
        y = module(tokens_to_batch(tokens, input_block))
    return _np(y).reshape(-1).astype(np.float64)


def export_bundle(module: nn.Module, input_block: dict, out_dir,
                  dtype: str = "float32"):
    """Convert and write the bundle; returns (manifest path, logit count)."""
    block = check_input_block(input_block)
    module.eval()
    ir = to_ir(module)
    if not ir:
        raise ExportError("module contains no exportable layers")
    if "height" in block:
        t, d = block["height"] * block["width"], block["channels"]
    else:
        t, d = block["tokens"], block["channels"]
    with torch.no_grad():
        y = module(tokens_to_batch(np.zeros((t, d)), block))
    shape = tuple(y.shape)
    if not (shape[0] == 1 and (y.ndim == 2 or (y.ndim == 3 and shape[1] == 1))):
        raise ExportError(
            f"module must end in a single logit token, got output {shape}")
    logits = shape[-1]
    path = write_bundle(out_dir, block, logits, ir, dtype)
    return path, logits
