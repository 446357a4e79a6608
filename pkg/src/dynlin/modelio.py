"""Portable model bundles and delimited input/output files.

A bundle is a directory holding ``manifest.json`` plus one raw binary
file per weight tensor under ``weights/``.  The manifest is plain JSON
(human-readable), the blobs are headerless little-endian IEEE-754
arrays in C order, each guarded by a CRC-32 recorded in the manifest.
``FORMAT.md`` at the repository root documents every byte.

Loading always widens to float64; saving can narrow to float32.
"""

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    FormatError,
    MissingBlobError,
    ParameterError,
    ShapeChainError,
    ShapeError,
    UnknownKindError,
    VersionError,
)
from .layers import (
    ActivationParams,
    AttentionParams,
    ConvParams,
    FCParams,
    LayerSpec,
    MultiHeadParams,
    NormParams,
    PoolParams,
    ResidualParams,
    SoftmaxParams,
    TokenSelectParams,
    TokenShape,
    layer_out_shape,
)

FORMAT_TAG = "dynlin-model"
FORMAT_VERSION = 1
DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class ModelGraph:
    layers: list
    input_shape: TokenShape
    logits: int
    dtype: str = "float64"

    def shape_chain(self) -> list:
        """Shapes flowing into each layer plus the final output shape."""
        shapes = [self.input_shape]
        for i, spec in enumerate(self.layers):
            try:
                shapes.append(layer_out_shape(spec, shapes[-1]))
            except ShapeError as e:
                raise ShapeChainError(f"layer {i} ({spec.kind}): {e}") from e
        return shapes

    def validate(self):
        final = self.shape_chain()[-1]
        if final.tokens != 1 or final.channels != self.logits:
            raise ShapeChainError(
                f"model must end with 1 token of {self.logits} channels, "
                f"got {final.tokens} tokens of {final.channels}"
            )
        return self


# --- blob store ---------------------------------------------------------------

class _BlobWriter:
    def __init__(self, dtype: str):
        if dtype not in DTYPES:
            raise ParameterError(f"unsupported dtype {dtype!r}")
        self.dtype = dtype
        self.entries = {}
        self.data = {}

    def add(self, name: str, arr) -> str:
        a = np.ascontiguousarray(np.asarray(arr), dtype=DTYPES[self.dtype])
        raw = a.tobytes()
        self.entries[name] = {
            "file": f"weights/{name}.bin",
            "shape": list(a.shape),
            "crc32": f"{zlib.crc32(raw) & 0xffffffff:08x}",
        }
        self.data[name] = raw
        return name

    def maybe(self, name: str, arr):
        return None if arr is None else self.add(name, arr)


class _BlobReader:
    def __init__(self, root: Path, entries: dict, dtype: str):
        self.root = root
        self.entries = entries
        self.dtype = dtype

    def get(self, name, context: str):
        if name is None:
            return None
        if not isinstance(name, str) or name not in self.entries:
            raise MissingBlobError(f"{context}: no blob named {name!r} in manifest")
        entry = self.entries[name]
        path = self.root / entry["file"]
        if not path.is_file():
            raise MissingBlobError(f"{context}: blob file {entry['file']} is missing")
        raw = path.read_bytes()
        crc = f"{zlib.crc32(raw) & 0xffffffff:08x}"
        if crc != entry["crc32"]:
            raise ChecksumError(
                f"{context}: blob {name} checksum {crc} != manifest {entry['crc32']}"
            )
        shape = tuple(entry["shape"])
        arr = np.frombuffer(raw, dtype=DTYPES[self.dtype])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(
                f"{context}: blob {name} holds {arr.size} values, "
                f"manifest shape is {list(shape)}"
            )
        out = arr.reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(out)):
            raise FormatError(f"{context}: blob {name} contains non-finite values")
        return out


# --- layer (de)serialisation ---------------------------------------------------

def _layer_to_json(spec: LayerSpec, prefix: str, w: _BlobWriter) -> dict:
    p = spec.params
    k = spec.kind
    if k == "fc":
        return {"kind": k, "w": w.add(f"{prefix}.w", p.w),
                "b": w.add(f"{prefix}.b", p.b)}
    if k == "norm":
        return {"kind": k, "mode": p.mode,
                "gamma": w.add(f"{prefix}.gamma", p.gamma),
                "beta": w.add(f"{prefix}.beta", p.beta),
                "mu": w.maybe(f"{prefix}.mu", p.mu),
                "sigma": w.maybe(f"{prefix}.sigma", p.sigma),
                "eps": p.eps}
    if k == "activation":
        return {"kind": k, "fn": p.fn, "alpha": p.alpha}
    if k == "attention":
        return {"kind": k, **_attn_to_json(p, prefix, w)}
    if k == "multihead_attention":
        return {"kind": k,
                "heads": [_attn_to_json(h, f"{prefix}.h{i}", w)
                          for i, h in enumerate(p.heads)],
                "w_u": w.add(f"{prefix}.w_u", p.w_u),
                "b_u": w.maybe(f"{prefix}.b_u", p.b_u)}
    if k == "conv2d":
        return {"kind": k, "kernel": w.add(f"{prefix}.kernel", p.kernel),
                "bias": w.maybe(f"{prefix}.bias", p.bias),
                "stride": p.stride, "pad": p.pad}
    if k in ("maxpool2d", "avgpool2d"):
        return {"kind": k, "window": p.window, "stride": p.stride}
    if k == "flatten":
        return {"kind": k}
    if k == "token_select":
        return {"kind": k, "mode": p.mode, "index": p.index}
    if k == "residual":
        return {"kind": k, "ones_branch": p.ones_branch,
                "branches": [
                    [_layer_to_json(sub, f"{prefix}.b{i}.{j}", w)
                     for j, sub in enumerate(chain)]
                    for i, chain in enumerate(p.branches)]}
    if k == "softmax":
        return {"kind": k}
    raise UnknownKindError(f"cannot serialise layer kind {k!r}")


def _attn_to_json(p: AttentionParams, prefix: str, w: _BlobWriter) -> dict:
    return {"w_q": w.add(f"{prefix}.w_q", p.w_q),
            "w_k": w.add(f"{prefix}.w_k", p.w_k),
            "w_v": w.add(f"{prefix}.w_v", p.w_v),
            "b_q": w.maybe(f"{prefix}.b_q", p.b_q),
            "b_k": w.maybe(f"{prefix}.b_k", p.b_k),
            "b_v": w.maybe(f"{prefix}.b_v", p.b_v)}


def _attn_from_json(entry: dict, r: _BlobReader, ctx: str) -> AttentionParams:
    return AttentionParams(
        w_q=r.get(entry.get("w_q"), ctx), w_k=r.get(entry.get("w_k"), ctx),
        w_v=r.get(entry.get("w_v"), ctx), b_q=r.get(entry.get("b_q"), ctx),
        b_k=r.get(entry.get("b_k"), ctx), b_v=r.get(entry.get("b_v"), ctx))


def _layer_from_json(entry: dict, r: _BlobReader, ctx: str) -> LayerSpec:
    if not isinstance(entry, dict) or "kind" not in entry:
        raise FormatError(f"{ctx}: layer entry must be an object with a kind")
    k = entry["kind"]
    if k == "fc":
        w_arr = r.get(entry.get("w"), ctx)
        b_name = entry.get("b")
        b_arr = (np.zeros(w_arr.shape[1]) if b_name is None
                 else r.get(b_name, ctx))
        return LayerSpec(k, FCParams(w=w_arr, b=b_arr))
    if k == "norm":
        return LayerSpec(k, NormParams(
            mode=entry.get("mode", "layer"),
            gamma=r.get(entry.get("gamma"), ctx),
            beta=r.get(entry.get("beta"), ctx),
            mu=r.get(entry.get("mu"), ctx),
            sigma=r.get(entry.get("sigma"), ctx),
            eps=float(entry.get("eps", 1e-5))))
    if k == "activation":
        return LayerSpec(k, ActivationParams(
            fn=entry.get("fn", ""), alpha=float(entry.get("alpha", 0.01))))
    if k == "attention":
        return LayerSpec(k, _attn_from_json(entry, r, ctx))
    if k == "multihead_attention":
        heads = [_attn_from_json(h, r, f"{ctx}.h{i}")
                 for i, h in enumerate(entry.get("heads", []))]
        if not heads:
            raise FormatError(f"{ctx}: multi-head layer lists no heads")
        return LayerSpec(k, MultiHeadParams(
            heads=heads, w_u=r.get(entry.get("w_u"), ctx),
            b_u=r.get(entry.get("b_u"), ctx)))
    if k == "conv2d":
        return LayerSpec(k, ConvParams(
            kernel=r.get(entry.get("kernel"), ctx),
            bias=r.get(entry.get("bias"), ctx),
            stride=int(entry.get("stride", 1)), pad=int(entry.get("pad", 0))))
    if k in ("maxpool2d", "avgpool2d"):
        return LayerSpec(k, PoolParams(
            window=int(entry.get("window", 2)),
            stride=int(entry.get("stride", entry.get("window", 2)))))
    if k == "flatten":
        return LayerSpec(k, None)
    if k == "token_select":
        return LayerSpec(k, TokenSelectParams(
            mode=entry.get("mode", "index"), index=int(entry.get("index", 0))))
    if k == "residual":
        branches = [
            [_layer_from_json(sub, r, f"{ctx}.b{i}.{j}")
             for j, sub in enumerate(chain)]
            for i, chain in enumerate(entry.get("branches", []))]
        if not branches:
            raise FormatError(f"{ctx}: residual layer lists no branches")
        return LayerSpec(k, ResidualParams(
            branches=branches, ones_branch=int(entry.get("ones_branch", 0))))
    if k == "softmax":
        return LayerSpec(k, SoftmaxParams())
    raise UnknownKindError(f"{ctx}: unknown layer kind {k!r}")


# --- bundle save / load ---------------------------------------------------------

def save_model(model: ModelGraph, path, dtype: str | None = None):
    """Write the bundle directory; returns the manifest path."""
    root = Path(path)
    (root / "weights").mkdir(parents=True, exist_ok=True)
    writer = _BlobWriter(dtype or model.dtype)
    layers_json = [_layer_to_json(spec, f"L{i}", writer)
                   for i, spec in enumerate(model.layers)]
    s = model.input_shape
    if s.height is not None:
        input_json = {"height": s.height, "width": s.width, "channels": s.channels}
    else:
        input_json = {"tokens": s.tokens, "channels": s.channels}
    manifest = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "dtype": writer.dtype,
        "input": input_json,
        "head": {"logits": model.logits},
        "layers": layers_json,
        "blobs": writer.entries,
    }
    for name, raw in writer.data.items():
        (root / writer.entries[name]["file"]).write_bytes(raw)
    out = root / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_model(path) -> ModelGraph:
    """Read a bundle from its directory or its manifest path."""
    p = Path(path)
    manifest_path = p / "manifest.json" if p.is_dir() else p
    if not manifest_path.is_file():
        raise FormatError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: not valid JSON ({e})") from e
    if manifest.get("format") != FORMAT_TAG:
        raise FormatError(
            f"{manifest_path}: format tag {manifest.get('format')!r}, "
            f"expected {FORMAT_TAG!r}"
        )
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(
            f"{manifest_path}: version {manifest.get('version')!r} is not "
            f"supported (this reader handles {FORMAT_VERSION})"
        )
    dtype = manifest.get("dtype", "float64")
    if dtype not in DTYPES:
        raise FormatError(f"{manifest_path}: unknown dtype {dtype!r}")
    reader = _BlobReader(manifest_path.parent, manifest.get("blobs", {}), dtype)
    inp = manifest.get("input", {})
    try:
        if "height" in inp:
            shape = TokenShape(int(inp["height"]) * int(inp["width"]),
                               int(inp["channels"]),
                               int(inp["height"]), int(inp["width"]))
        else:
            shape = TokenShape(int(inp["tokens"]), int(inp["channels"]))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{manifest_path}: bad input block ({e})") from e
    layers = [_layer_from_json(entry, reader, f"layer {i}")
              for i, entry in enumerate(manifest.get("layers", []))]
    head = manifest.get("head", {})
    model = ModelGraph(layers=layers, input_shape=shape,
                       logits=int(head.get("logits", 0)), dtype=dtype)
    model.validate()
    return model


# --- delimited grids -------------------------------------------------------------

def save_grid(path, x, shape: TokenShape):
    """Token matrix as whitespace-delimited text, one token per line."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (shape.tokens, shape.channels):
        raise ShapeError(f"grid data {x.shape} does not match {shape}")
    if shape.height is not None:
        header = f"grid {shape.height} {shape.width} {shape.channels}"
    else:
        header = f"seq {shape.tokens} {shape.channels}"
    lines = [header]
    for row in x:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_grid(path):
    """Returns (token matrix, TokenShape).  Raises FormatError with a line number."""
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"no input file at {p}")
    lines = p.read_text().splitlines()
    if not lines:
        raise FormatError(f"{p}: empty file")
    head = lines[0].split()
    if len(head) == 4 and head[0] == "grid":
        h, w, d = (int(v) for v in head[1:])
        shape = TokenShape(h * w, d, h, w)
    elif len(head) == 3 and head[0] == "seq":
        t, d = (int(v) for v in head[1:])
        shape = TokenShape(t, d)
    else:
        raise FormatError(f"{p}:1: header must be 'grid h w d' or 'seq t d'")
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != shape.channels:
            raise FormatError(
                f"{p}:{n}: expected {shape.channels} values, got {len(vals)}")
        try:
            rows.append([float(v) for v in vals])
        except ValueError as e:
            raise FormatError(f"{p}:{n}: {e}") from e
    if len(rows) != shape.tokens:
        raise FormatError(
            f"{p}: expected {shape.tokens} token lines, got {len(rows)}")
    x = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{p}: contains non-finite values")
    return x, shape


def random_input(shape: TokenShape, rng) -> np.ndarray:
    return rng.standard_normal((shape.tokens, shape.channels))


# --- random model templates -------------------------------------------------------

def _uniform(rng, shape, fan_in):
    a = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-a, a, shape)


def _mlp(rng, features=(4, 8, 3), activation="gelu"):
    feats = [int(f) for f in features]
    if len(feats) < 2:
        raise ParameterError("an mlp needs at least input and output widths")
    layers = []
    for i in range(len(feats) - 1):
        layers.append(LayerSpec("fc", FCParams(
            w=_uniform(rng, (feats[i], feats[i + 1]), feats[i]) * 2.0,
            b=rng.uniform(-0.3, 0.3, feats[i + 1]))))
        if i < len(feats) - 2:
            layers.append(LayerSpec("activation", ActivationParams(activation)))
    return ModelGraph(layers, TokenShape(1, feats[0]), feats[-1])


def _cnn(rng, height=8, width=8, channels=1, blocks=((4, 3, 1, 1),),
         pool="max", activation="relu", classes=3):
    layers = []
    shape = TokenShape(height * width, channels, height, width)
    cur = shape
    for out_ch, k, stride, pad in blocks:
        layers.append(LayerSpec("conv2d", ConvParams(
            kernel=_uniform(rng, (k, k, cur.channels, out_ch),
                            k * k * cur.channels) * 2.0,
            bias=rng.uniform(-0.3, 0.3, out_ch), stride=stride, pad=pad)))
        layers.append(LayerSpec("activation", ActivationParams(activation)))
        layers.append(LayerSpec(f"{pool}pool2d", PoolParams(2, 2)))
        for spec in layers[-3:]:
            cur = layer_out_shape(spec, cur)
    layers.append(LayerSpec("flatten", None))
    cur = layer_out_shape(layers[-1], cur)
    layers.append(LayerSpec("fc", FCParams(
        w=_uniform(rng, (cur.channels, classes), cur.channels) * 2.0,
        b=rng.uniform(-0.3, 0.3, classes))))
    return ModelGraph(layers, shape, classes)


def _vit_block(rng, height=6, width=6, channels=2, patch=3, dim=8, heads=2,
               hidden=16, classes=3):
    if dim % heads:
        raise ParameterError(f"width {dim} does not split into {heads} heads")
    d_h = dim // heads

    def attn():
        return AttentionParams(
            w_q=_uniform(rng, (dim, d_h), dim), w_k=_uniform(rng, (dim, d_h), dim),
            w_v=_uniform(rng, (dim, d_h), dim),
            b_q=rng.uniform(-0.1, 0.1, d_h), b_k=rng.uniform(-0.1, 0.1, d_h),
            b_v=rng.uniform(-0.1, 0.1, d_h))

    def ln():
        return LayerSpec("norm", NormParams(
            mode="layer", gamma=rng.uniform(0.6, 1.4, dim),
            beta=rng.uniform(-0.2, 0.2, dim), eps=1e-5))

    layers = [
        LayerSpec("conv2d", ConvParams(
            kernel=_uniform(rng, (patch, patch, channels, dim),
                            patch * patch * channels) * 2.0,
            bias=rng.uniform(-0.2, 0.2, dim), stride=patch, pad=0)),
        LayerSpec("residual", ResidualParams(branches=[[], [
            ln(),
            LayerSpec("multihead_attention", MultiHeadParams(
                heads=[attn() for _ in range(heads)],
                w_u=_uniform(rng, (dim, dim), dim),
                b_u=rng.uniform(-0.1, 0.1, dim))),
        ]], ones_branch=0)),
        LayerSpec("residual", ResidualParams(branches=[[], [
            ln(),
            LayerSpec("fc", FCParams(w=_uniform(rng, (dim, hidden), dim) * 2.0,
                                     b=rng.uniform(-0.2, 0.2, hidden))),
            LayerSpec("activation", ActivationParams("gelu")),
            LayerSpec("fc", FCParams(w=_uniform(rng, (hidden, dim), hidden) * 2.0,
                                     b=rng.uniform(-0.2, 0.2, dim))),
        ]], ones_branch=0)),
        ln(),
        LayerSpec("token_select", TokenSelectParams("index", 0)),
        LayerSpec("fc", FCParams(w=_uniform(rng, (dim, classes), dim) * 2.0,
                                 b=rng.uniform(-0.3, 0.3, classes))),
    ]
    return ModelGraph(layers, TokenShape(height * width, channels, height, width),
                      classes)


TEMPLATES = {"mlp": _mlp, "cnn": _cnn, "vit-block": _vit_block}


def generate_random_model(template: str, seed: int, **knobs) -> ModelGraph:
    if template not in TEMPLATES:
        raise ParameterError(
            f"unknown template {template!r}; pick one of {sorted(TEMPLATES)}")
    rng = np.random.default_rng(seed)
    model = TEMPLATES[template](rng, **knobs)
    return model.validate()
