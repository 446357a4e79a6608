"""Writer for the bundle and grid formats pinned in FORMAT.md.

Deliberately independent of the consuming library: everything here is
derived from the format document alone so the two sides can only agree
by actually matching on bytes.
"""

import json
import zlib
from pathlib import Path

import numpy as np

DTYPES = {"float32": "<f4", "float64": "<f8"}


class ExportError(Exception):
    """A module or argument that cannot be represented in the bundle format."""


class BlobTable:
    """Accumulates named weight arrays and their manifest entries."""

    def __init__(self, dtype: str):
        if dtype not in DTYPES:
            raise ExportError(f"unsupported dtype {dtype!r}")
        self.dtype = dtype
        self.entries = {}
        self.data = {}

    def add(self, name: str, arr) -> str:
        a = np.ascontiguousarray(np.asarray(arr), dtype=DTYPES[self.dtype])
        if not np.all(np.isfinite(a)):
            raise ExportError(f"blob {name} contains non-finite values")
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


def _attn_json(head: dict, prefix: str, table: BlobTable) -> dict:
    return {"w_q": table.add(f"{prefix}.w_q", head["w_q"]),
            "w_k": table.add(f"{prefix}.w_k", head["w_k"]),
            "w_v": table.add(f"{prefix}.w_v", head["w_v"]),
            "b_q": table.maybe(f"{prefix}.b_q", head.get("b_q")),
            "b_k": table.maybe(f"{prefix}.b_k", head.get("b_k")),
            "b_v": table.maybe(f"{prefix}.b_v", head.get("b_v"))}


def layer_json(ir: dict, prefix: str, table: BlobTable) -> dict:
    """One in-memory layer description to its manifest object."""
    k = ir["kind"]
    if k == "fc":
        return {"kind": k, "w": table.add(f"{prefix}.w", ir["w"]),
                "b": table.maybe(f"{prefix}.b", ir.get("b"))}
    if k == "norm":
        return {"kind": k, "mode": ir["mode"],
                "gamma": table.add(f"{prefix}.gamma", ir["gamma"]),
                "beta": table.add(f"{prefix}.beta", ir["beta"]),
                "mu": table.maybe(f"{prefix}.mu", ir.get("mu")),
                "sigma": table.maybe(f"{prefix}.sigma", ir.get("sigma")),
                "eps": ir["eps"]}
    if k == "activation":
        return {"kind": k, "fn": ir["fn"], "alpha": ir.get("alpha", 0.01)}
    if k == "multihead_attention":
        return {"kind": k,
                "heads": [_attn_json(h, f"{prefix}.h{i}", table)
                          for i, h in enumerate(ir["heads"])],
                "w_u": table.add(f"{prefix}.w_u", ir["w_u"]),
                "b_u": table.maybe(f"{prefix}.b_u", ir.get("b_u"))}
    if k == "conv2d":
        return {"kind": k, "kernel": table.add(f"{prefix}.kernel", ir["kernel"]),
                "bias": table.maybe(f"{prefix}.bias", ir.get("bias")),
                "stride": ir["stride"], "pad": ir["pad"]}
    if k in ("maxpool2d", "avgpool2d"):
        return {"kind": k, "window": ir["window"], "stride": ir["stride"]}
    if k == "flatten":
        return {"kind": k}
    if k == "token_select":
        return {"kind": k, "mode": ir["mode"], "index": ir["index"]}
    if k == "residual":
        return {"kind": k, "ones_branch": ir.get("ones_branch", 0),
                "branches": [
                    [layer_json(sub, f"{prefix}.b{i}.{j}", table)
                     for j, sub in enumerate(chain)]
                    for i, chain in enumerate(ir["branches"])]}
    raise ExportError(f"cannot serialise layer kind {k!r}")


def write_bundle(out_dir, input_block: dict, logits: int, ir_layers: list,
                 dtype: str = "float32") -> Path:
    """Serialise the layer list; returns the manifest path."""
    root = Path(out_dir)
    (root / "weights").mkdir(parents=True, exist_ok=True)
    table = BlobTable(dtype)
    layers = [layer_json(ir, f"L{i}", table) for i, ir in enumerate(ir_layers)]
    manifest = {
        "format": "dynlin-model",
        "version": 1,
        "dtype": dtype,
        "input": dict(input_block),
        "head": {"logits": int(logits)},
        "layers": layers,
        "blobs": table.entries,
    }
    for name, raw in table.data.items():
        (root / table.entries[name]["file"]).write_bytes(raw)
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_grid(path, tokens: np.ndarray, input_block: dict):
    """Token matrix (t, d) as a delimited text grid."""
    x = np.asarray(tokens, dtype=np.float64)
    if "height" in input_block:
        header = (f"grid {input_block['height']} {input_block['width']} "
                  f"{input_block['channels']}")
        expect = (input_block["height"] * input_block["width"],
                  input_block["channels"])
    else:
        header = f"seq {input_block['tokens']} {input_block['channels']}"
        expect = (input_block["tokens"], input_block["channels"])
    if x.shape != expect:
        raise ExportError(f"grid data {x.shape} does not match {expect}")
    lines = [header]
    for row in x:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_probes(path, probes: list, extra: dict | None = None):
    """Recorded (input tokens, logits) pairs for replay checks."""
    doc = {"format": "dynlin-probes",
           "probes": [{"input": np.asarray(p["input"], dtype=np.float64).tolist(),
                       "logits": np.asarray(p["logits"], dtype=np.float64).tolist()}
                      for p in probes]}
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
