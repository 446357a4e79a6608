"""Command line entry points for converting torch models to bundles."""

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .bundle import ExportError, write_grid, write_probes
from .convert import batch_to_tokens, export_bundle, torch_logits
from .training import build_attention_demo, build_toy_mlp, train_toy_cnn


def cmd_export(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        print(f"no checkpoint at {path}", file=sys.stderr)
        return 2
    module = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(module, torch.nn.Module):
        print("checkpoint does not hold a torch module", file=sys.stderr)
        return 2
    if args.height is not None:
        if args.width is None:
            print("--height needs --width", file=sys.stderr)
            return 1
        block = {"height": args.height, "width": args.width,
                 "channels": args.channels}
    else:
        block = {"tokens": args.tokens, "channels": args.channels}
    manifest, logits = export_bundle(module, block, args.out, args.dtype)
    print(f"wrote {manifest} ({logits} logits)")
    return 0


def _probe_entries(module, token_inputs, block):
    return [{"input": tok, "logits": torch_logits(module, tok, block)}
            for tok in token_inputs]


def cmd_make_fixture(args) -> int:
    out = Path(args.out)
    if args.name == "toy_cnn":
        model, acc, x_test, y_test = train_toy_cnn(seed=args.seed,
                                                   steps=args.steps)
        block = {"height": 8, "width": 8, "channels": 1}
        picks = []
        for cls in ((0, 1, 2) * args.probes)[:args.probes]:  # class round-robin
            hit = next((i for i in range(len(y_test))
                        if int(y_test[i]) == cls and i not in picks), None)
            picks.append(hit if hit is not None
                         else next(i for i in range(len(y_test))
                                   if i not in picks))
        tokens = [batch_to_tokens(x_test[i]) for i in picks]
        extra = {"accuracy": round(acc, 4)}
    elif args.name == "toy_mlp_gelu":
        model = build_toy_mlp(args.seed)
        block = {"tokens": 1, "channels": 4}
        rng = np.random.default_rng(args.seed)
        tokens = [rng.standard_normal((1, 4)) for _ in range(args.probes)]
        extra = {}
    elif args.name == "attention_demo":
        model = build_attention_demo(args.seed)
        block = {"tokens": 5, "channels": 4}
        rng = np.random.default_rng(args.seed)
        tokens = [rng.standard_normal((5, 4)) for _ in range(args.probes)]
        extra = {}
    else:
        print(f"unknown fixture {args.name!r}", file=sys.stderr)
        return 1
    manifest, logits = export_bundle(model, block, out, args.dtype)
    write_probes(out / "probes.json", _probe_entries(model, tokens, block),
                 extra)
    inputs_dir = out / "inputs"
    inputs_dir.mkdir(exist_ok=True)
    for i, tok in enumerate(tokens):
        write_grid(inputs_dir / f"probe_{i:03d}.grid", tok, block)
    note = f" accuracy={extra['accuracy']}" if "accuracy" in extra else ""
    print(f"wrote {manifest} ({logits} logits, {len(tokens)} probes{note})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dynlin-export",
        description="convert small torch models into dynlin bundles")
    sub = ap.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("export", help="convert a saved torch module")
    ex.add_argument("--checkpoint", required=True,
                    help="torch.save()d nn.Module file")
    ex.add_argument("--out", required=True)
    ex.add_argument("--dtype", default="float32",
                    choices=("float32", "float64"))
    shape = ex.add_mutually_exclusive_group(required=True)
    shape.add_argument("--height", type=int)
    shape.add_argument("--tokens", type=int)
    ex.add_argument("--width", type=int)
    ex.add_argument("--channels", type=int, required=True)
    ex.set_defaults(fn=cmd_export)

    fx = sub.add_parser("make-fixture",
                        help="build, train and export a reference model")
    fx.add_argument("--name", required=True,
                    choices=("toy_cnn", "toy_mlp_gelu", "attention_demo"))
    fx.add_argument("--out", required=True)
    fx.add_argument("--seed", type=int, default=0)
    fx.add_argument("--steps", type=int, default=300)
    fx.add_argument("--probes", type=int, default=6)
    fx.add_argument("--dtype", default="float32",
                    choices=("float32", "float64"))
    fx.set_defaults(fn=cmd_make_fixture)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ExportError as e:
        print(f"export failed: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"file error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
