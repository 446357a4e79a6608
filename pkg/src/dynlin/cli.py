"""Command-line front end.

Exit codes are part of the contract:

* 0 success
* 1 usage error (bad flags or flag values)
* 2 missing or malformed files (models, inputs, output paths)
* 3 a capability or size limit was hit (unsupported layer, oracle cap)
* 4 a numerical guarantee failed (completeness or oracle agreement)
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .engine import (
    contribution_matrix,
    explain,
    explain_gradient,
    freeze_network,
    model_forward,
)
from .errors import (
    CapabilityError,
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
    random_attribution,
)
from .layers import ActivationParams, LayerSpec, TokenShape
from .modelio import (
    ModelGraph,
    generate_random_model,
    load_grid,
    load_model,
    random_input,
    save_grid,
    save_model,
)
from .oracle import compose_fused, oracle_explain
from .postprocess import PostConfig, postprocess

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_CAPABILITY = 3
EXIT_INTEGRITY = 4

BENCH_METHODS = ("contrib", "gradient", "gradxinput", "random")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(v: float) -> str:
    return repr(float(v))


# --- gen-model ---------------------------------------------------------------

def _parse_ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from e


def _parse_blocks(text):
    blocks = []
    for part in text.split(","):
        fields = part.split(":")
        if len(fields) != 4:
            raise UsageError(
                f"block {part!r} must be out_channels:kernel:stride:pad")
        try:
            blocks.append(tuple(int(v) for v in fields))
        except ValueError as e:
            raise UsageError(f"block {part!r} is not numeric") from e
    return tuple(blocks)


def cmd_gen_model(args) -> int:
    knobs = {}
    if args.features:
        knobs["features"] = _parse_ints(args.features)
    if args.blocks:
        knobs["blocks"] = _parse_blocks(args.blocks)
    for name in ("activation", "pool", "height", "width", "channels",
                 "classes", "patch", "dim", "heads", "hidden"):
        v = getattr(args, name)
        if v is not None:
            knobs[name] = v
    model = generate_random_model(args.template, args.seed, **knobs)
    out = Path(args.out)
    manifest = save_model(model, out, dtype=args.dtype)
    print(f"wrote {manifest}")
    if args.sample_inputs:
        rng = np.random.default_rng(args.seed + 1)
        idir = out / "inputs"
        idir.mkdir(exist_ok=True)
        for i in range(args.sample_inputs):
            p = idir / f"input_{i:03d}.grid"
            save_grid(p, random_input(model.input_shape, rng),
                      model.input_shape)
            print(f"wrote {p}")
    return EXIT_OK


# --- explain -----------------------------------------------------------------

def _attribution_shape(model: ModelGraph) -> TokenShape:
    s = model.input_shape
    return TokenShape(s.tokens, 1, s.height, s.width)


def cmd_explain(args) -> int:
    model = load_model(args.model)
    x, shape = load_grid(args.input)
    res = explain(model, x, args.class_index)
    print(f"class {res.class_index}: logit={_fmt(res.logits[res.class_index])} "
          f"attribution-sum={_fmt(res.attribution.sum())} "
          f"residual={res.completeness_residual:.3e} "
          f"relative={res.relative_residual:.3e}"
          + (" FLAGGED" if res.flagged else ""))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raw_path = out / "attribution.grid"
    save_grid(raw_path, res.attribution[:, None], _attribution_shape(model))
    print(f"wrote {raw_path}")
    if model.input_shape.height is not None:
        cfg = PostConfig(clip_negatives=not args.keep_negative,
                         quantile=args.quantile, kernel=args.smooth)
        smooth = postprocess(res.attribution, model.input_shape, cfg)
        post_path = out / "attribution_post.grid"
        save_grid(post_path, smooth.reshape(-1, 1), _attribution_shape(model))
        print(f"wrote {post_path}")
        from . import report
        heat = out / "heatmap.png"
        report.save_heatmap(heat, smooth)
        print(f"wrote {heat}")
        if args.figure:
            fig = out / "attribution.png"
            h, w = model.input_shape.with_grid()
            report.save_attribution_figure(
                fig, res.attribution.reshape(h, w), smooth,
                title=f"class {res.class_index}")
            print(f"wrote {fig}")
    return EXIT_OK


# --- verify ------------------------------------------------------------------

def cmd_verify(args) -> int:
    model = load_model(args.model)
    x, _ = load_grid(args.input)
    trace = freeze_network(model, x)
    logits = trace.output_aug[0, :-1]
    classes = ([args.class_index] if args.class_index is not None
               else range(model.logits))
    worst = 0.0
    ok = True
    for k in classes:
        m = contribution_matrix(trace, int(k))
        total = float(((m[:, :-1] * x).sum()) + m[:, -1].sum())
        target = float(logits[int(k)])
        rel = abs(total - target) / max(1.0, abs(target))
        worst = max(worst, rel)
        good = rel <= args.tolerance
        ok = ok and good
        print(f"class {k}: logit={_fmt(target)} total={_fmt(total)} "
              f"relative-residual={rel:.3e} {'ok' if good else 'BREACH'}")
    if not ok:
        print(f"verification FAILED: worst relative residual {worst:.3e} "
              f"above tolerance {args.tolerance:g}")
        return EXIT_INTEGRITY
    print(f"verified {len(list(classes))} classes "
          f"(worst relative residual {worst:.3e}, tolerance {args.tolerance:g})")
    return EXIT_OK


# --- oracle-check ------------------------------------------------------------

def cmd_oracle_check(args) -> int:
    model = load_model(args.model)
    x, _ = load_grid(args.input)
    trace = freeze_network(model, x)
    omega = compose_fused(trace.ops, cap=args.cap)
    logits = trace.output_aug[0, :-1]
    worst_row = 0.0
    worst_attr = 0.0
    for k in range(model.logits):
        engine_m = contribution_matrix(trace, k)
        attr, oracle_m = oracle_explain(model, x, k, cap=args.cap)
        worst_row = max(worst_row, float(np.max(np.abs(engine_m - oracle_m))))
        engine_attr = (engine_m[:, :-1] * x).sum(axis=1) + engine_m[:, -1]
        worst_attr = max(worst_attr, float(np.max(np.abs(engine_attr - attr))))
    dense_fwd = omega @ np.concatenate([x.ravel(order="F"), np.ones(x.shape[0])])
    fwd_gap = float(np.max(np.abs(dense_fwd[:-1] - logits)))
    print(f"row-difference={worst_row:.3e} attribution-difference={worst_attr:.3e} "
          f"forward-difference={fwd_gap:.3e}")
    if max(worst_row, worst_attr, fwd_gap) > args.tolerance:
        print(f"oracle disagreement above tolerance {args.tolerance:g}")
        return EXIT_INTEGRITY
    print(f"oracle agreement within {args.tolerance:g} "
          f"for {model.logits} classes")
    return EXIT_OK


# --- bench-faithfulness -------------------------------------------------------

def _method_attribution(method, model, x, k, rng):
    if method == "contrib":
        return explain(model, x, k).attribution
    if method == "gradient":
        return explain_gradient(model, x, k).sum(axis=1)
    if method == "gradxinput":
        return (explain_gradient(model, x, k) * x).sum(axis=1)
    if method == "random":
        return random_attribution(model.input_shape.tokens, rng)
    raise UsageError(f"unknown method {method!r}")


def cmd_bench(args) -> int:
    model = load_model(args.model)
    methods = args.methods.split(",")
    for m in methods:
        if m not in BENCH_METHODS:
            raise UsageError(
                f"unknown method {m!r}; pick from {','.join(BENCH_METHODS)}")
    inputs = sorted(Path(args.inputs).glob("*.grid"))
    if not inputs:
        raise FormatError(f"no .grid files under {args.inputs}")
    cfg = FaithfulnessConfig(subset_fraction=args.fraction, trials=args.trials,
                             baseline=args.baseline)
    rows = []
    stats = {m: [] for m in methods}
    undefined = 0
    for path in inputs:
        x, _ = load_grid(path)
        k = (args.class_index if args.class_index is not None
             else int(np.argmax(model_forward(model, x))))
        for method in methods:
            scores = []
            for s in range(args.seeds):
                rng = np.random.default_rng([args.seed, s, len(rows)])
                attr = _method_attribution(method, model, x, k, rng)
                try:
                    scores.append(faithfulness_correlation(
                        model, x, attr, k, cfg, rng=rng))
                except UndefinedCorrelationError:
                    undefined += 1
            if scores:
                stats[method].extend(scores)
                rows.append((path.name, method, k, float(np.mean(scores)),
                             float(np.std(scores)), len(scores)))
            else:
                rows.append((path.name, method, k, float("nan"), float("nan"), 0))
    header = "input\tmethod\tclass\tmean\tstd\tseeds"
    print(header)
    for r in rows:
        print(f"{r[0]}\t{r[1]}\t{r[2]}\t{r[3]:.6f}\t{r[4]:.6f}\t{r[5]}")
    print("# summary")
    for method in methods:
        vals = stats[method]
        if vals:
            print(f"summary\t{method}\t{np.mean(vals):.6f}\t{np.std(vals):.6f}")
        else:
            print(f"summary\t{method}\tundefined\tundefined")
    if undefined:
        print(f"# {undefined} correlations were undefined (zero variance)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        tsv = out / "bench.tsv"
        with tsv.open("w") as f:
            f.write(header + "\n")
            for r in rows:
                f.write(f"{r[0]}\t{r[1]}\t{r[2]}\t{r[3]:.6f}\t{r[4]:.6f}\t{r[5]}\n")
        print(f"wrote {tsv}")
        from . import report
        chart = out / "bench.png"
        report.save_bench_chart(chart, stats)
        print(f"wrote {chart}")
    return EXIT_OK


# --- demo-gelu ---------------------------------------------------------------

def cmd_demo_gelu(args) -> int:
    try:
        points = [float(v) for v in args.points.split(",")]
    except ValueError as e:
        raise UsageError(f"bad --points {args.points!r}") from e
    model = ModelGraph(
        layers=[LayerSpec("activation", ActivationParams("gelu"))],
        input_shape=TokenShape(1, 1), logits=1)
    print("scalar gelu unit: frozen multiplier vs gradient")
    print("x\tvalue\tmultiplier\tmultiplier*x\tgradient\tgradient*x")
    lines = []
    for x0 in points:
        x = np.array([[x0]])
        res = explain(model, x, 0)
        mult = float(res.weight_part[0, 0])
        grad = float(explain_gradient(model, x, 0)[0, 0])
        value = float(res.logits[0])
        line = (f"{x0:g}\t{value:.10g}\t{mult:.10g}\t{mult * x0:.10g}"
                f"\t{grad:.10g}\t{grad * x0:.10g}")
        print(line)
        lines.append(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        tsv = out / "demo.tsv"
        tsv.write_text(
            "x\tvalue\tmultiplier\tmultiplier*x\tgradient\tgradient*x\n"
            + "\n".join(lines) + "\n")
        print(f"wrote {tsv}")
        from . import report
        fig = out / "gelu.png"
        report.save_gelu_figure(fig, points)
        print(f"wrote {fig}")
    return EXIT_OK


# --- wiring ---------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="dynlin",
                description="exact per-token attributions by freezing a "
                            "network into one linear map")
    p.add_argument("--verbose", action="store_true", help="log diagnostics")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-model", help="write a random model bundle")
    g.add_argument("--template", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--dtype", default=None, choices=["float32", "float64"])
    g.add_argument("--sample-inputs", type=int, default=0)
    g.add_argument("--features")
    g.add_argument("--blocks")
    g.add_argument("--activation")
    g.add_argument("--pool")
    for name in ("height", "width", "channels", "classes", "patch", "dim",
                 "heads", "hidden"):
        g.add_argument(f"--{name}", type=int, default=None)
    g.set_defaults(func=cmd_gen_model)

    e = sub.add_parser("explain", help="attribute one input's logit to tokens")
    e.add_argument("--model", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--class", dest="class_index", type=int, default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--keep-negative", action="store_true")
    e.add_argument("--quantile", type=float, default=0.99)
    e.add_argument("--smooth", type=int, default=3)
    e.add_argument("--figure", action="store_true",
                   help="also draw the raw/post side-by-side figure")
    e.set_defaults(func=cmd_explain)

    v = sub.add_parser("verify", help="check contributions sum to each logit")
    v.add_argument("--model", required=True)
    v.add_argument("--input", required=True)
    v.add_argument("--class", dest="class_index", type=int, default=None)
    v.add_argument("--tolerance", type=float, default=1e-6)
    v.set_defaults(func=cmd_verify)

    o = sub.add_parser("oracle-check",
                       help="compare the engine against dense matrices")
    o.add_argument("--model", required=True)
    o.add_argument("--input", required=True)
    o.add_argument("--tolerance", type=float, default=1e-8)
    o.add_argument("--cap", type=int, default=4096)
    o.set_defaults(func=cmd_oracle_check)

    b = sub.add_parser("bench-faithfulness",
                       help="perturbation benchmark over an input directory")
    b.add_argument("--model", required=True)
    b.add_argument("--inputs", required=True)
    b.add_argument("--methods", default="contrib,gradient,gradxinput,random")
    b.add_argument("--class", dest="class_index", type=int, default=None)
    b.add_argument("--trials", type=int, default=30)
    b.add_argument("--fraction", type=float, default=0.2)
    b.add_argument("--baseline", type=float, default=0.0)
    b.add_argument("--seeds", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("demo-gelu",
                       help="show the multiplier/gradient split on one unit")
    d.add_argument("--points", default="-4,-0.75")
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_demo_gelu)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:   # --help
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as e:
        print(f"parameter error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, OSError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_IO
    except (CapabilityError, ResourceError) as e:
        print(f"capability error: {e}", file=sys.stderr)
        return EXIT_CAPABILITY
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
