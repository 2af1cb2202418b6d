"""Command-line front end: profile / check / apply / bench.

Exit codes
----------
0   success (for ``check``: every selected case passed)
1   validation failure: bad flags, malformed configs or weight bundles,
    shape/channel mismatches, failed checks
2   I/O failure: missing or unreadable files, truncated volume payloads

Only the standard library is imported at module level.  The numeric
modules load lazily inside the handlers so that ``bench`` can pin the
BLAS/OpenMP thread-pool environment variables *before* numpy starts.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_IO = 2

_VARIANTS = ("full", "fwsc", "dwsc", "fdwsc")

# Every allocator that might spin up a thread pool under numpy.  Set before
# the first numpy import or they are ignored.
_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class _UsageError(Exception):
    """Bad command-line input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; our contract reserves 2
    # for I/O problems, so route parse errors through _UsageError instead.
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="sepconv3d",
        description="Cost-volume 3D convolution profiler and reference runner.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("profile", help="per-layer MAC/parameter report for a network config")
    p.add_argument("--config", required=True, help="path to a network config (JSON)")
    p.add_argument("--variant", choices=_VARIANTS,
                   help="rewrite every conv3d layer to this variant before counting")
    p.add_argument("--baseline", choices=_VARIANTS,
                   help="also count this variant and report reduction factors")
    p.add_argument("--input-size", metavar="CxDxHxW",
                   help="override the config's input extents")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")

    p = sub.add_parser("check", help="run the self-verification catalog")
    p.add_argument("--filter", default=None,
                   help="only run cases whose name contains this substring")
    p.add_argument("--seeds", type=int, default=8,
                   help="seeds per composition case (default 8)")

    p = sub.add_parser("apply", help="run one layer over a volume file")
    p.add_argument("--op", choices=_VARIANTS, required=True)
    p.add_argument("--weights", required=True, help="weight bundle (JSON sidecar path)")
    p.add_argument("--input", required=True, help="input volume (.sv3d)")
    p.add_argument("--output", required=True, help="output volume (.sv3d)")
    p.add_argument("--stride", type=int, default=1)

    p = sub.add_parser("bench", help="wall-time micro-benchmark on synthetic data")
    p.add_argument("--op", choices=_VARIANTS, help="single op to time")
    p.add_argument("--compare", metavar="OP[,OP...]",
                   help="comma-separated ops timed on identical input")
    p.add_argument("--size", required=True, metavar="CxDxHxW",
                   help="input extents, e.g. 32x48x60x132")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out-channels", type=int, default=None,
                   help="output channels (default: same as input)")
    p.add_argument("--iters", type=int, default=10, help="timed iterations (min 3)")
    p.add_argument("--warmup", type=int, default=2, help="untimed warmup passes (min 1)")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/OpenMP threads to pin (default 1)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")

    return parser


def _parse_size(text: str):
    parts = text.lower().split("x")
    if len(parts) != 4:
        raise _UsageError(f"invalid size {text!r}: expected CxDxHxW, e.g. 32x48x60x132")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise _UsageError(f"invalid size {text!r}: extents must be integers") from None
    if any(n < 1 for n in dims):
        raise _UsageError(f"invalid size {text!r}: extents must be >= 1")
    return dims


def _pin_threads(n: int) -> None:
    n = max(1, int(n))
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------

def _fmt_shape(shape) -> str:
    return "x".join(str(n) for n in shape)


def _profile_report(cfg, net, base):
    layers = []
    for lc in net.layers:
        layers.append({
            "id": lc.layer.id,
            "kind": lc.layer.kind,
            "variant": lc.layer.variant,
            "out_shape": list(lc.out_shape),
            "params": lc.cost.total_params,
            "macs": lc.cost.total_macs,
        })
    macs = net.total.total_macs
    params = net.total.total_params
    report = {
        "name": cfg.name,
        "input": list(cfg.input),
        "conv3d_layers": cfg.n_conv3d,
        "deconv3d_layers": cfg.n_deconv3d,
        "layers": layers,
        "totals": {
            "params": params,
            "macs": macs,
            "gmacs": float(f"{macs / 1e9:.2f}"),
            "params_m": float(f"{params / 1e6:.2f}"),
        },
    }
    if base is not None:
        from . import costs as _costs

        red = _costs.reduction_report(base.total, net.total)
        report["reduction_vs_full"] = {
            "ops": float(f"{red['ops']:.1f}"),
            "params": float(f"{red['params']:.1f}"),
        }
    if cfg.backbone is not None:
        bb = cfg.backbone
        report["share_of_network"] = {
            "ops_pct": float(f"{100.0 * macs / (macs + bb.macs):.2f}"),
            "params_pct": float(f"{100.0 * params / (params + bb.params):.2f}"),
        }
    return report


def _emit_profile_table(report, out) -> None:
    print(f"network: {report['name']}    input: {_fmt_shape(report['input'])}", file=out)
    print(f"layers: {report['conv3d_layers']} conv3d + {report['deconv3d_layers']} deconv3d",
          file=out)
    rows = [("id", "kind", "variant", "out shape", "params", "MACs")]
    for lay in report["layers"]:
        rows.append((lay["id"], lay["kind"], lay["variant"], _fmt_shape(lay["out_shape"]),
                     str(lay["params"]), str(lay["macs"])))
    tot = report["totals"]
    rows.append(("total", "", "", "", str(tot["params"]), str(tot["macs"])))
    widths = [max(len(r[i]) for r in rows) for i in range(6)]
    for idx, row in enumerate(rows):
        line = "  ".join(
            cell.ljust(widths[i]) if i < 4 else cell.rjust(widths[i])
            for i, cell in enumerate(row)
        )
        print(line.rstrip(), file=out)
        if idx == 0:
            print("  ".join("-" * w for w in widths), file=out)
    print(f"total: {tot['gmacs']:.2f} GMACs, {tot['params_m']:.2f} M params", file=out)
    red = report.get("reduction_vs_full")
    if red is not None:
        print(f"reduction vs full: ops {red['ops']:.1f}x, params {red['params']:.1f}x", file=out)
    share = report.get("share_of_network")
    if share is not None:
        print(f"share of whole network: ops {share['ops_pct']:.2f}%, "
              f"params {share['params_pct']:.2f}%", file=out)


def _emit_profile_csv(report, out) -> None:
    import csv

    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["id", "kind", "variant", "out_c", "out_d", "out_h", "out_w",
                     "params", "macs"])
    for lay in report["layers"]:
        writer.writerow([lay["id"], lay["kind"], lay["variant"], *lay["out_shape"],
                         lay["params"], lay["macs"]])
    tot = report["totals"]
    writer.writerow(["total", "", "", "", "", "", "", tot["params"], tot["macs"]])
    writer.writerow(["gmacs", "", "", "", "", "", "", "", f"{tot['gmacs']:.2f}"])
    writer.writerow(["params_m", "", "", "", "", "", "", "", f"{tot['params_m']:.2f}"])
    red = report.get("reduction_vs_full")
    if red is not None:
        writer.writerow(["reduction_ops", "", "", "", "", "", "", "", f"{red['ops']:.1f}"])
        writer.writerow(["reduction_params", "", "", "", "", "", "", "", f"{red['params']:.1f}"])
    share = report.get("share_of_network")
    if share is not None:
        writer.writerow(["share_ops_pct", "", "", "", "", "", "", "", f"{share['ops_pct']:.2f}"])
        writer.writerow(["share_params_pct", "", "", "", "", "", "", "",
                         f"{share['params_pct']:.2f}"])


def _cmd_profile(args) -> int:
    from dataclasses import replace

    from . import costs, netcfg
    from .volume import Shape4

    cfg = netcfg.load_config(args.config)
    if args.input_size:
        dims = _parse_size(args.input_size)
        cfg = replace(cfg, input=Shape4(*dims))
        netcfg.validate(cfg)
    if args.variant:
        cfg = netcfg.substitute_variant(cfg, args.variant)

    net = costs.count_network(cfg)
    base = None
    if args.baseline:
        base_cfg = netcfg.substitute_variant(cfg, args.baseline)
        base = costs.count_network(base_cfg)

    report = _profile_report(cfg, net, base)
    if args.format == "json":
        print(json.dumps(report, indent=2))
    elif args.format == "csv":
        _emit_profile_csv(report, sys.stdout)
    else:
        _emit_profile_table(report, sys.stdout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

def _cmd_check(args) -> int:
    from .verify import run_catalog

    if args.seeds < 1:
        raise _UsageError("--seeds must be >= 1")
    reports = run_catalog(args.filter, seeds=args.seeds)
    if not reports:
        print(f"error: no verification cases match filter {args.filter!r}", file=sys.stderr)
        return EXIT_FAIL

    name_w = max(len(r.case) for r in reports)
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        line = f"{r.case:<{name_w}}  {status}  max_rel={r.max_rel_err:.3e}"
        if r.note:
            line += f"  {r.note}"
        print(line)
    n_pass = sum(1 for r in reports if r.passed)
    print(f"{n_pass}/{len(reports)} checks passed")
    return EXIT_OK if n_pass == len(reports) else EXIT_FAIL


# ---------------------------------------------------------------------------
# apply
# ---------------------------------------------------------------------------

def _cmd_apply(args) -> int:
    from .kernels import forward, load_bank
    from .volume import load_volume, save_volume

    bank = load_bank(args.weights)
    if bank.variant != args.op:
        raise _UsageError(
            f"weight bundle holds a {bank.variant!r} layer but --op is {args.op!r}"
        )
    x = load_volume(args.input)
    y = forward(x, bank, stride=args.stride)
    save_volume(args.output, y)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _cmd_bench(args) -> int:
    if args.op and args.compare:
        raise _UsageError("pass either --op or --compare, not both")
    if args.compare:
        ops = [s.strip() for s in args.compare.split(",") if s.strip()]
        if not ops:
            raise _UsageError("--compare needs at least one op")
        for op in ops:
            if op not in _VARIANTS:
                raise _UsageError(f"unknown op {op!r} in --compare "
                                  f"(choose from {', '.join(_VARIANTS)})")
    elif args.op:
        ops = [args.op]
    else:
        raise _UsageError("bench needs --op or --compare")
    if args.iters < 3:
        raise _UsageError("--iters must be >= 3")
    if args.warmup < 1:
        raise _UsageError("--warmup must be >= 1")

    dims = _parse_size(args.size)
    c, d, h, w = dims
    seed = int(os.environ.get("SEPCONV_SEED", "42"))

    from . import costs
    from .kernels import KernelBank, forward
    from .netcfg import LayerSpec
    from .volume import Shape4, Volume4

    x = Volume4.random(dims, seed=seed, dtype="float32")
    out_c = args.out_channels if args.out_channels is not None else c

    results = []
    for idx, op in enumerate(ops):
        bank = KernelBank.random(
            op, k=args.k, c_in=c, c_out=out_c,
            d_in=(d if op == "dwsc" else None),
            seed=seed + idx + 1,
        )
        spec = LayerSpec(id=f"bench-{op}", kind="conv3d", variant=op, k=args.k,
                         stride=1, out_channels=out_c, bias=False, bn=False)
        macs = costs.count_layer(spec, Shape4(*dims)).total_macs

        for _ in range(args.warmup):
            forward(x, bank, stride=1)
        times = []
        for _ in range(args.iters):
            t0 = time.perf_counter()
            forward(x, bank, stride=1)
            times.append(time.perf_counter() - t0)

        med = statistics.median(times)
        mad = statistics.median(abs(t - med) for t in times)
        results.append({
            "op": op,
            "input": list(dims),
            "k": args.k,
            "out_channels": out_c,
            "threads": max(1, args.threads),
            "iters": args.iters,
            "warmup": args.warmup,
            "macs": macs,
            "median_s": round(med, 6),
            "mad_s": round(mad, 6),
            "speedup_vs_first": round(results[0]["median_s"] / med, 2) if results else 1.0,
            "times_s": [round(t, 6) for t in times],
        })

    if args.format == "json":
        print(json.dumps({"seed": seed, "results": results}, indent=2))
    else:
        import csv

        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["op", "c", "d", "h", "w", "k", "out_channels", "threads",
                         "iters", "warmup", "macs", "median_s", "mad_s",
                         "speedup_vs_first"])
        for r in results:
            writer.writerow([r["op"], *r["input"], r["k"], r["out_channels"],
                             r["threads"], r["iters"], r["warmup"], r["macs"],
                             f"{r['median_s']:.6f}", f"{r['mad_s']:.6f}",
                             f"{r['speedup_vs_first']:.2f}"])
    return EXIT_OK


# ---------------------------------------------------------------------------

_HANDLERS = {
    "profile": _cmd_profile,
    "check": _cmd_check,
    "apply": _cmd_apply,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SystemExit as exc:  # --help / --version paths
        return int(exc.code or 0)

    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_FAIL

    if args.command == "bench":
        # Must happen before the numeric modules are imported anywhere in
        # this process, otherwise the pools are already sized.
        _pin_threads(args.threads)

    from .kernels import KernelError
    from .netcfg import ConfigError
    from .volume import VolumeError

    try:
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ConfigError, KernelError, VolumeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:  # includes VolumeIOError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
