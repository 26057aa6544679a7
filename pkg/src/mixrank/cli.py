"""Command-line front end: gen, compress, evaluate, quantize, cost.

Settings may come from flags or from a key=value config file (--config);
flags win. All randomness flows from the single --seed value, so repeated
runs produce byte-identical outputs.
"""
import argparse
import csv
import sys

from .bundle import gen_synthetic, load_bundle, save_bundle
from .errors import EXIT_CODES, MixrankError
from .pipeline import (
    PipelineConfig,
    compress_bundle,
    cost_report,
    evaluate_pair,
    load_compressed,
    quantize_bundle,
    quantized_size_report,
    save_compressed,
)


def load_config_file(path):
    settings = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise MixrankError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            settings[key.strip().replace("-", "_")] = value.strip()
    return settings


def _pick(args, filecfg, key, cast, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in filecfg:
        return cast(filecfg[key])
    return default


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mixrank",
        description="Activation-aware mixed-rank weight compression toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic relu-chain bundle")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--layers", type=int, default=4)
    gen.add_argument("--n", type=int, default=24)
    gen.add_argument("--d", type=int, default=20)
    gen.add_argument("--s", type=int, default=16)
    gen.add_argument("--samples", type=int, default=64)
    gen.add_argument("--spectrum-decay", type=float, default=0.8)

    comp = sub.add_parser("compress", help="compress a bundle")
    comp.add_argument("--bundle", required=True)
    comp.add_argument("--out", required=True)
    comp.add_argument("--config", help="key=value settings file; flags override it")
    for flag, typ in [
        ("--alpha", float), ("--gamma", float), ("--schedule-iters", int),
        ("--gd-lr", float), ("--gd-iters", int), ("--gd-batch", int),
        ("--comp-budget", float), ("--proxy-cap", int), ("--rcond", float),
        ("--holdout", float), ("--seed", int), ("--workers", int),
    ]:
        comp.add_argument(flag, type=typ, default=None)

    ev = sub.add_parser("evaluate", help="score a compressed bundle against its source")
    ev.add_argument("--bundle", required=True)
    ev.add_argument("--compressed", required=True)
    ev.add_argument("--csv", help="write the per-layer report here")

    qu = sub.add_parser("quantize", help="quantize the factor matrices")
    qu.add_argument("--compressed", required=True)
    qu.add_argument("--out", required=True)
    qu.add_argument("--bits", type=int, default=8)
    qu.add_argument("--mode", choices=("affine_minmax", "paper_literal"), default="affine_minmax")
    qu.add_argument("--channel-axis", choices=("row", "column"), default="column")
    qu.add_argument("--bundle", help="original bundle, for a before/after error report")

    co = sub.add_parser("cost", help="multiplication-count report")
    co.add_argument("--compressed", required=True)
    co.add_argument("--seq-len", type=int, required=True)
    co.add_argument("--csv", help="write the per-layer report here")
    return parser


def cmd_gen(args):
    bundle = gen_synthetic(
        seed=args.seed, layers=args.layers, n=args.n, d=args.d,
        s=args.s, samples=args.samples, spectrum_decay=args.spectrum_decay,
    )
    save_bundle(bundle, args.out)
    print(f"wrote {len(bundle.layers)}-layer bundle with {bundle.proxy.count} samples to {args.out}")
    return 0


def config_from_args(args):
    filecfg = load_config_file(args.config) if args.config else {}
    return PipelineConfig(
        alpha=_pick(args, filecfg, "alpha", float, 2.0),
        gamma=_pick(args, filecfg, "gamma", float, 80.0),
        schedule_iters=_pick(args, filecfg, "schedule_iters", int, 500),
        gd_learning_rate=_pick(args, filecfg, "gd_lr", float, 1e-3),
        gd_iterations=_pick(args, filecfg, "gd_iters", int, 2000),
        gd_batch_size=_pick(args, filecfg, "gd_batch", int, 64),
        comp_budget_fraction=_pick(args, filecfg, "comp_budget", float, 0.05),
        proxy_cap=_pick(args, filecfg, "proxy_cap", int, None),
        rcond=_pick(args, filecfg, "rcond", float, 1e-10),
        holdout_fraction=_pick(args, filecfg, "holdout", float, 0.2),
        seed=_pick(args, filecfg, "seed", int, 0),
        workers=_pick(args, filecfg, "workers", int, 1),
    )


def cmd_compress(args):
    config = config_from_args(args)
    bundle = load_bundle(args.bundle)
    compressed, artifacts = compress_bundle(bundle, config)
    save_compressed(compressed, args.out, artifacts)
    print(f"compressed {len(compressed.layers)} layers: "
          f"{compressed.provenance['original_params']} -> {compressed.param_count()} params "
          f"(ratio {compressed.provenance['psi_total']:.3f}, target {config.alpha})")
    for layer, row in zip(compressed.layers, artifacts["error_rows"]):
        print(f"  {layer.name}: rank {layer.rank}+{layer.comp_rank}  "
              f"held-out err {row['err_no_comp']:.5f} -> {row['err_with_comp']:.5f}")
    print(f"reports: trace.csv, layer_errors.csv, gd_log.csv, energy_curves.csv in {args.out}")
    return 0


def cmd_evaluate(args):
    bundle = load_bundle(args.bundle)
    compressed = load_compressed(args.compressed)
    report = evaluate_pair(bundle, compressed)
    print(f"layers: {len(report.layers)}")
    for r in report.layers:
        print(f"  {r.layer}: rank {r.rank}+{r.comp_rank}  held-out {r.err_heldout:.6f} "
              f"(no comp {r.err_heldout_no_comp:.6f})  calibration {r.err_calibration:.6f}  "
              f"gap {r.generalization_gap:+.6f}")
    print(f"error sum (held-out): {report.error_sum:.6f}")
    if report.end_to_end_deviation is not None:
        print(f"end-to-end output deviation: {report.end_to_end_deviation:.6f}")
    print(f"params: {report.original_params} -> {report.compressed_params} "
          f"(ratio {report.psi_total:.3f})")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "rank", "comp_rank", "err_heldout",
                             "err_heldout_no_comp", "err_calibration", "generalization_gap"])
            for r in report.layers:
                writer.writerow([r.layer, r.rank, r.comp_rank, repr(r.err_heldout),
                                 repr(r.err_heldout_no_comp), repr(r.err_calibration),
                                 repr(r.generalization_gap)])
        print(f"wrote {args.csv}")
    return 0


def cmd_quantize(args):
    compressed = load_compressed(args.compressed)
    quantized = quantize_bundle(compressed, args.bits, mode=args.mode,
                                channel_axis=args.channel_axis)
    save_compressed(quantized, args.out)
    report = quantized_size_report(quantized, args.bits)
    print(f"quantized to {args.bits}-bit {args.mode} codes ({args.channel_axis}-wise)")
    print(f"size: {report.total_bytes:.0f} bytes vs FP16 baseline {report.baseline_bytes:.0f} "
          f"({report.reduction_factor:.2f}x smaller)")
    if args.bundle:
        bundle = load_bundle(args.bundle)
        before = evaluate_pair(bundle, compressed)
        after = evaluate_pair(bundle, quantized)
        for b, a in zip(before.layers, after.layers):
            print(f"  {b.layer}: held-out err {b.err_heldout:.6f} -> {a.err_heldout:.6f} "
                  f"({a.err_heldout - b.err_heldout:+.2e})")
    return 0


def cmd_cost(args):
    compressed = load_compressed(args.compressed)
    rows, total = cost_report(compressed, args.seq_len)
    for r in rows:
        flag = "  [no saving]" if r.ratio >= 1.0 else ""
        print(f"  {r.layer}: {r.original_mults} -> {r.factored_mults} mults "
              f"(ratio {r.ratio:.4f}){flag}")
    print(f"total multiplication ratio: {total:.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "original_mults", "factored_mults", "ratio"])
            for r in rows:
                writer.writerow([r.layer, r.original_mults, r.factored_mults, repr(r.ratio)])
        print(f"wrote {args.csv}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "compress": cmd_compress,
    "evaluate": cmd_evaluate,
    "quantize": cmd_quantize,
    "cost": cmd_cost,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except MixrankError as exc:
        print(f"mixrank: error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, EXIT_CODES["internal"])
    except OSError as exc:
        print(f"mixrank: error [io]: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
