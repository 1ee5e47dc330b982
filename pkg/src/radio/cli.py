"""Operator-facing command surface.

Machine-readable output is JSON on stdout; human-readable tables go to
stderr (suppressed by --quiet).  Exit codes: 0 ok, 1 I/O error, 2
validation or infeasibility error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import calibrate as cal
from .allocate import AllocationError, BitAllocation, integerize, solve_rate
from .grouping import GroupingPlan, pruned_fraction
from .kernel import KernelError, bench_matvec, dense_matvec_oracle, packed_matvec
from .model import make_toy_model
from .pack import PackError, pack, quantize_matrix, read_f32, unpack
from .stats import StatsError, StatsSet, validate_stats

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2

SWEEP_GROUP_SIZES = (64, 128, 256, 512, 1024)
DEMO_WIDTHS = (24, 48, 48, 24)
DEMO_CALIB_SAMPLES = 16
DEMO_CALIB_TOKENS = 34


def _err(msg: str) -> None:
    print(f"radio: {msg}", file=sys.stderr)


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        _err(str(exc))
        raise SystemExit(EXIT_IO) from exc


def _load_stats(path: str) -> StatsSet:
    raw = _read_text(path)
    try:
        return validate_stats(raw)
    except StatsError as exc:
        _err(str(exc))
        raise SystemExit(EXIT_INVALID) from exc


def cmd_stats_validate(args) -> int:
    stats = _load_stats(args.path)
    print(f"ok: {len(stats.groups)} groups, rate {stats.rate}")
    return EXIT_OK


def cmd_allocate(args) -> int:
    stats = _load_stats(args.stats)
    if args.rate is not None:
        try:
            stats = StatsSet(groups=stats.groups, rate=args.rate, b_max=stats.b_max)
        except StatsError as exc:
            _err(str(exc))
            return EXIT_INVALID
    try:
        cont = solve_rate(stats, method=args.method)
        alloc = integerize(stats, cont)
    except AllocationError as exc:
        _err(str(exc))
        return EXIT_INVALID
    doc = {"V": alloc.V, "rate": alloc.achieved_rate, "depths": list(alloc.depths)}
    text = json.dumps(doc)
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    if not args.quiet:
        print(
            f"allocated {len(alloc.depths)} groups at {alloc.achieved_rate:.6f} "
            f"bits/weight (target {stats.rate})",
            file=sys.stderr,
        )
    return EXIT_OK


def _load_plan(path: str, shape: tuple[int, int]) -> GroupingPlan:
    doc = json.loads(_read_text(path))
    plan = GroupingPlan(
        axis=doc.get("axis", "columns"),
        M=int(doc["M"]),
        row_subgroup_index=tuple(int(i) for i in doc["row_subgroup_index"]),
    )
    rows, cols = shape
    return plan.bind(cols if plan.axis == "columns" else rows)


def cmd_quantize(args) -> int:
    try:
        weights = read_f32(args.weights)
    except PackError as exc:
        _err(str(exc))
        return EXIT_INVALID
    try:
        plan = _load_plan(args.plan, weights.shape)
        alloc_doc = json.loads(_read_text(args.alloc))
        depths = [int(d) for d in alloc_doc["depths"]]
        indices, params, _ = quantize_matrix(weights, plan, depths, calibrate=args.calibrate)
        rates = np.array(depths, dtype=np.float64)
        alloc = BitAllocation(
            depths=tuple(depths),
            depths_cont=tuple(rates),
            V=alloc_doc.get("V"),
            achieved_rate=float(alloc_doc.get("rate", rates.mean())),
        )
        data = pack(indices, plan, alloc, params, shape=weights.shape)
    except (PackError, KeyError, ValueError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    Path(args.output).write_bytes(data)
    print(json.dumps({"output": args.output, "bytes": len(data)}))
    if not args.quiet:
        print(f"wrote {len(data)} bytes to {args.output}", file=sys.stderr)
    return EXIT_OK


def cmd_matvec(args) -> int:
    try:
        m = unpack(Path(args.model).read_bytes())
    except OSError as exc:
        _err(str(exc))
        return EXIT_IO
    except PackError as exc:
        _err(str(exc))
        return EXIT_INVALID
    try:
        x = read_f32(args.vector)
        y = packed_matvec(m, x.ravel())
    except (PackError, KernelError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    doc = {"y": y.tolist()}
    if args.check:
        oracle = dense_matvec_oracle(m, x.ravel())
        scale = max(float(np.max(np.abs(oracle))), 1e-300)
        ok = float(np.max(np.abs(y - oracle))) / scale <= 1e-12
        doc["check"] = "ok" if ok else "mismatch"
        if not ok:
            print(json.dumps(doc))
            _err("packed result deviates from the dense oracle")
            return EXIT_INVALID
    print(json.dumps(doc))
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        m = unpack(Path(args.model).read_bytes())
        report = bench_matvec(m, args.trials)
    except (OSError, PackError, KernelError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    print(json.dumps(report))
    return EXIT_OK


def _demo_once(seed: int, rate: float, group_size: int, max_iter: int) -> dict:
    model = make_toy_model(DEMO_WIDTHS, seed=seed)
    calib = cal.make_calib_set(
        DEMO_CALIB_SAMPLES, DEMO_CALIB_TOKENS, DEMO_WIDTHS[0], seed=seed + 1000
    )
    result = cal.radio_run(model, calib, rate, group_size=group_size, max_iter=max_iter)
    bits, frac = cal.model_overhead(result.plans, result.alloc)

    rtn_depth = int(round(rate))
    rtn_q = cal.rtn_model(model, result.plans, rtn_depth)
    rtn_dist = cal.measure_distortion(model, rtn_q, calib)
    return {
        "seed": seed,
        "group_size": group_size,
        "radio": {
            "rate": result.alloc.achieved_rate,
            "distortion": result.distortion,
            "pruned_frac": pruned_fraction(result.alloc, result.stats),
            "overhead_frac": frac,
            "overhead_bits": bits,
            "best_iter": result.best_iter,
        },
        "rtn": {"rate": float(rtn_depth), "distortion": rtn_dist},
        "trace": result.trace,
    }


def _demo_table(doc: dict) -> str:
    r, t = doc["radio"], doc["rtn"]
    lines = [
        f"{'method':<8}{'rate':>9}{'distortion':>14}{'pruned%':>9}{'overhead%':>11}",
        f"{'radio':<8}{r['rate']:>9.4f}{r['distortion']:>14.4e}"
        f"{100 * r['pruned_frac']:>9.2f}{100 * r['overhead_frac']:>11.3f}",
        f"{'rtn':<8}{t['rate']:>9.4f}{t['distortion']:>14.4e}{0.0:>9.2f}"
        f"{100 * r['overhead_frac']:>11.3f}",
    ]
    return "\n".join(lines)


def cmd_demo(args) -> int:
    sizes = SWEEP_GROUP_SIZES if args.sweep else (args.group_size,)
    runs = [_demo_once(args.seed, args.rate, g, args.max_iter) for g in sizes]
    doc = runs[0] if not args.sweep else {"seed": args.seed, "sweep": runs}
    print(json.dumps(doc))
    if args.trace_out:
        with open(args.trace_out, "w") as fh:
            for run in runs:
                for row in run["trace"]:
                    fh.write(json.dumps(row) + "\n")
    if not args.quiet:
        for run in runs:
            print(f"group size {run['group_size']}:", file=sys.stderr)
            print(_demo_table(run), file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radio", description=__doc__)
    parser.add_argument("--quiet", action="store_true", help="suppress stderr tables")
    sub = parser.add_subparsers(dest="command", required=True)

    p_stats = sub.add_parser("stats", help="stats file operations")
    stats_sub = p_stats.add_subparsers(dest="stats_command", required=True)
    p_validate = stats_sub.add_parser("validate", help="parse and validate a stats file")
    p_validate.add_argument("path")
    p_validate.set_defaults(func=cmd_stats_validate)

    p_alloc = sub.add_parser("allocate", help="solve bit depths for a stats file")
    p_alloc.add_argument("--stats", required=True)
    p_alloc.add_argument("--rate", type=float, default=None, help="override the stats rate")
    p_alloc.add_argument("--method", choices=["bisect", "dual-ascent"], default="bisect")
    p_alloc.add_argument("-o", "--output", default=None)
    p_alloc.set_defaults(func=cmd_allocate)

    p_quant = sub.add_parser("quantize", help="quantize a dense matrix to .rdq")
    p_quant.add_argument("--weights", required=True, help="raw f32 tensor (+ .json sidecar)")
    p_quant.add_argument("--plan", required=True)
    p_quant.add_argument("--alloc", required=True)
    p_quant.add_argument("--calibrate", action="store_true", help="grid-search (S, mu)")
    p_quant.add_argument("-o", "--output", required=True)
    p_quant.set_defaults(func=cmd_quantize)

    p_mv = sub.add_parser("matvec", help="multiply a packed matrix by a vector")
    p_mv.add_argument("--model", required=True)
    p_mv.add_argument("--vector", required=True)
    p_mv.add_argument("--check", action="store_true", help="compare against the dense oracle")
    p_mv.set_defaults(func=cmd_matvec)

    p_bench = sub.add_parser("bench", help="time packed vs dense matvec")
    p_bench.add_argument("--model", required=True)
    p_bench.add_argument("--trials", type=int, default=25)
    p_bench.set_defaults(func=cmd_bench)

    p_demo = sub.add_parser("demo", help="end-to-end run on a synthetic model")
    p_demo.add_argument("--seed", type=int, default=0)
    p_demo.add_argument("--rate", type=float, default=4.0)
    p_demo.add_argument("--group-size", type=int, default=512)
    p_demo.add_argument("--max-iter", type=int, default=cal.MAX_ITER)
    p_demo.add_argument("--sweep", action="store_true", help="sweep group sizes 64..1024")
    p_demo.add_argument("--trace-out", default=None, help="write the RD trace as JSON lines")
    p_demo.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_IO
    except (StatsError, AllocationError, PackError, KernelError, cal.CalibrationError) as exc:
        _err(str(exc))
        return EXIT_INVALID


if __name__ == "__main__":
    raise SystemExit(main())
