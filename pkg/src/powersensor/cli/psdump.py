"""psdump: capture continuous-mode dumps and analyze them.

capture writes the documented dump format; the analyze subcommands run
offline statistics.  Results go to stdout (text, or CSV with --csv);
diagnostics go to stderr.
"""

from __future__ import annotations

import sys

from ..analysis import (
    AnalysisError,
    decimate_stats,
    energy_between_markers,
    read_dump,
    rise_time,
    summarize,
)
from ..host import HostError
from . import (
    EXIT_ANALYSIS,
    EXIT_DEVICE,
    EXIT_OK,
    ToolParser,
    add_device_option,
    open_device,
)


def _parse_mark(text: str) -> tuple[str, float]:
    char, _, offset = text.partition(":")
    if len(char) != 1 or not offset:
        raise ValueError(f"mark must be CHAR:SECONDS, got {text!r}")
    return char, float(offset)


def _capture(args) -> int:
    try:
        marks = sorted((_parse_mark(m) for m in args.mark), key=lambda m: m[1])
    except ValueError as exc:
        print(f"psdump: error: {exc}", file=sys.stderr)
        return 1
    with open_device(args.device) as handle:
        session = handle.session
        try:
            session.start_dump(args.output, seconds=args.seconds)
            while session.dump_start_time is None:
                session.wait_ticks(1, timeout=30)
            base = session.dump_start_time
            for char, offset in marks:
                session.wait_device_time(base + offset, timeout=offset + 30)
                session.mark(char)
            session.wait_dump_complete(timeout=args.seconds + 60)
            records = session.stop_dump()
        except HostError as exc:
            print(f"psdump: {exc}", file=sys.stderr)
            return EXIT_DEVICE
        print(f"psdump: wrote {records} records to {args.output}", file=sys.stderr)
    return EXIT_OK


def _print_stats_row(label, stats, csv: bool) -> None:
    if stats is None:
        return
    if csv:
        print(
            f"{label},{stats.mean:.6f},{stats.minimum:.6f},{stats.maximum:.6f},"
            f"{stats.peak_to_peak:.6f},{stats.std:.6f},{stats.joules:.6f}"
        )
    else:
        print(
            f"{label:>6}  mean={stats.mean:10.4f} W  min={stats.minimum:10.4f}  "
            f"max={stats.maximum:10.4f}  pp={stats.peak_to_peak:8.4f}  "
            f"std={stats.std:8.4f}  E={stats.joules:10.4f} J"
        )


def _analyze(args) -> int:
    try:
        dump = read_dump(args.dumpfile)
    except (OSError, AnalysisError) as exc:
        print(f"psdump: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    for warning in dump.warnings:
        print(f"psdump: warning: {warning}", file=sys.stderr)

    try:
        if args.what == "stats":
            summary = summarize(dump)
            if args.csv:
                print("series,mean_w,min_w,max_w,pp_w,std_w,joules")
            for p, stats in enumerate(summary.pairs):
                _print_stats_row(f"pair{p}", stats, args.csv)
            _print_stats_row("total", summary.total, args.csv)
            if not args.csv:
                print(f"{summary.records} records over {summary.duration_s:.6f} s")
        elif args.what == "markers":
            result = energy_between_markers(dump, args.start, args.end)
            if args.csv:
                print("joules,seconds,watts")
                print(f"{result.joules:.6f},{result.seconds:.6f},{result.watts:.6f}")
            else:
                print(
                    f"{result.joules:.4f} J over {result.seconds:.6f} s "
                    f"({result.watts:.4f} W) between '{args.start}' and '{args.end}'"
                )
        elif args.what == "step":
            rate = args.rate if args.rate else dump.sample_rate_hz
            result = rise_time(dump.total_watts, rate, args.low, args.high)
            if args.csv:
                print("rise_seconds,low_w,high_w,edges")
                print(
                    f"{result.rise_seconds:.9f},{result.low_level:.4f},"
                    f"{result.high_level:.4f},{len(result.edges)}"
                )
            else:
                print(
                    f"rise time {result.rise_seconds * 1e6:.2f} us "
                    f"({result.low_level:.4f} W -> {result.high_level:.4f} W, "
                    f"{len(result.edges)} edges)"
                )
        else:  # decimate
            stats = decimate_stats(dump.total_watts, args.factor, dump.sample_rate_hz)
            if args.csv:
                print("factor,out_rate_hz,min_w,max_w,pp_w,std_w")
                print(
                    f"{stats.factor},{stats.out_rate_hz:.3f},{stats.minimum:.6f},"
                    f"{stats.maximum:.6f},{stats.peak_to_peak:.6f},{stats.std:.6f}"
                )
            else:
                print(
                    f"factor {stats.factor} -> {stats.out_rate_hz:.1f} Hz: "
                    f"min={stats.minimum:.4f} max={stats.maximum:.4f} "
                    f"pp={stats.peak_to_peak:.4f} std={stats.std:.4f} W"
                )
    except AnalysisError as exc:
        print(f"psdump: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    return EXIT_OK


def main(argv=None) -> int:
    parser = ToolParser(prog="psdump", description="Capture and analyze 20 kHz dumps.")
    sub = parser.add_subparsers(dest="mode", required=True)

    cap = sub.add_parser("capture", help="record a dump")
    add_device_option(cap)
    cap.add_argument("-o", "--output", required=True, metavar="FILE")
    cap.add_argument("--seconds", type=float, default=1.0, help="device-time length (default 1.0)")
    cap.add_argument(
        "--mark",
        action="append",
        default=[],
        metavar="CHAR:SECONDS",
        help="send a marker at a device-time offset (repeatable)",
    )

    ana = sub.add_parser("analyze", help="analyze an existing dump")
    ana_sub = ana.add_subparsers(dest="what", required=True)
    stats = ana_sub.add_parser("stats", help="per-pair and total statistics")
    markers = ana_sub.add_parser("markers", help="energy between two markers")
    markers.add_argument("--start", required=True, metavar="CHAR")
    markers.add_argument("--end", required=True, metavar="CHAR")
    step = ana_sub.add_parser("step", help="rise time of the first step")
    step.add_argument("--rate", type=float, help="sample rate override (Hz)")
    step.add_argument("--low", type=float, default=0.1, help="low threshold fraction")
    step.add_argument("--high", type=float, default=0.9, help="high threshold fraction")
    decimate = ana_sub.add_parser("decimate", help="block-averaged noise statistics")
    decimate.add_argument("--factor", type=int, required=True)
    for p in (stats, markers, step, decimate):
        p.add_argument("dumpfile", metavar="FILE")
        p.add_argument("--csv", action="store_true", help="machine-readable output")

    args = parser.parse_args(argv)
    if args.mode == "capture":
        return _capture(args)
    return _analyze(args)


if __name__ == "__main__":
    sys.exit(main())
