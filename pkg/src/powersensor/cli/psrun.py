"""psrun: run a command and report the energy it consumed.

The report goes to standard error so the child's standard output stays
clean for pipelines.  The child's exit code is propagated.
"""

from __future__ import annotations

import argparse
import subprocess
import sys

from ..host import SessionDeadError, ZeroIntervalError, joules, seconds, watts
from . import EXIT_USAGE, ToolParser, add_device_option, open_device


def main(argv=None) -> int:
    parser = ToolParser(
        prog="psrun",
        description="Run a command and report its energy consumption.",
    )
    add_device_option(parser)
    parser.add_argument("-f", "--dumpfile", metavar="FILE", help="also capture a dump covering the run")
    parser.add_argument("command", nargs=argparse.REMAINDER, help="command to run (prefix with -- if it takes options)")
    args = parser.parse_args(argv)

    command = args.command
    if command and command[0] == "--":
        command = command[1:]
    if not command:
        parser.print_usage(sys.stderr)
        print("psrun: error: no command given", file=sys.stderr)
        return EXIT_USAGE

    with open_device(args.device) as handle:
        session = handle.session
        if args.dumpfile:
            session.start_dump(args.dumpfile)
        start = session.read_state()
        try:
            child = subprocess.Popen(command)
        except FileNotFoundError:
            print(f"psrun: cannot run {command[0]!r}: not found", file=sys.stderr)
            return 127
        except PermissionError:
            print(f"psrun: cannot run {command[0]!r}: permission denied", file=sys.stderr)
            return 126
        code = child.wait()
        device_failed = None
        try:
            end = session.read_state()
        except SessionDeadError as exc:
            device_failed = str(exc)
            end = None
        if args.dumpfile:
            try:
                session.stop_dump()
            except Exception as exc:
                print(f"psrun: dump failed: {exc}", file=sys.stderr)
        if end is not None:
            j = joules(start, end)
            s = seconds(start, end)
            try:
                w = watts(start, end)
                avg = f"{w:.3f} W"
            except ZeroIntervalError:
                avg = "n/a W"
            print(f"{j:.3f} J  {s:.3f} s  {avg}", file=sys.stderr)
        else:
            print(f"psrun: device failed during the run: {device_failed}", file=sys.stderr)
    if code < 0:
        return 128 - code
    return code


if __name__ == "__main__":
    sys.exit(main())
