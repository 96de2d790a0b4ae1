"""pstest: measure power and energy over doubling intervals.

Eleven rows from 1 ms to 1.024 s, timed on the device clock; useful as a
quick self-test that readings are stable across time scales.
"""

from __future__ import annotations

import sys

from ..host import HostError, joules, seconds, watts
from . import EXIT_DEVICE, EXIT_OK, ToolParser, add_device_option, open_device

INTERVALS_MS = tuple(2**k for k in range(11))  # 1 ms .. 1024 ms


def main(argv=None) -> int:
    parser = ToolParser(prog="pstest", description="Report energy over doubling intervals.")
    add_device_option(parser)
    args = parser.parse_args(argv)

    with open_device(args.device) as handle:
        session = handle.session
        print(f"{'interval':>12}  {'energy':>14}  {'power':>12}")
        try:
            for ms in INTERVALS_MS:
                a = session.read_state()
                session.wait_device_time(a.device_time + ms / 1000.0, timeout=ms / 1000.0 + 30)
                b = session.read_state()
                print(
                    f"{ms:>9} ms  {joules(a, b):>12.6f} J  {watts(a, b):>10.4f} W"
                    f"  ({seconds(a, b) * 1000:.2f} ms measured)"
                )
        except HostError as exc:
            print(f"pstest: {exc}", file=sys.stderr)
            return EXIT_DEVICE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
