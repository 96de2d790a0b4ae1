"""psinfo: show sensor configuration, latest readings, and total power."""

from __future__ import annotations

import sys

from ..host import HostError, raw_to_physical
from ..protocol import KIND_CURRENT
from . import EXIT_DEVICE, EXIT_OK, ToolParser, add_device_option, open_device


def main(argv=None) -> int:
    parser = ToolParser(prog="psinfo", description="Show sensor config and live readings.")
    add_device_option(parser)
    args = parser.parse_args(argv)

    with open_device(args.device, wait_first_tick=False) as handle:
        session = handle.session
        try:
            session.wait_ticks(2, timeout=2.0)
        except HostError:
            pass  # no enabled sensors still produces timestamp-only ticks
        try:
            state = session.read_state()
        except HostError as exc:
            print(f"device error: {exc}", file=sys.stderr)
            return EXIT_DEVICE
        for i, cfg in enumerate(session.config):
            if not cfg.enabled:
                continue
            level = state.levels[i]
            if level is None:
                latest = "n/a"
            else:
                value = raw_to_physical(level, cfg)
                unit = "A" if cfg.kind == KIND_CURRENT else "V"
                latest = f"{value:.4f} {unit}"
            print(
                f"{i} {cfg.name:<11} {cfg.kind:<7} vref={cfg.vref:.4f} "
                f"slope={cfg.slope:.6f} offset={cfg.offset:.6f} latest={latest}"
            )
        print(f"total: {state.total_watts:.1f} W")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
