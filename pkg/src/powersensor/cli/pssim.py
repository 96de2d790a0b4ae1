"""pssim: launch the virtual device on a pseudo-terminal or TCP port.

Prints one line describing the endpoint (``pty /dev/pts/N`` or
``tcp HOST:PORT``) to stdout, then serves until interrupted or the
optional duration elapses.
"""

from __future__ import annotations

import sys
import time

from .. import __version__
from ..device import DeviceConfigError, VirtualDevice
from ..scenario import ScenarioError, load_sim_config
from . import EXIT_OK, EXIT_USAGE, ToolParser


def main(argv=None) -> int:
    parser = ToolParser(prog="pssim", description="Serve a virtual sensor device.")
    parser.add_argument("-c", "--config", metavar="FILE", help="scenario setup file")
    endpoint = parser.add_mutually_exclusive_group()
    endpoint.add_argument("--pty", action="store_true", help="serve on a pseudo-terminal (default)")
    endpoint.add_argument("--tcp", metavar="HOST:PORT", help="serve on a TCP listener (port 0 picks one)")
    parser.add_argument("--mode", choices=("realtime", "accelerated"), help="override the setup's clock mode")
    parser.add_argument("--duration", type=float, help="stop after this many wall seconds")
    parser.add_argument("--eeprom", metavar="FILE", help="EEPROM backing file (224-byte image)")
    parser.add_argument("--version", action="version", version=f"pssim {__version__}")
    args = parser.parse_args(argv)

    try:
        if args.config:
            setup = load_sim_config(args.config)
            if args.mode:
                setup.mode = args.mode
            if args.eeprom:
                setup.eeprom_path = args.eeprom
            device = VirtualDevice.from_setup(setup)
        else:
            device = VirtualDevice(
                mode=args.mode or "realtime", eeprom_path=args.eeprom
            )
    except (OSError, ScenarioError, DeviceConfigError) as exc:
        print(f"pssim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.tcp:
            host, _, port = args.tcp.rpartition(":")
            bound_host, bound_port = device.serve_tcp(host or "127.0.0.1", int(port))
            print(f"tcp {bound_host}:{bound_port}", flush=True)
        else:
            path = device.serve_pty()
            print(f"pty {path}", flush=True)
        device.start()
        deadline = time.monotonic() + args.duration if args.duration else None
        while deadline is None or time.monotonic() < deadline:
            time.sleep(0.1)
    except KeyboardInterrupt:
        pass
    finally:
        device.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
