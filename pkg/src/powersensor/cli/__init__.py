"""Shared command-line plumbing for the ps* tools.

Device addresses accepted by every tool's ``-d``:

  sim:            embedded virtual device (default setup, accelerated)
  sim:FILE        embedded virtual device from a setup file
  tcp:HOST:PORT   raw TCP to a running simulator
  PATH            serial/pseudo-terminal device path

Exit codes: 0 ok, 1 usage, 2 device error, 3 analysis error (psrun
propagates the child's exit code instead).
"""

from __future__ import annotations

import argparse
import sys

from ..device import VirtualDevice
from ..host import HostError, Session
from ..protocol import ProtocolError
from ..scenario import ScenarioError, load_sim_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DEVICE = 2
EXIT_ANALYSIS = 3


class ToolParser(argparse.ArgumentParser):
    """argparse with the usage exit code pinned to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def add_device_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "-d",
        "--device",
        default="sim:",
        metavar="ADDR",
        help="device address: sim:[setup-file], tcp:host:port, or a tty path "
        "(default: embedded simulator)",
    )


class DeviceHandle:
    """A session plus the embedded simulator backing it, if any."""

    def __init__(self, session: Session, device: VirtualDevice | None):
        self.session = session
        self.device = device

    def close(self) -> None:
        try:
            self.session.close()
        finally:
            if self.device is not None:
                self.device.close()

    def __enter__(self) -> "DeviceHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_device(address: str, **session_kwargs) -> DeviceHandle:
    """Open a session to any supported address; exits on failure."""
    device = None
    try:
        if address.startswith("sim:"):
            setup_path = address[4:]
            if setup_path:
                setup = load_sim_config(setup_path)
                device = VirtualDevice.from_setup(setup)
            else:
                device = VirtualDevice()
            device.start()
            session = Session.connect(device, **session_kwargs)
        else:
            session = Session.connect(address, **session_kwargs)
        return DeviceHandle(session, device)
    except (OSError, ScenarioError) as exc:
        if device is not None:
            device.close()
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(EXIT_USAGE)
    except (HostError, ProtocolError) as exc:
        if device is not None:
            device.close()
        print(f"device error: {exc}", file=sys.stderr)
        sys.exit(EXIT_DEVICE)
