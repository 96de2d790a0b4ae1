"""psconfig: read or write sensor configuration; run calibration."""

from __future__ import annotations

import dataclasses
import sys

from ..calibrate import CalibrationError, calibrate_offsets, calibrate_voltage_gain
from ..device import DeviceConfigError
from ..host import HostError
from ..protocol import ProtocolError
from . import EXIT_DEVICE, EXIT_OK, EXIT_USAGE, ToolParser, add_device_option, open_device

FIELDS = ("name", "vref", "slope", "offset", "kind", "enabled")


def _parse_assignment(text: str):
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ValueError(f"expected SENSOR.FIELD=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    idx_text, field = key.split(".", 1)
    if not idx_text.isdigit() or not 0 <= int(idx_text) <= 7:
        raise ValueError(f"unknown sensor {idx_text!r} (valid: 0-7)")
    if field not in FIELDS:
        raise ValueError(f"unknown field {field!r} (valid: {', '.join(FIELDS)})")
    idx = int(idx_text)
    if field in ("vref", "slope", "offset"):
        return idx, field, float(value)
    if field == "enabled":
        return idx, field, value.lower() in ("1", "true", "yes", "on")
    return idx, field, value


def _show(session) -> None:
    for i, cfg in enumerate(session.config):
        print(
            f"{i} {cfg.name:<11} {cfg.kind:<7} vref={cfg.vref:.4f} "
            f"slope={cfg.slope:.6f} offset={cfg.offset:.6f} enabled={int(cfg.enabled)}"
        )


def _interactive_confirm(prompt: str) -> bool:
    reply = input(f"{prompt} [y/N] ")
    return reply.strip().lower() in ("y", "yes")


def main(argv=None) -> int:
    parser = ToolParser(prog="psconfig", description="Read/write sensor configuration.")
    add_device_option(parser)
    sub = parser.add_subparsers(dest="action", required=True)

    sub.add_parser("show", help="print the configuration block")

    set_p = sub.add_parser("set", help="write fields, e.g. 0.vref=3.0 1.enabled=0")
    set_p.add_argument("assignments", nargs="+", metavar="SENSOR.FIELD=VALUE")
    set_p.add_argument("--reboot", action="store_true", help="reboot the device after writing")

    cal_p = sub.add_parser("calibrate", help="run a calibration flow")
    cal_p.add_argument("what", choices=("offset", "gain"))
    cal_p.add_argument("--samples", type=int, default=131072, help="samples to average (default 128k)")
    cal_p.add_argument("--volts", type=float, help="known supply voltage (gain calibration)")
    cal_p.add_argument("-y", "--assume-yes", action="store_true", help="skip operator prompts")
    args = parser.parse_args(argv)

    if args.action == "calibrate" and args.what == "gain" and args.volts is None:
        parser.error("calibrate gain requires --volts")

    updates = []
    if args.action == "set":
        try:
            updates = [_parse_assignment(a) for a in args.assignments]
        except ValueError as exc:
            print(f"psconfig: error: {exc}", file=sys.stderr)
            return EXIT_USAGE

    with open_device(args.device, wait_first_tick=False) as handle:
        session = handle.session
        try:
            if args.action == "show":
                _show(session)
            elif args.action == "set":
                block = list(session.get_config())
                for idx, field, value in updates:
                    block[idx] = dataclasses.replace(block[idx], **{field: value})
                session.set_config(block)
                _show(session)
                if args.reboot:
                    session.reboot()
            else:
                confirm = None if args.assume_yes else _interactive_confirm
                if args.what == "offset":
                    result = calibrate_offsets(
                        session, args.samples, confirm=confirm
                    )
                    for i, offset in sorted(result.offsets.items()):
                        residual = result.residual_amps.get(i)
                        extra = f" residual={residual:+.6f} A" if residual is not None else ""
                        print(f"sensor {i}: offset={offset:+.6f} V{extra}")
                else:
                    result = calibrate_voltage_gain(
                        session, args.volts, args.samples, confirm=confirm
                    )
                    for i, gain in sorted(result.gains.items()):
                        residual = result.residual_volts.get(i)
                        extra = f" residual={residual:+.6f} V" if residual is not None else ""
                        print(f"sensor {i}: gain={gain:.6f}{extra}")
        except (ProtocolError, DeviceConfigError) as exc:
            print(f"psconfig: invalid configuration: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except (HostError, CalibrationError) as exc:
            print(f"psconfig: {exc}", file=sys.stderr)
            return EXIT_DEVICE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
