"""Host-side byte transports: pseudo-terminal/serial path and TCP.

All transports expose the same minimal interface the session receiver
needs: ``read(max_bytes, timeout)`` returning ``b""`` on timeout and
raising ConnectionError once the peer is gone, plus ``write`` and
``close``.  The in-process channel (powersensor.device.InProcessChannel)
implements the same interface.
"""

from __future__ import annotations

import os
import select
import socket
import tty


class SerialTransport:
    """Raw byte access to a tty/pty device path."""

    def __init__(self, path: str):
        try:
            self._fd = os.open(path, os.O_RDWR | os.O_NOCTTY)
        except OSError as exc:
            raise ConnectionError(f"cannot open serial device {path}: {exc}") from exc
        try:
            tty.setraw(self._fd)
        except OSError:
            pass  # not a tty (e.g. a fifo in tests); raw framing still works
        self._closed = False

    def read(self, max_bytes: int, timeout: float | None = None) -> bytes:
        if self._closed:
            raise ConnectionError("transport closed")
        ready, _, _ = select.select([self._fd], [], [], timeout)
        if not ready:
            return b""
        try:
            data = os.read(self._fd, max_bytes)
        except OSError as exc:
            raise ConnectionError(f"serial read failed: {exc}") from exc
        if not data:
            raise ConnectionError("serial peer closed")
        return data

    def write(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionError("transport closed")
        view = memoryview(data)
        while view:
            try:
                n = os.write(self._fd, view)
            except OSError as exc:
                raise ConnectionError(f"serial write failed: {exc}") from exc
            view = view[n:]

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                os.close(self._fd)
            except OSError:
                pass


class TcpTransport:
    """Raw byte access to a tcp:host:port endpoint."""

    def __init__(self, host: str, port: int):
        try:
            self._sock = socket.create_connection((host, port), timeout=2.0)
        except OSError as exc:
            raise ConnectionError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._closed = False

    def read(self, max_bytes: int, timeout: float | None = None) -> bytes:
        if self._closed:
            raise ConnectionError("transport closed")
        self._sock.settimeout(timeout)
        try:
            data = self._sock.recv(max_bytes)
        except socket.timeout:
            return b""
        except OSError as exc:
            raise ConnectionError(f"tcp read failed: {exc}") from exc
        if not data:
            raise ConnectionError("tcp peer closed")
        return data

    def write(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionError("transport closed")
        self._sock.settimeout(None)
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise ConnectionError(f"tcp write failed: {exc}") from exc

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.close()
            except OSError:
                pass


def open_transport(address: str):
    """Open a transport from an address: ``tcp:host:port`` or a device path."""
    if address.startswith("tcp:"):
        rest = address[4:]
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"tcp address must be tcp:host:port, got {address!r}")
        return TcpTransport(host, int(port))
    return SerialTransport(address)
