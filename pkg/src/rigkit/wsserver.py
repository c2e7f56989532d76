"""Minimal WebSocket server transport for JSON text messaging.

Implements the subset of RFC 6455 the operator console needs: the HTTP
upgrade handshake, text frames with client masking, fragmentation, and
ping/pong/close control frames.  Server frames are sent unmasked as the RFC
requires; oversized messages and binary frames fail the connection rather
than being buffered.
"""

from __future__ import annotations

import base64
import hashlib
import os
import socket
import struct
import threading
from itertools import cycle

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONT = 0x0
OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA

MAX_MESSAGE_BYTES = 1 << 20
MAX_HEADER_BYTES = 16 << 10


class HandshakeError(RuntimeError):
    """The HTTP upgrade request was not a valid WebSocket handshake."""


class FrameError(RuntimeError):
    """A frame violated the protocol (bad opcode, oversized, stray mask)."""


class SocketClosed(RuntimeError):
    """The peer went away without a close handshake."""


def accept_key(key: str) -> str:
    digest = hashlib.sha1((key + WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def encode_frame(opcode: int, payload: bytes, *, mask: bool = False, fin: bool = True) -> bytes:
    head = bytearray([0x80 * fin | opcode])
    mask_bit = 0x80 if mask else 0
    n = len(payload)
    if n < 126:
        head.append(mask_bit | n)
    elif n < 1 << 16:
        head.append(mask_bit | 126)
        head += struct.pack(">H", n)
    else:
        head.append(mask_bit | 127)
        head += struct.pack(">Q", n)
    if mask:
        key = os.urandom(4)
        head += key
        payload = bytes(b ^ m for b, m in zip(payload, cycle(key)))
    return bytes(head) + payload


def read_frame(read_exact) -> tuple[bool, int, bytes]:
    """One frame from a byte source; returns (fin, opcode, unmasked payload).

    read_exact(n) must return exactly n bytes or raise.
    """
    b0, b1 = read_exact(2)
    fin = bool(b0 & 0x80)
    if b0 & 0x70:
        raise FrameError("reserved bits set")
    opcode = b0 & 0x0F
    masked = bool(b1 & 0x80)
    n = b1 & 0x7F
    if n == 126:
        (n,) = struct.unpack(">H", read_exact(2))
    elif n == 127:
        (n,) = struct.unpack(">Q", read_exact(8))
    if n > MAX_MESSAGE_BYTES:
        raise FrameError(f"frame of {n} bytes exceeds cap {MAX_MESSAGE_BYTES}")
    if opcode >= OP_CLOSE and (n > 125 or not fin):
        raise FrameError("control frames must be short and unfragmented")
    key = read_exact(4) if masked else None
    payload = read_exact(n) if n else b""
    if key:
        payload = bytes(b ^ m for b, m in zip(payload, cycle(key)))
    return fin, opcode, payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise SocketClosed("peer closed the connection")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_http_request(sock: socket.socket) -> tuple[str, dict[str, str]]:
    """Request line target and lower-cased headers of an upgrade request."""
    data = b""
    while b"\r\n\r\n" not in data:
        if len(data) > MAX_HEADER_BYTES:
            raise HandshakeError("request headers too large")
        chunk = sock.recv(4096)
        if not chunk:
            raise SocketClosed("peer closed during handshake")
        data += chunk
    head = data.split(b"\r\n\r\n", 1)[0].decode("latin-1")
    lines = head.split("\r\n")
    parts = lines[0].split(" ")
    if len(parts) != 3 or parts[0] != "GET":
        raise HandshakeError(f"not a GET upgrade request: {lines[0]!r}")
    headers = {}
    for line in lines[1:]:
        if ":" not in line:
            raise HandshakeError(f"malformed header line {line!r}")
        name, value = line.split(":", 1)
        headers[name.strip().lower()] = value.strip()
    return parts[1], headers


def perform_handshake(sock: socket.socket) -> str:
    """Server side of the upgrade; returns the request target path."""
    target, headers = read_http_request(sock)
    if "websocket" not in headers.get("upgrade", "").lower():
        raise HandshakeError("missing Upgrade: websocket")
    key = headers.get("sec-websocket-key")
    if not key:
        raise HandshakeError("missing Sec-WebSocket-Key")
    response = (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {accept_key(key)}\r\n"
        "\r\n"
    )
    sock.sendall(response.encode("ascii"))
    return target


class WSConnection:
    """One upgraded connection; send is thread-safe, recv is single-reader."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._send_lock = threading.Lock()
        self._closed = False

    def send_text(self, text: str) -> None:
        self._send_frame(OP_TEXT, text.encode("utf-8"))

    def _send_frame(self, opcode: int, payload: bytes) -> None:
        with self._send_lock:
            if self._closed:
                raise SocketClosed("connection already closed")
            self._sock.sendall(encode_frame(opcode, payload))

    def recv_text(self) -> str | None:
        """Next text message, transparently answering pings; None on close."""
        parts: list[bytes] = []
        while True:
            fin, opcode, payload = read_frame(lambda n: _recv_exact(self._sock, n))
            if opcode == OP_PING:
                try:
                    self._send_frame(OP_PONG, payload)
                except (SocketClosed, OSError):
                    return None
                continue
            if opcode == OP_PONG:
                continue
            if opcode == OP_CLOSE:
                try:
                    self._send_frame(OP_CLOSE, payload[:2])
                except (SocketClosed, OSError):
                    pass
                self.close()
                return None
            if opcode == OP_BINARY:
                raise FrameError("binary frames unsupported; send JSON text")
            if opcode == OP_TEXT:
                if parts:
                    raise FrameError("new message before previous finished")
                parts.append(payload)
            elif opcode == OP_CONT:
                if not parts:
                    raise FrameError("continuation without a start frame")
                parts.append(payload)
            else:
                raise FrameError(f"unsupported opcode {opcode:#x}")
            if sum(len(p) for p in parts) > MAX_MESSAGE_BYTES:
                raise FrameError("fragmented message exceeds size cap")
            if fin:
                return b"".join(parts).decode("utf-8")

    def close(self) -> None:
        with self._send_lock:
            if self._closed:
                return
            self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class WebSocketServer:
    """Accept loop that upgrades connections and hands them to a callback.

    handler(conn, target) runs on its own thread per connection and owns the
    receive side; the server closes every connection on shutdown.
    """

    def __init__(self, handler, host: str = "127.0.0.1", port: int = 0):
        self._handler = handler
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]
        self._lock = threading.Lock()
        self._connections: set[WSConnection] = set()
        self._stopping = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="ws-accept", daemon=True
        )
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            thread = threading.Thread(
                target=self._serve_one, args=(sock,), name="ws-conn", daemon=True
            )
            # Start before registering: close() may join the snapshot at any
            # moment, and joining a never-started thread raises.  A thread the
            # snapshot misses shuts itself down via the stopping flag.
            thread.start()
            with self._lock:
                self._threads.append(thread)

    def _serve_one(self, sock: socket.socket) -> None:
        # Register before the handshake: close() must be able to interrupt a
        # connection that is still mid-upgrade, or its thread would sit in a
        # blocking read until the join timeout.  The stopping check shares the
        # registration lock so a close() that already snapshotted the set is
        # always observed here.
        conn = WSConnection(sock)
        with self._lock:
            self._connections.add(conn)
            aborting = self._stopping.is_set()
        try:
            if aborting:
                return
            target = perform_handshake(sock)
            self._handler(conn, target)
        except (HandshakeError, FrameError, SocketClosed, OSError):
            pass
        finally:
            conn.close()
            with self._lock:
                self._connections.discard(conn)

    def close(self) -> None:
        self._stopping.set()
        try:
            # Closing alone does not wake a blocked accept(); shutdown does.
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._listener.close()
        with self._lock:
            connections = list(self._connections)
            threads = list(self._threads)
        for conn in connections:
            conn.close()
        self._accept_thread.join(timeout=5)
        for thread in threads:
            thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
