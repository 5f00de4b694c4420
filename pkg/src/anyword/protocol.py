"""Length-prefixed framing for out-of-process denoiser and segmentor services.

A frame is ``u32 length`` followed by the payload. The payload is ``u32
header length``, a UTF-8 JSON header, then the raw tensor bytes in header
order. Tensors are little-endian float32; the header carries each shape.
"""
from __future__ import annotations

import json
import logging
import socket
import struct
import threading
from typing import Mapping
from urllib.parse import urlparse

import numpy as np

from anyword.errors import BackendFailure, BackendUnavailable, ProtocolError

log = logging.getLogger(__name__)

_U32 = struct.Struct("<I")
MAX_FRAME = 1 << 30


def pack_message(header: Mapping, tensors: Mapping[str, np.ndarray] | None = None) -> bytes:
    tensors = dict(tensors or {})
    head = dict(header)
    head["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    head_bytes = json.dumps(head, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values())
    payload = _U32.pack(len(head_bytes)) + head_bytes + body
    return _U32.pack(len(payload)) + payload


def unpack_payload(payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(payload) < 4:
        raise ProtocolError("payload shorter than its header prefix")
    (hlen,) = _U32.unpack_from(payload)
    try:
        header = json.loads(payload[4:4 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad header: {exc}") from exc
    offset = 4 + hlen
    tensors = {}
    for spec in header.get("tensors", []):
        shape = tuple(int(s) for s in spec["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + n > len(payload):
            raise ProtocolError(f"tensor {spec['name']!r} runs past the end of the frame")
        tensors[spec["name"]] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=offset).reshape(shape).copy()
        offset += n
    if offset != len(payload):
        raise ProtocolError("trailing bytes after the last tensor")
    return header, tensors


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def send_message(sock: socket.socket, header: Mapping, tensors: Mapping[str, np.ndarray] | None = None) -> None:
    sock.sendall(pack_message(header, tensors))


def recv_message(sock: socket.socket) -> tuple[dict, dict[str, np.ndarray]]:
    (n,) = _U32.unpack(_recv_exact(sock, 4))
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds the limit")
    return unpack_payload(_recv_exact(sock, n))


def parse_uri(uri: str) -> tuple[str, int]:
    u = urlparse(uri)
    if u.scheme not in ("tcp", "anyword") or not u.hostname or not u.port:
        raise BackendUnavailable(f"unsupported backend URI {uri!r}; expected tcp://host:port")
    return u.hostname, u.port


class Connection:
    """One socket, serialised request/response."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._lock = threading.Lock()

    @classmethod
    def open(cls, uri: str, timeout: float = 30.0) -> Connection:
        host, port = parse_uri(uri)
        try:
            return cls(socket.create_connection((host, port), timeout=timeout))
        except OSError as exc:
            raise BackendUnavailable(f"cannot reach {uri}: {exc}") from exc

    def request(self, header: Mapping, tensors=None) -> tuple[dict, dict[str, np.ndarray]]:
        with self._lock:
            try:
                send_message(self.sock, header, tensors)
                reply, out = recv_message(self.sock)
            except (OSError, ConnectionError) as exc:
                raise BackendUnavailable(f"transport failure: {exc}") from exc
        if "error" in reply:
            raise BackendFailure(f"remote error: {reply['error']}")
        return reply, out

    def close(self) -> None:
        self.sock.close()


def serve_connection(sock: socket.socket, handler) -> None:
    """Answer requests on ``sock`` with ``handler(header, tensors)`` until EOF."""
    with sock:
        while True:
            try:
                header, tensors = recv_message(sock)
            except ConnectionError:
                return
            try:
                reply, out = handler(header, tensors)
            except Exception as exc:  # reported to the client, server keeps going
                log.exception("handler failed")
                reply, out = {"error": f"{type(exc).__name__}: {exc}"}, {}
            send_message(sock, reply, out)
