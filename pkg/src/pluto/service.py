"""Length-prefixed TCP service over a module store.

Every request and every response is a single frame::

    u32 big-endian length | u8 opcode | body      (length == 1 + len(body))

LIST answers with the JSON listing, GET with the exact stored container and
PUT with the new id.  Failures come back as ERR frames whose body is one of
``not_found:<id>``, ``conflict:<id>``, ``too_large`` or ``bad_request:<why>``.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import struct
import threading

from .store import ConflictError, ContainerError, ModuleRecord, ModuleStore, NotFoundError, deserialize, serialize

logger = logging.getLogger(__name__)

LIST, GET, PUT, OK, ERR = 0x01, 0x02, 0x03, 0x04, 0x05
MAX_FRAME = 64 * 1024 * 1024
DEFAULT_ADDR = "127.0.0.1:7411"
ENV_ADDR = "PLUTO_STORE_ADDR"
_LEN = struct.Struct(">I")


class ServiceError(Exception):
    pass


class MalformedFrameError(ServiceError):
    pass


class FrameTooLargeError(ServiceError):
    pass


class RemoteError(ServiceError):
    """ERR frame from the server; ``code`` is the part before the colon."""

    def __init__(self, body: str):
        super().__init__(body)
        self.body = body
        self.code, _, self.detail = body.partition(":")


class RemoteNotFoundError(RemoteError, KeyError):
    pass


class RemoteConflictError(RemoteError):
    pass


def parse_addr(addr: str | tuple | None) -> tuple[str, int]:
    if addr is None:
        addr = os.environ.get(ENV_ADDR, DEFAULT_ADDR)
    if isinstance(addr, tuple):
        return addr[0], int(addr[1])
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address {addr!r} is not host:port")
    return host or "127.0.0.1", int(port)


def encode_frame(opcode: int, body: bytes = b"") -> bytes:
    if len(body) + 1 > MAX_FRAME:
        raise FrameTooLargeError(f"frame of {len(body) + 1} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(body) + 1) + bytes([opcode]) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        part = sock.recv(min(n - len(chunks), 1 << 20))
        if not part:
            raise MalformedFrameError(f"connection closed after {len(chunks)} of {n} bytes")
        chunks += part
    return bytes(chunks)


def read_frame(sock: socket.socket, max_len: int = MAX_FRAME) -> tuple[int, bytes]:
    """Read one frame.  Raises FrameTooLargeError before reading an oversize body."""
    (length,) = _LEN.unpack(_recv_exact(sock, 4))
    if length == 0:
        raise MalformedFrameError("frame length 0 leaves no room for the opcode")
    if length > max_len:
        raise FrameTooLargeError(f"declared frame length {length} exceeds {max_len}")
    data = _recv_exact(sock, length)
    return data[0], data[1:]


# ---------------------------------------------------------------------------
# server


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        store: ModuleStore = self.server.store
        while True:
            try:
                opcode, body = read_frame(sock)
            except FrameTooLargeError:
                self._send(ERR, b"too_large")
                return
            except MalformedFrameError:
                return  # client went away or sent a partial frame
            except OSError:
                return
            try:
                reply = self._dispatch(store, opcode, body)
            except _Close as exc:
                self._send(ERR, str(exc).encode())
                return
            if not self._send(*reply):
                return

    def _dispatch(self, store: ModuleStore, opcode: int, body: bytes) -> tuple[int, bytes]:
        if opcode == LIST:
            return OK, json.dumps(store.list(), sort_keys=True, separators=(",", ":")).encode()
        if opcode == GET:
            try:
                module_id = body.decode("utf-8")
            except UnicodeDecodeError:
                raise _Close("bad_request:id is not UTF-8") from None
            try:
                return OK, store.get_bytes(module_id)
            except NotFoundError:
                return ERR, f"not_found:{module_id}".encode()
            except ContainerError as exc:
                return ERR, f"corrupt:{module_id}:{exc}".encode()
        if opcode == PUT:
            try:
                return OK, store.put_bytes(body).encode()
            except ConflictError as exc:
                return ERR, str(exc).encode()
            except (ContainerError, ValueError) as exc:
                return ERR, f"bad_request:{exc}".encode()
        raise _Close(f"bad_opcode:0x{opcode:02x}")

    def _send(self, opcode: int, body: bytes) -> bool:
        try:
            self.request.sendall(encode_frame(opcode, body))
            return True
        except FrameTooLargeError:
            self.request.sendall(encode_frame(ERR, b"too_large"))
            return True
        except OSError:
            return False


class _Close(Exception):
    pass


class StoreServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, store: ModuleStore, addr):
        self.store = store
        super().__init__(parse_addr(addr), _Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "StoreServer":
        self._thread = threading.Thread(target=self.serve_forever, name="pluto-store", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(store: ModuleStore | str | os.PathLike, addr=None, background: bool = True) -> StoreServer:
    """Bind and start serving.  Port 0 picks a free port; see ``.address``."""
    if not isinstance(store, ModuleStore):
        store = ModuleStore(store)
    try:
        server = StoreServer(store, addr)
    except OSError as exc:
        raise ServiceError(f"cannot bind {addr!r}: {exc}") from exc
    logger.info("serving %s on %s", store.root, server.address)
    if background:
        return server.start()
    return server


# ---------------------------------------------------------------------------
# client


def request(addr, opcode: int, body: bytes = b"", timeout: float = 30.0) -> bytes:
    """One round trip; returns the OK body or raises a typed error."""
    host, port = parse_addr(addr)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ServiceError(f"cannot connect to {host}:{port}: {exc}") from exc
    with sock:
        sock.sendall(encode_frame(opcode, body))
        op, reply = read_frame(sock)
    if op == OK:
        return reply
    if op == ERR:
        text = reply.decode("utf-8", "replace")
        if text.startswith("not_found:"):
            raise RemoteNotFoundError(text)
        if text.startswith("conflict:"):
            raise RemoteConflictError(text)
        raise RemoteError(text)
    raise MalformedFrameError(f"unexpected response opcode 0x{op:02x}")


def client_list(addr=None) -> list[dict]:
    return json.loads(request(addr, LIST))


def client_get_bytes(addr, module_id: str) -> bytes:
    """Raw container bytes; the trailer digest is checked on the way in."""
    buf = request(addr, GET, module_id.encode("utf-8"))
    deserialize(buf)  # raises DigestError / ContainerError on damage
    return buf


def client_get(addr, module_id: str) -> ModuleRecord:
    return deserialize(request(addr, GET, module_id.encode("utf-8")))


def client_put(addr, record: ModuleRecord | bytes) -> str:
    buf = record if isinstance(record, (bytes, bytearray)) else serialize(record)
    return request(addr, PUT, bytes(buf)).decode("utf-8")
