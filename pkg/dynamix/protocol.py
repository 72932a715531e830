"""
DYNAMIX — Arbitrator/Worker Wire Protocol
==========================================

Every message is one frame:

    4-byte big-endian unsigned length | UTF-8 JSON document of that length

The JSON document always carries the fields of ProtocolMessage
(version, kind, session_id, worker_id, step, episode, payload) and is
written with sorted keys and compact separators, so encoding is bit-exact
and reproducible.

Two transports share one connection interface (send / recv / close):

  in-process : queue-backed connection pairs (frames still pass through
               the codec, so both transports exercise the same bytes)
  socket     : TCP stream, one connection per worker
"""

import enum
import json
import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

from .errors import ProtocolError

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">I")
MAX_FRAME_SIZE = 16 * 1024 * 1024


class MessageKind(str, enum.Enum):
    HELLO = "HELLO"
    READY = "READY"
    STATE_REPORT = "STATE_REPORT"
    ACTION = "ACTION"
    EPISODE_END = "EPISODE_END"
    TERMINATE = "TERMINATE"
    ACK = "ACK"


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    session_id: str
    worker_id: int
    step: int = 0
    episode: int = 0
    payload: dict = field(default_factory=dict)
    version: int = PROTOCOL_VERSION

    def to_dict(self):
        return {
            "version": self.version,
            "kind": self.kind.value,
            "session_id": self.session_id,
            "worker_id": self.worker_id,
            "step": self.step,
            "episode": self.episode,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            kind = MessageKind(doc["kind"])
        except ValueError as e:
            raise ProtocolError(f"unknown message kind {doc.get('kind')!r}") from e
        except (KeyError, TypeError) as e:
            raise ProtocolError("message has no kind") from e
        missing = {"version", "session_id", "worker_id", "step", "episode", "payload"} - set(doc)
        if missing:
            raise ProtocolError(f"{kind.value} message missing field(s): {sorted(missing)}")
        if not isinstance(doc["payload"], dict):
            raise ProtocolError(f"{kind.value} payload must be an object")
        return cls(
            kind=kind,
            session_id=str(doc["session_id"]),
            worker_id=int(doc["worker_id"]),
            step=int(doc["step"]),
            episode=int(doc["episode"]),
            payload=doc["payload"],
            version=int(doc["version"]),
        )


# ══════════════════════════════════════════════
# 1. Frame codec
# ══════════════════════════════════════════════

def encode_body(message):
    try:
        text = json.dumps(message.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False)
    except (TypeError, ValueError) as e:
        raise ProtocolError(f"cannot encode {message.kind.value} message: {e}") from e
    return text.encode("utf-8")


def encode_frame(message):
    body = encode_body(message)
    if len(body) > MAX_FRAME_SIZE:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds MAX_FRAME_SIZE")
    return HEADER.pack(len(body)) + body


def decode_body(body):
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed frame body: {e}") from e
    if not isinstance(doc, dict):
        raise ProtocolError("frame body is not a JSON object")
    # version is checked by the receiver; the arbitrator rejects mismatches at HELLO
    return ProtocolMessage.from_dict(doc)


def decode_frame(frame):
    """Decode one complete frame (length prefix included)."""
    if len(frame) < HEADER.size:
        raise ProtocolError("frame shorter than its length prefix")
    (length,) = HEADER.unpack_from(frame)
    if length > MAX_FRAME_SIZE:
        raise ProtocolError(f"declared frame length {length} exceeds MAX_FRAME_SIZE")
    if len(frame) != HEADER.size + length:
        raise ProtocolError(f"frame length mismatch: header says {length}, got {len(frame) - HEADER.size}")
    return decode_body(frame[HEADER.size:])


def _recv_exactly(sock, n):
    chunks, remaining = [], n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ProtocolError("connection closed by peer")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock):
    (length,) = HEADER.unpack(_recv_exactly(sock, HEADER.size))
    if length > MAX_FRAME_SIZE:
        raise ProtocolError(f"declared frame length {length} exceeds MAX_FRAME_SIZE")
    return decode_body(_recv_exactly(sock, length))


# ══════════════════════════════════════════════
# 2. In-process transport
# ══════════════════════════════════════════════

_CLOSED = object()


class QueueConnection:
    def __init__(self, inbox, outbox, name):
        self._inbox = inbox
        self._outbox = outbox
        self.name = name
        self.closed = False

    def send(self, message):
        if self.closed:
            raise ProtocolError(f"{self.name}: send on closed connection")
        self._outbox.put(encode_frame(message))

    def recv(self, timeout=None):
        """Next message; raises TimeoutError when nothing arrives in `timeout` seconds."""
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"{self.name}: no message within {timeout} s") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise ProtocolError(f"{self.name}: connection closed by peer")
        return decode_frame(item)

    def close(self):
        if not self.closed:
            self.closed = True
            self._outbox.put(_CLOSED)


class InProcessHub:
    """Listener for in-process workers: connect() on the worker side, accept() on the arbitrator side."""

    address = "inproc"

    def __init__(self):
        self._pending = queue.Queue()

    def connect(self, timeout=None):
        a_to_w, w_to_a = queue.Queue(), queue.Queue()
        n = self._pending.qsize()
        self._pending.put(QueueConnection(w_to_a, a_to_w, f"arbitrator<-conn{n}"))
        return QueueConnection(a_to_w, w_to_a, f"worker-conn{n}")

    def accept(self, timeout=None):
        try:
            return self._pending.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"no worker connected within {timeout} s") from None

    def close(self):
        pass


# ══════════════════════════════════════════════
# 3. Socket transport
# ══════════════════════════════════════════════

def parse_address(address):
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ProtocolError(f"bad address {address!r}, expected HOST:PORT")
    return host or "127.0.0.1", int(port)


class SocketConnection:
    def __init__(self, sock, name):
        self._sock = sock
        self._send_lock = threading.Lock()
        self.name = name
        self.closed = False

    def send(self, message):
        frame = encode_frame(message)
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as e:
                raise ProtocolError(f"{self.name}: send failed: {e}") from e

    def recv(self, timeout=None):
        self._sock.settimeout(timeout)
        try:
            return read_frame(self._sock)
        except socket.timeout:
            raise TimeoutError(f"{self.name}: no message within {timeout} s") from None
        except OSError as e:
            raise ProtocolError(f"{self.name}: receive failed: {e}") from e

    def close(self):
        if not self.closed:
            self.closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


class SocketListener:
    """TCP listener; port 0 picks a free port (see `.address`)."""

    def __init__(self, address="127.0.0.1:0", backlog=64):
        host, port = parse_address(address)
        try:
            self._sock = socket.create_server((host, port), backlog=backlog)
        except OSError as e:
            raise ProtocolError(f"cannot listen on {address}: {e}") from e
        bound_host, bound_port = self._sock.getsockname()[:2]
        self.address = f"{bound_host}:{bound_port}"
        logger.info("listening on %s", self.address)

    def accept(self, timeout=None):
        self._sock.settimeout(timeout)
        try:
            conn, peer = self._sock.accept()
        except socket.timeout:
            raise TimeoutError(f"no worker connected within {timeout} s") from None
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketConnection(conn, f"arbitrator<-{peer[0]}:{peer[1]}")

    def connect(self, timeout=None):
        return connect_socket(self.address, timeout)

    def close(self):
        self._sock.close()


def connect_socket(address, timeout=None):
    host, port = parse_address(address)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise ProtocolError(f"cannot connect to arbitrator at {address}: {e}") from e
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketConnection(sock, f"worker->{address}")
