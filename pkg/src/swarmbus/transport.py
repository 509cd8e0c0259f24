"""Length-prefixed frames over a reliable byte stream, authenticated by SCRAM.

Wire layout (all integers big-endian)::

    4 bytes   body length (<= 16 MiB)
    1 byte    type  (AUTH=0x01 DELIVER=0x02 RETURN=0x03 CONTROL=0x04 ERROR=0x05)
    8 bytes   sequence number, per direction, starting at 0
    N bytes   body
    20 bytes  HMAC-SHA-1(session key, type || seq || body); absent on AUTH frames

AUTH frames carry the SCRAM messages verbatim and use the same sequence
counter as the frames that follow them.
"""

from __future__ import annotations

import collections
import hmac
import hashlib
import socket
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Callable, Optional, Union

from . import envelope, scram
from .errors import SwarmError

MAX_BODY = 16 * 1024 * 1024
CHUNK_SIZE = 1024 * 1024
MAC_SIZE = 20
DEFAULT_PORT = 7468
_HEADER = struct.Struct(">IBQ")
HEADER_SIZE = _HEADER.size


class FrameType(IntEnum):
    AUTH = 0x01
    DELIVER = 0x02
    RETURN = 0x03
    CONTROL = 0x04
    ERROR = 0x05


@dataclass(frozen=True)
class Frame:
    type: FrameType
    seq_no: int
    body: bytes = b""
    mac: Optional[bytes] = None

    def decoded(self) -> Any:
        return envelope.decode(self.body)


def frame_mac(key: bytes, ftype: int, seq_no: int, body: bytes) -> bytes:
    return hmac.new(key, bytes([ftype]) + seq_no.to_bytes(8, "big") + body, hashlib.sha1).digest()


def encode_frame(f: Frame) -> bytes:
    if len(f.body) > MAX_BODY:
        raise SwarmError("LENGTH_OVERFLOW", str(len(f.body)))
    ftype = FrameType(f.type)
    if not 0 <= f.seq_no < 2**64:
        raise SwarmError("BAD_SEQUENCE", str(f.seq_no))
    out = _HEADER.pack(len(f.body), ftype, f.seq_no) + f.body
    if ftype is FrameType.AUTH:
        return out
    if f.mac is None or len(f.mac) != MAC_SIZE:
        raise SwarmError("MISSING_MAC")
    return out + f.mac


def _parse_header(header: bytes) -> tuple[int, FrameType, int]:
    length, tbyte, seq = _HEADER.unpack(header)
    if length > MAX_BODY:
        raise SwarmError("LENGTH_OVERFLOW", str(length))
    try:
        ftype = FrameType(tbyte)
    except ValueError:
        raise SwarmError("UNKNOWN_TYPE", hex(tbyte)) from None
    return length, ftype, seq


def decode_frame(data: bytes) -> Frame:
    if len(data) < HEADER_SIZE:
        raise SwarmError("TRUNCATED", "short header")
    length, ftype, seq = _parse_header(data[:HEADER_SIZE])
    tail = 0 if ftype is FrameType.AUTH else MAC_SIZE
    need = HEADER_SIZE + length + tail
    if len(data) < need:
        raise SwarmError("TRUNCATED", f"need {need} bytes, have {len(data)}")
    if len(data) > need:
        raise SwarmError("TRAILING_BYTES", str(len(data) - need))
    body = data[HEADER_SIZE:HEADER_SIZE + length]
    mac = data[HEADER_SIZE + length:] if tail else None
    return Frame(ftype, seq, body, mac)


def read_frame(stream) -> Frame:
    header = stream.recv_exact(HEADER_SIZE)
    length, ftype, seq = _parse_header(header)
    body = stream.recv_exact(length) if length else b""
    mac = stream.recv_exact(MAC_SIZE) if ftype is not FrameType.AUTH else None
    return Frame(ftype, seq, body, mac)


class SocketStream:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise SwarmError("CHANNEL_CLOSED", str(exc)) from exc

    def recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as exc:
                raise SwarmError("CHANNEL_CLOSED", str(exc)) from exc
            if not chunk:
                raise SwarmError("CHANNEL_CLOSED", "peer closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class _PipeBuffer:
    def __init__(self):
        self.data = bytearray()
        self.closed = False
        self.cond = threading.Condition()


class MemoryStream:
    """One end of an in-memory duplex byte pipe.

    ``tamper`` lets tests rewrite bytes in flight on the outgoing direction.
    """

    def __init__(self, inbox: _PipeBuffer, outbox: _PipeBuffer, timeout: Optional[float] = 30.0):
        self._in = inbox
        self._out = outbox
        self.timeout = timeout
        self.tamper: Optional[Callable[[bytes], bytes]] = None

    @classmethod
    def pair(cls) -> tuple["MemoryStream", "MemoryStream"]:
        a, b = _PipeBuffer(), _PipeBuffer()
        return cls(a, b), cls(b, a)

    def send(self, data: bytes) -> None:
        if self.tamper is not None:
            data = self.tamper(data)
        with self._out.cond:
            if self._out.closed:
                raise SwarmError("CHANNEL_CLOSED", "pipe closed")
            self._out.data.extend(data)
            self._out.cond.notify_all()

    def recv_exact(self, n: int) -> bytes:
        with self._in.cond:
            ok = self._in.cond.wait_for(lambda: len(self._in.data) >= n or self._in.closed, self.timeout)
            if len(self._in.data) < n:
                raise SwarmError("CHANNEL_CLOSED" if ok else "TIMEOUT", "pipe closed" if ok else "read timed out")
            out = bytes(self._in.data[:n])
            del self._in.data[:n]
            return out

    def pending(self) -> int:
        with self._in.cond:
            return len(self._in.data)

    def close(self) -> None:
        for buf in (self._in, self._out):
            with buf.cond:
                buf.closed = True
                buf.cond.notify_all()


class Channel:
    """A framed, sequence-checked and (after the handshake) MAC-checked channel.

    Any integrity failure closes the channel for good; ``close_reason`` then
    holds the error code.
    """

    def __init__(self, stream):
        self.stream = stream
        self.send_seq = 0
        self.recv_seq = 0
        self.key: Optional[bytes] = None
        self.principal: Optional[str] = None
        self.close_reason: Optional[str] = None
        self._write_lock = threading.Lock()
        self._read_lock = threading.Lock()

    @property
    def authenticated(self) -> bool:
        return self.key is not None and self.close_reason is None

    @property
    def closed(self) -> bool:
        return self.close_reason is not None

    def close(self, reason: str = "CLOSED") -> None:
        if self.close_reason is None:
            self.close_reason = reason
        self.stream.close()

    def _fail(self, code: str, detail: str = "") -> SwarmError:
        self.close(code)
        return SwarmError(code, detail)

    def send_auth(self, text: str) -> None:
        if self.key is not None:
            raise SwarmError("PROTOCOL", "AUTH frame after handshake")
        self._send_raw(FrameType.AUTH, text.encode("utf-8"))

    def send(self, ftype: FrameType, body: Union[bytes, Any]) -> None:
        if self.key is None:
            raise SwarmError("UNAUTHENTICATED", "channel has no session key")
        if not isinstance(body, bytes):
            body = envelope.encode(body)
        self._send_raw(ftype, body)

    def _send_raw(self, ftype: FrameType, body: bytes) -> None:
        if self.closed:
            raise SwarmError("CHANNEL_CLOSED", self.close_reason)
        with self._write_lock:
            seq = self.send_seq
            mac = None if ftype is FrameType.AUTH else frame_mac(self.key, ftype, seq, body)
            data = encode_frame(Frame(ftype, seq, body, mac))
            self.stream.send(data)
            self.send_seq += 1

    def recv(self) -> Frame:
        if self.closed:
            raise SwarmError("CHANNEL_CLOSED", self.close_reason)
        with self._read_lock:
            try:
                frame = read_frame(self.stream)
            except SwarmError as exc:
                raise self._fail(exc.code, exc.detail) from None
            if frame.seq_no < self.recv_seq:
                raise self._fail("REPLAY", f"seq {frame.seq_no} < {self.recv_seq}")
            if frame.seq_no > self.recv_seq:
                raise self._fail("GAP", f"seq {frame.seq_no} > {self.recv_seq}")
            if frame.type is FrameType.AUTH:
                if self.key is not None:
                    raise self._fail("PROTOCOL", "AUTH frame after handshake")
            else:
                if self.key is None:
                    raise self._fail("UNAUTHENTICATED", "frame before handshake")
                expected = frame_mac(self.key, frame.type, frame.seq_no, frame.body)
                if not hmac.compare_digest(expected, frame.mac):
                    raise self._fail("MAC_FAIL", f"seq {frame.seq_no}")
            self.recv_seq += 1
            return frame

    def recv_auth(self) -> str:
        frame = self.recv()
        if frame.type is not FrameType.AUTH:
            raise self._fail("PROTOCOL", "expected AUTH frame")
        try:
            return frame.body.decode("utf-8")
        except UnicodeDecodeError:
            raise self._fail("MALFORMED_MESSAGE", "AUTH body is not UTF-8") from None


def client_handshake(stream, username: str, password: str, nonce: Optional[str] = None) -> Channel:
    """Authenticate to a server over ``stream``; the peer principal is the server."""
    chan = Channel(stream)
    result = scram.handshake_step(scram.client_start(username, password, nonce))
    try:
        chan.send_auth(result.message)
        result = scram.handshake_step(result.state, chan.recv_auth())
        if result.failed:
            raise chan._fail(result.error)
        chan.send_auth(result.message)
        result = scram.handshake_step(result.state, chan.recv_auth())
    except SwarmError as exc:
        chan.close(exc.code)
        raise
    if not result.authenticated:
        raise chan._fail(result.error or "HANDSHAKE_FAILED")
    chan.key = result.session_key
    chan.principal = username
    return chan


def server_handshake(stream, lookup: scram.CredentialLookup, nonce: Optional[str] = None) -> Channel:
    """Authenticate a client; ``channel.principal`` is the authenticated username."""
    chan = Channel(stream)
    state = scram.server_start(lookup, nonce)
    try:
        result = scram.handshake_step(state, chan.recv_auth())
        if result.failed:
            chan.send_auth("e=other-error")
            raise chan._fail(result.error)
        chan.send_auth(result.message)
        result = scram.handshake_step(result.state, chan.recv_auth())
        if result.message is not None:
            chan.send_auth(result.message)
    except SwarmError as exc:
        chan.close(exc.code)
        raise
    if not result.authenticated:
        raise chan._fail(result.error or "HANDSHAKE_FAILED")
    chan.key = result.session_key
    chan.principal = result.state.username
    return chan


def open_channel(
    stream,
    *,
    lookup: Optional[scram.CredentialLookup] = None,
    username: Optional[str] = None,
    password: Optional[str] = None,
) -> Channel:
    """Server side when given a credential ``lookup``, client side otherwise."""
    if lookup is not None:
        return server_handshake(stream, lookup)
    if username is None or password is None:
        raise SwarmError("USAGE", "client side needs username and password")
    return client_handshake(stream, username, password)


def local_channel_pair(lookup: scram.CredentialLookup, username: str, password: str) -> tuple[Channel, Channel]:
    """Run a real handshake over an in-memory pipe. Returns (server, client) ends."""
    s_stream, c_stream = MemoryStream.pair()
    box: dict[str, Any] = {}

    def serve():
        try:
            box["server"] = server_handshake(s_stream, lookup)
        except SwarmError as exc:
            box["error"] = exc

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    try:
        client = client_handshake(c_stream, username, password)
    finally:
        t.join()
    if "error" in box:
        raise box["error"]
    return box["server"], client


def connect_tcp(host: str, port: int, username: str, password: str, timeout: float = 10.0) -> Channel:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return client_handshake(SocketStream(sock), username, password)


def chunks(data: bytes, size: int = CHUNK_SIZE) -> list[bytes]:
    """Split a large payload into CONTROL-sized pieces (at least one)."""
    return [data[i:i + size] for i in range(0, len(data), size)] or [b""]
