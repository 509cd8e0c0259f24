"""Networked deployment: the bus listening on TCP, adapters and operators dialling in.

Every connection starts with a SCRAM handshake. The authenticated principal
decides what the connection is: an adapter named in the directory becomes a
link the bus delivers phases over; an operator gets a CONTROL request loop
for launching swarms, consent and GDPR actions, and chunked record transfer.
"""

from __future__ import annotations

import base64
import logging
import socket
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional

from . import envelope
from .adapter import Adapter, AdapterEndpoint
from .bus import Bus
from .errors import SwarmError
from .healthfuse.records import MAX_RECORD_SIZE, RecordStore
from .links import ThreadedLink
from .model import AdapterIdentity, SwarmDescriptor
from .scram import ScramCredential
from .transport import (
    CHUNK_SIZE,
    DEFAULT_PORT,
    Channel,
    FrameType,
    SocketStream,
    chunks,
    connect_tcp,
    server_handshake,
)
from .verifier import verify

log = logging.getLogger(__name__)


def read_envelope_file(path: Path) -> Any:
    return envelope.decode(Path(path).read_bytes().rstrip(b"\n"))


def write_envelope_file(path: Path, doc: Any) -> None:
    Path(path).write_bytes(envelope.encode(doc) + b"\n")


@dataclass(frozen=True)
class Directory:
    """Who may connect: adapter identities, SCRAM credentials, operator names."""

    identities: dict[str, AdapterIdentity] = field(default_factory=dict)
    credentials: dict[str, ScramCredential] = field(default_factory=dict)
    operators: frozenset[str] = frozenset()

    def to_envelope(self) -> dict:
        return {
            "adapters": [i.to_envelope() for _, i in sorted(self.identities.items())],
            "credentials": [c.to_envelope() for _, c in sorted(self.credentials.items())],
            "operators": sorted(self.operators),
        }

    @classmethod
    def from_envelope(cls, doc: Mapping[str, Any]) -> "Directory":
        idents = [AdapterIdentity.from_envelope(d) for d in doc.get("adapters", ())]
        creds = [ScramCredential.from_envelope(d) for d in doc.get("credentials", ())]
        return cls({i.adapter_id: i for i in idents}, {c.username: c for c in creds}, frozenset(doc.get("operators", ())))

    @classmethod
    def load(cls, path) -> "Directory":
        return cls.from_envelope(read_envelope_file(path))


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


class BusServer:
    def __init__(
        self,
        bus: Bus,
        directory: Directory,
        *,
        host: str = "127.0.0.1",
        port: int = DEFAULT_PORT,
        pending: Iterable[SwarmDescriptor] = (),
        workers: int = 32,
    ):
        self.bus = bus
        self.directory = directory
        self.host = host
        self.port = port
        bus.credentials.update(directory.credentials)
        self.records = RecordStore(bus.ledger)
        self._pending = list(pending)
        self._pending_lock = threading.Lock()
        self._uploads: dict[str, dict] = {}
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="swarm")
        self._sock: Optional[socket.socket] = None
        self._stopping = threading.Event()
        self._try_pending()

    # ---- listener -------------------------------------------------------
    def start(self) -> int:
        """Bind and accept in a background thread; returns the bound port."""
        sock = socket.create_server((self.host, self.port), reuse_port=False)
        self._sock = sock
        self.port = sock.getsockname()[1]
        threading.Thread(target=self._accept_loop, name="bus-accept", daemon=True).start()
        return self.port

    def serve_forever(self) -> None:
        self.start()
        log.info("bus listening on %s:%d", self.host, self.port)
        try:
            self._stopping.wait()
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def stop(self) -> None:
        self._stopping.set()
        if self._sock is not None:
            self._sock.close()
        for _, link in self.bus.live_links():
            link.close("SHUTDOWN")
        self._pool.shutdown(wait=False)

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, addr = self._sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._handle, args=(conn,), name=f"conn-{addr[1]}", daemon=True).start()

    def _handle(self, conn: socket.socket) -> None:
        try:
            chan = server_handshake(SocketStream(conn), self.bus.credential_lookup)
        except SwarmError as exc:
            log.warning("handshake refused: %s", exc.code)
            conn.close()
            return
        self.attach(chan)

    def attach(self, chan: Channel) -> None:
        """Route an authenticated channel. Blocks for operator sessions."""
        who = chan.principal
        if who in self.directory.identities:
            try:
                self.bus.register_adapter(self.directory.identities[who], ThreadedLink(chan))
            except SwarmError as exc:
                chan.close(exc.code)
                return
            self._try_pending()
        elif who in self.directory.operators:
            self._operator_loop(chan)
        else:
            chan.close("UNKNOWN_PRINCIPAL")

    # ---- descriptors ----------------------------------------------------
    def _try_pending(self) -> None:
        """Register descriptors that were waiting on adapters to connect."""
        with self._pending_lock:
            waiting, self._pending = self._pending, []
            for d in waiting:
                try:
                    report = self.bus.register_descriptor(d)
                except SwarmError as exc:
                    if exc.code != "VERSION_EXISTS":
                        raise
                    continue
                if report.ok:
                    log.info("registered %s v%d", d.name, d.version)
                else:
                    self._pending.append(d)

    def pending(self) -> list[SwarmDescriptor]:
        with self._pending_lock:
            return list(self._pending)

    # ---- operator surface -----------------------------------------------
    def _operator_loop(self, chan: Channel) -> None:
        while True:
            try:
                frame = chan.recv()
            except SwarmError:
                return
            body = frame.decoded()
            rid = body.get("rid", "")
            try:
                if frame.type is not FrameType.CONTROL:
                    raise SwarmError("PROTOCOL", f"operator sent {frame.type.name}")
                result = self.handle_op(body.get("op", ""), body.get("args", {}))
                chan.send(FrameType.CONTROL, {"rid": rid, "ok": True, "result": result})
            except SwarmError as exc:
                try:
                    chan.send(FrameType.ERROR, {"rid": rid, "code": exc.code, "reason": exc.detail})
                except SwarmError:
                    return

    def handle_op(self, op: str, args: Mapping[str, Any]) -> dict:
        bus, ledger = self.bus, self.bus.ledger
        if op == "ping":
            return {"adapters": sorted(i.adapter_id for i in bus.adapters()), "pending": [d.name for d in self.pending()]}
        if op in ("descriptor.verify", "descriptor.register"):
            d = SwarmDescriptor.from_envelope(args["descriptor"])
            report = bus.register_descriptor(d) if op == "descriptor.register" else verify(d, bus.adapters())
            return {"ok": report.ok, "violations": report.lines()}
        if op == "swarm.launch":
            iid = bus.launch(args["name"], args.get("version"), args["payload"], args["subjectId"], args.get("consentToken", ""))
            if args.get("wait"):
                bus.run_to_completion(iid)
            else:
                self._pool.submit(bus.run_to_completion, iid)
            return {"instanceId": iid}
        if op == "swarm.status":
            return bus.status(args["instanceId"]).to_envelope()
        if op == "consent.grant":
            return {"token": ledger.grant_consent(args["subjectId"], args["purpose"], args["categories"])}
        if op == "consent.revoke":
            ledger.revoke_consent(args["token"])
            return {}
        if op == "gdpr.erase":
            return ledger.erase_subject(args["subjectId"]).to_envelope()
        if op == "audit.who":
            return {"accesses": [a.to_envelope() for a in ledger.who_accessed(args["subjectId"])]}
        if op == "audit.verify":
            return {"firstBadSeq": ledger.verify_chain()}
        if op.startswith("record."):
            return self._record_op(op, args)
        raise SwarmError("UNKNOWN_OP", op)

    def _record_op(self, op: str, args: Mapping[str, Any]) -> dict:
        if op == "record.begin":
            uid = uuid.uuid4().hex
            self._uploads[uid] = {"subject": args["subjectId"], "filename": args["filename"], "parts": [], "size": 0}
            return {"uploadId": uid}
        if op == "record.chunk":
            up = self._uploads.get(args["uploadId"])
            if up is None:
                raise SwarmError("UNKNOWN_UPLOAD", args["uploadId"])
            if args["index"] != len(up["parts"]):
                raise SwarmError("BAD_SEQUENCE", f"chunk {args['index']}, expected {len(up['parts'])}")
            part = base64.b64decode(args["data"], validate=True)
            if len(part) > CHUNK_SIZE or up["size"] + len(part) > MAX_RECORD_SIZE:
                self._uploads.pop(args["uploadId"], None)
                raise SwarmError("LENGTH_OVERFLOW", "record too large")
            up["parts"].append(part)
            up["size"] += len(part)
            return {"received": up["size"]}
        if op == "record.commit":
            up = self._uploads.pop(args["uploadId"], None)
            if up is None:
                raise SwarmError("UNKNOWN_UPLOAD", args["uploadId"])
            rid = self.records.upload(up["subject"], up["filename"], b"".join(up["parts"]))
            return {"recordId": rid, "size": up["size"]}
        if op == "record.read":
            # each chunk read is a separate audited READ of the record
            data = self.records.download(args["subjectId"], args["recordId"])
            offset = args.get("offset", 0)
            return {"data": _b64(data[offset:offset + CHUNK_SIZE]), "size": len(data)}
        if op == "record.delete":
            self.records.delete(args["subjectId"], args["recordId"])
            return {}
        raise SwarmError("UNKNOWN_OP", op)


class OperatorClient:
    """Request/response wrapper over an authenticated operator channel."""

    def __init__(self, channel: Channel):
        self.channel = channel

    @classmethod
    def connect(cls, host: str, port: int, username: str, password: str) -> "OperatorClient":
        return cls(connect_tcp(host, port, username, password))

    def call(self, op: str, **args) -> dict:
        rid = uuid.uuid4().hex
        self.channel.send(FrameType.CONTROL, {"rid": rid, "op": op, "args": args})
        frame = self.channel.recv()
        body = frame.decoded()
        if body.get("rid") != rid:
            raise SwarmError("PROTOCOL", "reply for another request")
        if frame.type is FrameType.ERROR:
            raise SwarmError(body.get("code", "CONTROL_FAILED"), body.get("reason", ""))
        return body["result"]

    def upload_record(self, subject: str, filename: str, data: bytes) -> str:
        uid = self.call("record.begin", subjectId=subject, filename=filename)["uploadId"]
        for i, part in enumerate(chunks(data)):
            self.call("record.chunk", uploadId=uid, index=i, data=_b64(part))
        return self.call("record.commit", uploadId=uid)["recordId"]

    def download_record(self, subject: str, record_id: str) -> bytes:
        first = self.call("record.read", subjectId=subject, recordId=record_id, offset=0)
        parts, size = [base64.b64decode(first["data"])], first["size"]
        got = len(parts[0])
        while got < size:
            r = self.call("record.read", subjectId=subject, recordId=record_id, offset=got)
            parts.append(base64.b64decode(r["data"]))
            got += len(parts[-1])
        return b"".join(parts)

    def close(self) -> None:
        self.channel.close("BYE")


def run_adapter(
    adapter: Adapter,
    password: str,
    host: str = "127.0.0.1",
    port: int = DEFAULT_PORT,
    *,
    connect_timeout: float = 10.0,
    on_connect: Optional[Callable[[], None]] = None,
) -> str:
    """Dial the bus (retrying until it is up) and serve until the channel closes."""
    deadline = time.monotonic() + connect_timeout
    while True:
        try:
            chan = connect_tcp(host, port, adapter.identity.adapter_id, password)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise SwarmError("ADAPTER_UNREACHABLE", f"bus at {host}:{port}") from None
            time.sleep(0.1)
    if on_connect is not None:
        on_connect()
    return AdapterEndpoint(adapter, chan).serve_forever()
