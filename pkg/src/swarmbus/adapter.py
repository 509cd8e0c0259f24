"""Adapter side of the control protocol.

An adapter is a node reachable only through swarms: it receives DELIVER
frames carrying exactly the fields of one phase and answers with RETURN (or
ERROR on a handler fault). CONTROL frames carry housekeeping requests from the
bus (erasure, residual scans, ping).
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Union

from .errors import SwarmError
from .model import AdapterIdentity
from .transport import Channel, FrameType

log = logging.getLogger(__name__)


@dataclass
class PhaseResult:
    """What a handler hands back: outputs only, never routing decisions.

    ``verdict_hint`` travels to the bus for diagnostics; routing is decided by
    the bus from the merged payload.
    """

    outputs: dict[str, Any] = field(default_factory=dict)
    verdict_hint: Optional[str] = None


Handler = Callable[[Mapping[str, Any]], Union[PhaseResult, Mapping[str, Any]]]


class Adapter:
    """Base adapter with per-phase handlers and a per-instance case file.

    The case file keeps what the adapter was given, so erasure has something
    real to delete and scans have something real to find.
    """

    def __init__(self, identity: AdapterIdentity, handlers: Optional[dict[str, Handler]] = None, *, keep_case_files: bool = True):
        self.identity = identity
        self.handlers = dict(handlers or {})
        self.keep_case_files = keep_case_files
        self.case_files: dict[str, dict[str, Any]] = {}
        self.observed: list[tuple[str, str, frozenset[str]]] = []
        self._lock = threading.Lock()

    def handle(self, instance_id: str, phase: str, fields: Mapping[str, Any]) -> PhaseResult:
        with self._lock:
            self.observed.append((instance_id, phase, frozenset(fields)))
            if self.keep_case_files:
                self.case_files.setdefault(instance_id, {}).update(fields)
        try:
            handler = self.handlers[phase]
        except KeyError:
            raise SwarmError("HANDLER_FAULT", f"no handler for phase {phase}") from None
        result = handler(fields)
        if not isinstance(result, PhaseResult):
            result = PhaseResult(dict(result))
        return result

    def erase_instances(self, instance_ids) -> int:
        with self._lock:
            return sum(1 for i in instance_ids if self.case_files.pop(i, None) is not None)

    def residual(self, instance_ids) -> int:
        with self._lock:
            return sum(1 for i in instance_ids if i in self.case_files)

    def control(self, op: str, args: Mapping[str, Any]) -> dict:
        if op == "ping":
            return {"adapterId": self.identity.adapter_id}
        if op == "erase":
            return {"deleted": self.erase_instances(args.get("instances", ()))}
        if op == "scan":
            return {"found": self.residual(args.get("instances", ()))}
        if op == "observed":
            # field names only, so the bus can check minimization from this side
            with self._lock:
                seen = list(self.observed)
            return {"deliveries": [{"instanceId": i, "phase": p, "fields": sorted(f)} for i, p, f in seen]}
        raise SwarmError("UNKNOWN_OP", op)


class AdapterEndpoint:
    """Serves one authenticated channel on behalf of an :class:`Adapter`."""

    def __init__(self, adapter: Adapter, channel: Channel):
        self.adapter = adapter
        self.channel = channel

    def serve_one(self) -> None:
        frame = self.channel.recv()
        body = frame.decoded()
        if frame.type is FrameType.DELIVER:
            iid, phase = body["instanceId"], body["phase"]
            try:
                result = self.adapter.handle(iid, phase, body["fields"])
            except Exception as exc:  # any handler crash is reported, not propagated
                reason = exc.detail if isinstance(exc, SwarmError) else f"{type(exc).__name__}: {exc}"
                self.channel.send(FrameType.ERROR, {"instanceId": iid, "phase": phase, "code": "HANDLER_FAULT", "reason": reason})
                return
            try:
                reply = {"instanceId": iid, "phase": phase, "outputs": result.outputs, "verdictHint": result.verdict_hint}
                self.channel.send(FrameType.RETURN, reply)
            except SwarmError as exc:
                if exc.code != "ENCODING":
                    raise
                self.channel.send(FrameType.ERROR, {"instanceId": iid, "phase": phase, "code": "HANDLER_FAULT", "reason": exc.detail})
        elif frame.type is FrameType.CONTROL:
            rid = body.get("rid", "")
            try:
                result = self.adapter.control(body.get("op", ""), body.get("args", {}))
                self.channel.send(FrameType.CONTROL, {"rid": rid, "ok": True, "result": result})
            except SwarmError as exc:
                self.channel.send(FrameType.ERROR, {"rid": rid, "code": exc.code, "reason": exc.detail})
        else:
            raise SwarmError("PROTOCOL", f"adapter cannot handle {frame.type.name}")

    def serve_forever(self) -> str:
        """Serve until the channel closes; returns the close reason."""
        while True:
            try:
                self.serve_one()
            except SwarmError as exc:
                if not self.channel.closed:
                    self.channel.close(exc.code)
                log.info("adapter %s channel closed: %s", self.adapter.identity.adapter_id, self.channel.close_reason)
                return self.channel.close_reason
