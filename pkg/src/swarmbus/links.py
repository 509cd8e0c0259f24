"""Bus side of an adapter connection.

A link turns the framed channel into two calls, ``deliver`` and ``control``.
Failures are reported in two flavours that the bus treats differently:

* ``ADAPTER_UNREACHABLE``: nothing was sent, the step can be retried.
* ``HANDLER_FAULT``: the DELIVER frame left the bus but no valid RETURN came
  back. The fields may have been seen, so the step is not retried.
"""

from __future__ import annotations

import logging
import threading
import uuid
from typing import Any, Callable, Mapping, Optional

from .adapter import AdapterEndpoint, PhaseResult
from .errors import SwarmError
from .transport import Channel, Frame, FrameType

log = logging.getLogger(__name__)


class AdapterLink:
    def __init__(self, channel: Channel, *, timeout: float = 30.0):
        self.channel = channel
        self.timeout = timeout
        self.on_close: Optional[Callable[[str], None]] = None
        self._close_reported = False
        self._report_lock = threading.Lock()

    @property
    def principal(self) -> Optional[str]:
        return self.channel.principal

    @property
    def authenticated(self) -> bool:
        return self.channel.authenticated

    @property
    def alive(self) -> bool:
        return not self.channel.closed

    def close(self, reason: str = "CLOSED") -> None:
        self.channel.close(reason)
        self._report_close()

    def _report_close(self) -> None:
        with self._report_lock:
            if self._close_reported:
                return
            self._close_reported = True
        if self.on_close is not None:
            self.on_close(self.channel.close_reason or "CLOSED")

    def _send(self, ftype: FrameType, body: Mapping[str, Any]) -> None:
        try:
            self.channel.send(ftype, dict(body))
        except SwarmError as exc:
            if exc.code == "ENCODING":
                raise
            self._report_close()
            raise SwarmError("ADAPTER_UNREACHABLE", f"{self.principal}: {exc.code}") from None

    def _exchange(self, ftype: FrameType, body: Mapping[str, Any], key: tuple) -> Frame:
        raise NotImplementedError

    def deliver(self, instance_id: str, phase: str, fields: Mapping[str, Any]) -> PhaseResult:
        if not self.alive:
            raise SwarmError("ADAPTER_UNREACHABLE", f"{self.principal}: {self.channel.close_reason}")
        body = {"instanceId": instance_id, "phase": phase, "fields": dict(fields)}
        frame = self._exchange(FrameType.DELIVER, body, ("D", instance_id, phase))
        reply = frame.decoded()
        if frame.type is FrameType.ERROR:
            raise SwarmError("HANDLER_FAULT", str(reply.get("reason", "")))
        if frame.type is not FrameType.RETURN or not isinstance(reply.get("outputs"), dict):
            raise SwarmError("HANDLER_FAULT", f"unexpected {frame.type.name} reply")
        return PhaseResult(reply["outputs"], reply.get("verdictHint"))

    def control(self, op: str, args: Optional[Mapping[str, Any]] = None) -> dict:
        if not self.alive:
            raise SwarmError("ADAPTER_UNREACHABLE", f"{self.principal}: {self.channel.close_reason}")
        rid = uuid.uuid4().hex
        frame = self._exchange(FrameType.CONTROL, {"rid": rid, "op": op, "args": dict(args or {})}, ("C", rid))
        reply = frame.decoded()
        if frame.type is FrameType.ERROR:
            raise SwarmError(str(reply.get("code", "CONTROL_FAILED")), str(reply.get("reason", "")))
        return reply.get("result", {})


class InlineLink(AdapterLink):
    """Synchronous link to an in-process adapter endpoint.

    Each request writes one frame, lets the endpoint serve it in the calling
    thread, then reads the reply. Frames still cross a real byte pipe with
    MACs and sequence numbers.
    """

    def __init__(self, channel: Channel, endpoint: AdapterEndpoint, *, timeout: float = 30.0):
        super().__init__(channel, timeout=timeout)
        self.endpoint = endpoint
        self._lock = threading.Lock()

    def _exchange(self, ftype, body, key) -> Frame:
        with self._lock:
            self._send(ftype, body)
            try:
                self.endpoint.serve_one()
            except SwarmError as exc:
                if not self.endpoint.channel.closed:
                    self.endpoint.channel.close(exc.code)
            try:
                return self.channel.recv()
            except SwarmError as exc:
                self._report_close()
                raise SwarmError("HANDLER_FAULT", f"channel lost in flight: {exc.code}") from None


class _Pending:
    __slots__ = ("event", "frame", "error")

    def __init__(self):
        self.event = threading.Event()
        self.frame: Optional[Frame] = None
        self.error: Optional[str] = None


class ThreadedLink(AdapterLink):
    """Link to a remote adapter; a reader thread matches replies to requests."""

    def __init__(self, channel: Channel, *, timeout: float = 30.0):
        super().__init__(channel, timeout=timeout)
        self._pending: dict[tuple, _Pending] = {}
        self._lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, name=f"link-{channel.principal}", daemon=True)
        self._reader.start()

    def _exchange(self, ftype, body, key) -> Frame:
        slot = _Pending()
        with self._lock:
            if key in self._pending:
                raise SwarmError("DUPLICATE_REQUEST", repr(key))
            self._pending[key] = slot
        try:
            self._send(ftype, body)
            if not slot.event.wait(self.timeout):
                raise SwarmError("HANDLER_FAULT", "reply timed out")
            if slot.error is not None:
                raise SwarmError("HANDLER_FAULT", f"channel lost in flight: {slot.error}")
            return slot.frame
        finally:
            with self._lock:
                self._pending.pop(key, None)

    def _read_loop(self) -> None:
        while True:
            try:
                frame = self.channel.recv()
                body = frame.decoded()
            except SwarmError as exc:
                if not self.channel.closed:
                    self.channel.close(exc.code)
                break
            if "rid" in body:
                key = ("C", body["rid"])
            else:
                key = ("D", body.get("instanceId"), body.get("phase"))
            with self._lock:
                slot = self._pending.get(key)
            if slot is None:
                log.warning("unsolicited %s frame from %s", frame.type.name, self.principal)
                continue
            slot.frame = frame
            slot.event.set()
        reason = self.channel.close_reason or "CLOSED"
        with self._lock:
            for slot in self._pending.values():
                slot.error = reason
                slot.event.set()
        self._report_close()
