"""Hash-chained access log.

Each entry records who touched which fields of whose data, never the values.
``hash = SHA-256(prev_hash || canonical bytes of the entry without hash)``;
the first entry chains from 32 zero bytes. The ``redacted`` flag is an
annotation set by erasure and is excluded from the hashed bytes so that
redaction does not break the chain; everything else is covered.

On disk the log is one canonical-envelope line per entry, LF-terminated.
"""

from __future__ import annotations

import hashlib
import os
import re
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from .. import envelope
from ..errors import SwarmError
from ..model import ActorClass, now_ms

ZERO_HASH = bytes(32)
_HEX64 = re.compile(r"[0-9a-f]{64}")


class Action(str, Enum):
    REGISTER = "REGISTER"
    LAUNCH = "LAUNCH"
    DELIVER = "DELIVER"
    RETURN = "RETURN"
    READ = "READ"
    WRITE = "WRITE"
    DELETE = "DELETE"
    ERASE = "ERASE"
    CONSENT_GRANT = "CONSENT_GRANT"
    CONSENT_REVOKE = "CONSENT_REVOKE"
    SUPPORT_ACCESS = "SUPPORT_ACCESS"


# consent bookkeeping is not an access to the subject's data
ACCESS_ACTIONS = frozenset(Action) - {Action.CONSENT_GRANT, Action.CONSENT_REVOKE}


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    prev_hash: bytes
    hash: bytes
    timestamp_utc: int
    actor_id: str
    actor_class: ActorClass
    action: Action
    subject_id: Optional[str] = None
    instance_id: Optional[str] = None
    field_names: frozenset[str] = frozenset()
    categories: frozenset[str] = frozenset()
    detail: str = ""
    redacted: bool = False

    def _body(self) -> dict:
        return {
            "seq": self.seq,
            "prevHash": self.prev_hash.hex(),
            "timestampUtc": self.timestamp_utc,
            "actorId": self.actor_id,
            "actorClass": ActorClass(self.actor_class).value,
            "action": Action(self.action).value,
            "subjectId": self.subject_id,
            "instanceId": self.instance_id,
            "fieldNames": sorted(self.field_names),
            "categories": sorted(self.categories),
            "detail": self.detail,
        }

    def hashed_bytes(self) -> bytes:
        """Canonical bytes covered by the hash (no ``hash``, no ``redacted``)."""
        return envelope.encode(self._body())

    def compute_hash(self) -> bytes:
        return hashlib.sha256(self.prev_hash + self.hashed_bytes()).digest()

    def to_envelope(self) -> dict:
        doc = self._body()
        doc["hash"] = self.hash.hex()
        doc["redacted"] = self.redacted
        return doc

    @classmethod
    def from_envelope(cls, doc: Mapping[str, Any]) -> "AuditEntry":
        try:
            if set(doc) != set(_ENTRY_KEYS):
                raise ValueError(f"unexpected keys {sorted(doc)}")
            for key in ("prevHash", "hash"):
                if not isinstance(doc[key], str) or not _HEX64.fullmatch(doc[key]):
                    raise ValueError(f"bad {key}")
            if not isinstance(doc["seq"], int) or isinstance(doc["seq"], bool):
                raise ValueError("bad seq")
            if not isinstance(doc["redacted"], bool):
                raise ValueError("bad redacted flag")
            return cls(
                seq=doc["seq"],
                prev_hash=bytes.fromhex(doc["prevHash"]),
                hash=bytes.fromhex(doc["hash"]),
                timestamp_utc=doc["timestampUtc"],
                actor_id=doc["actorId"],
                actor_class=ActorClass(doc["actorClass"]),
                action=Action(doc["action"]),
                subject_id=doc["subjectId"],
                instance_id=doc["instanceId"],
                field_names=frozenset(doc["fieldNames"]),
                categories=frozenset(doc["categories"]),
                detail=doc["detail"],
                redacted=doc["redacted"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SwarmError("MALFORMED_ENTRY", str(exc)) from exc


_ENTRY_KEYS = (
    "seq", "prevHash", "hash", "timestampUtc", "actorId", "actorClass", "action",
    "subjectId", "instanceId", "fieldNames", "categories", "detail", "redacted",
)


@dataclass(frozen=True)
class Access:
    """One row of a ``who_accessed`` answer."""

    actor_id: str
    actor_class: ActorClass
    action: Action
    field_names: frozenset[str]
    timestamp_utc: int
    instance_id: Optional[str] = None
    redacted: bool = False

    def to_envelope(self) -> dict:
        return {
            "actorId": self.actor_id,
            "actorClass": self.actor_class.value,
            "action": self.action.value,
            "fieldNames": sorted(self.field_names),
            "timestampUtc": self.timestamp_utc,
            "instanceId": self.instance_id,
            "redacted": self.redacted,
        }


def verify_lines(data: bytes) -> Optional[int]:
    """Return the first bad sequence number of a serialised log, or None."""
    if not data:
        return None
    lines = data.split(b"\n")
    terminated = lines[-1] == b""
    if terminated:
        lines.pop()
    prev = ZERO_HASH
    for i, raw in enumerate(lines):
        try:
            entry = AuditEntry.from_envelope(envelope.decode(raw))
        except SwarmError:
            return i
        if envelope.encode(entry.to_envelope()) != raw:
            return i
        if entry.seq != i or entry.prev_hash != prev or entry.compute_hash() != entry.hash:
            return i
        if i == len(lines) - 1 and not terminated:
            return i
        prev = entry.hash
    return None


class AuditLog:
    """Append-only, single-writer audit chain, in memory or backed by a file."""

    def __init__(self, path: Optional[os.PathLike] = None, *, fsync: bool = False):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self.available = True
        self._entries: list[AuditEntry] = []
        self._lock = threading.RLock()
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                for raw in self.path.read_bytes().splitlines():
                    self._entries.append(AuditEntry.from_envelope(envelope.decode(raw)))
            self._fh = open(self.path, "ab")

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[AuditEntry]:
        with self._lock:
            return list(self._entries)

    def append(
        self,
        *,
        actor_id: str,
        actor_class: ActorClass,
        action: Action,
        subject_id: Optional[str] = None,
        instance_id: Optional[str] = None,
        field_names: Iterable[str] = (),
        categories: Iterable[str] = (),
        detail: str = "",
        timestamp_utc: Optional[int] = None,
    ) -> int:
        """Chain and persist one entry; returns its sequence number.

        Raises STORE_UNAVAILABLE without changing the chain if the entry
        cannot be persisted; the caller must then abandon the guarded action.
        """
        with self._lock:
            if not self.available:
                raise SwarmError("STORE_UNAVAILABLE", "audit log")
            seq = len(self._entries)
            prev = self._entries[-1].hash if self._entries else ZERO_HASH
            ts = now_ms() if timestamp_utc is None else timestamp_utc
            if self._entries:
                ts = max(ts, self._entries[-1].timestamp_utc)
            draft = AuditEntry(
                seq=seq,
                prev_hash=prev,
                hash=ZERO_HASH,
                timestamp_utc=ts,
                actor_id=actor_id,
                actor_class=ActorClass(actor_class),
                action=Action(action),
                subject_id=subject_id,
                instance_id=instance_id,
                field_names=frozenset(field_names),
                categories=frozenset(str(getattr(c, "value", c)) for c in categories),
                detail=detail,
            )
            entry = replace(draft, hash=draft.compute_hash())
            if self._fh is not None:
                try:
                    self._fh.write(envelope.encode(entry.to_envelope()) + b"\n")
                    self._fh.flush()
                    if self.fsync:
                        os.fsync(self._fh.fileno())
                except OSError as exc:
                    raise SwarmError("STORE_UNAVAILABLE", str(exc)) from exc
            self._entries.append(entry)
            return seq

    def serialize(self) -> bytes:
        with self._lock:
            return b"".join(envelope.encode(e.to_envelope()) + b"\n" for e in self._entries)

    def verify_chain(self) -> Optional[int]:
        """First sequence number whose hash or linkage fails, or None if intact.

        File-backed logs are checked from the bytes on disk.
        """
        with self._lock:
            if self.path is not None:
                return verify_lines(self.path.read_bytes())
            return verify_lines(self.serialize())

    def who_accessed(self, subject_id: str) -> list[Access]:
        with self._lock:
            return [
                Access(e.actor_id, e.actor_class, e.action, e.field_names, e.timestamp_utc, e.instance_id, e.redacted)
                for e in self._entries
                if e.subject_id == subject_id and e.action in ACCESS_ACTIONS
            ]

    def redact_subject(self, subject_id: str) -> int:
        """Flag every entry about ``subject_id`` as redacted and rewrite the file."""
        with self._lock:
            n = 0
            for i, e in enumerate(self._entries):
                if e.subject_id == subject_id and not e.redacted:
                    self._entries[i] = replace(e, redacted=True)
                    n += 1
            if n and self.path is not None:
                tmp = self.path.with_name(self.path.name + ".tmp")
                tmp.write_bytes(self.serialize())
                self._fh.close()
                os.replace(tmp, self.path)
                self._fh = open(self.path, "ab")
            return n
