"""Access monitoring, consent and erasure for one deployment."""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol

from ..errors import SwarmError
from ..model import ActorClass, now_ms
from .audit import ACCESS_ACTIONS, Access, Action, AuditEntry, AuditLog, ZERO_HASH, verify_lines
from .consent import ConsentRecord, ConsentRegistry
from .store import FileStore, MemoryStore, make_store

LEDGER_ACTOR = "privacy-ledger"

__all__ = [
    "ACCESS_ACTIONS", "Access", "Action", "AuditEntry", "AuditLog", "ConsentRecord",
    "ConsentRegistry", "ErasureReport", "FileStore", "MemoryStore", "ParticipantErasure",
    "PrivacyLedger", "ZERO_HASH", "verify_lines",
]


@dataclass
class ParticipantErasure:
    per_store: list[tuple[str, int]] = field(default_factory=list)
    cancelled: list[str] = field(default_factory=list)
    unreachable: list[str] = field(default_factory=list)


class ErasureParticipant(Protocol):
    """Anything outside the ledger's stores that holds subject values (the bus)."""

    def erase_subject(self, subject_id: str) -> ParticipantErasure: ...

    def residual_scan(self, subject_id: str) -> list[str]: ...


@dataclass
class ErasureReport:
    subject_id: str
    started_at_utc: int
    per_store: list[tuple[str, int]] = field(default_factory=list)
    cancelled_instances: list[str] = field(default_factory=list)
    residual_findings: list[str] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return not self.residual_findings

    @property
    def items_deleted(self) -> int:
        return sum(n for _, n in self.per_store)

    def to_envelope(self) -> dict:
        return {
            "subjectId": self.subject_id,
            "startedAtUtc": self.started_at_utc,
            "perStore": [[name, n] for name, n in self.per_store],
            "cancelledInstances": list(self.cancelled_instances),
            "residualFindings": list(self.residual_findings),
            "success": self.success,
        }


class PrivacyLedger:
    """Audit chain, consent registry and subject-indexed stores.

    With ``data_dir`` everything is file backed: ``audit.log`` plus
    ``stores/<name>/<subject>/<key>``. Without it, everything is in memory.
    """

    def __init__(self, data_dir: Optional[os.PathLike] = None, *, fsync: bool = False):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
        self.audit = AuditLog(self.data_dir / "audit.log" if self.data_dir else None, fsync=fsync)
        self._stores: dict[str, object] = {}
        self.consents = ConsentRegistry(self.audit, self.store("consents"))
        self.participants: list[ErasureParticipant] = []
        # held by erasure for its whole run; store writers take it briefly
        self.write_lock = threading.RLock()

    def store(self, name: str):
        if name not in self._stores:
            self._stores[name] = make_store(name, self.data_dir)
        return self._stores[name]

    @property
    def stores(self) -> dict[str, object]:
        return dict(self._stores)

    def close(self) -> None:
        self.audit.close()

    # thin pass-throughs, named as the operations they implement
    def append_audit(self, **draft) -> int:
        return self.audit.append(**draft)

    def verify_chain(self) -> Optional[int]:
        return self.audit.verify_chain()

    def who_accessed(self, subject_id: str) -> list[Access]:
        return self.audit.who_accessed(subject_id)

    def grant_consent(self, subject_id: str, purpose: str, categories: Iterable) -> str:
        return self.consents.grant(subject_id, purpose, categories)

    def revoke_consent(self, token: str) -> None:
        self.consents.revoke(token)

    def check_consent(self, subject_id: str, purpose: str, categories: Iterable) -> bool:
        return self.consents.check(subject_id, purpose, categories)

    def erase_subject(self, subject_id: str) -> ErasureReport:
        """Delete every value held for ``subject_id`` and prove none remain.

        Running instances are cancelled first so nothing is written back
        behind the sweep. Audit entries are kept (they hold field names, not
        values) and flagged redacted.
        """
        report = ErasureReport(subject_id, now_ms())
        with self.write_lock:
            for p in self.participants:
                part = p.erase_subject(subject_id)
                report.per_store.extend(part.per_store)
                report.cancelled_instances.extend(part.cancelled)
                report.residual_findings.extend(f"unreachable: {u}" for u in part.unreachable)

            report.per_store.append(("consents", self.consents.erase_subject(subject_id)))
            for name, store in sorted(self._stores.items()):
                if name == "consents":
                    continue
                try:
                    report.per_store.append((name, store.delete_subject(subject_id)))
                except SwarmError:
                    report.residual_findings.append(f"unreachable: store {name}")

            redacted = self.audit.redact_subject(subject_id)
            report.residual_findings.extend(self._residual(subject_id))
            try:
                self.audit.append(
                    actor_id=LEDGER_ACTOR,
                    actor_class=ActorClass.SOFTWARE,
                    action=Action.ERASE,
                    subject_id=subject_id,
                    detail=f"items={report.items_deleted} redacted={redacted} "
                    f"cancelled={len(report.cancelled_instances)} "
                    f"residual={len(report.residual_findings)}",
                )
            except SwarmError:
                report.residual_findings.append("unreachable: audit log")
        return report

    def _residual(self, subject_id: str) -> list[str]:
        findings = []
        for name, store in sorted(self._stores.items()):
            try:
                n = store.scan(subject_id)
            except SwarmError:
                findings.append(f"unreachable: store {name}")
                continue
            if n:
                findings.append(f"store {name}: {n} items")
        held = sum(1 for r in self.consents.records_for(subject_id))
        if held:
            findings.append(f"consent registry: {held} records")
        for p in self.participants:
            findings.extend(p.residual_scan(subject_id))
        return findings
