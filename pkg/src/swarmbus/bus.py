"""The integration layer: registries, launching, routing with minimization.

The bus holds every instance's payload. On each step it hands the phase's
adapter exactly the fields that phase declares as inputs; everything else
stays with the bus. Each delivery and each return is audited before the data
moves on, and every hop is recorded on the instance.
"""

from __future__ import annotations

import itertools
import logging
import threading
import time
import uuid
from dataclasses import dataclass, replace
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from . import envelope
from .adapter import Adapter, AdapterEndpoint
from .errors import SwarmError
from .ledger import Action, ParticipantErasure, PrivacyLedger
from .links import AdapterLink, InlineLink
from .model import (
    ActorClass,
    AdapterIdentity,
    HopRecord,
    Status,
    SwarmDescriptor,
    SwarmInstance,
    canonical_decode,
    canonical_encode,
    now_ms,
)
from .scram import ScramCredential
from .transport import local_channel_pair
from .verifier import VerificationReport, adapter_may_serve, verify

log = logging.getLogger(__name__)

BUS_ACTOR = "bus"
RETRY_BACKOFF = (0.1, 0.4, 0.9)


@dataclass(frozen=True)
class InstanceStatus:
    """What ``status`` may reveal: no payload values."""

    instance_id: str
    status: Status
    current_phase: Optional[str]
    hop_trail: tuple[HopRecord, ...]
    detail: str = ""

    def to_envelope(self) -> dict:
        return {
            "instanceId": self.instance_id,
            "status": self.status.value,
            "currentPhase": self.current_phase,
            "hopTrail": [h.to_envelope() for h in self.hop_trail],
            "detail": self.detail,
        }


class Bus:
    def __init__(
        self,
        ledger: Optional[PrivacyLedger] = None,
        *,
        credentials: Optional[dict[str, ScramCredential]] = None,
        retry_backoff: Sequence[float] = RETRY_BACKOFF,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.ledger = ledger or PrivacyLedger()
        self.credentials: dict[str, ScramCredential] = dict(credentials or {})
        self.retry_backoff = tuple(retry_backoff)
        self.sleep = sleep
        self._adapters: dict[str, tuple[AdapterIdentity, AdapterLink]] = {}
        self._descriptors: dict[tuple[str, int], tuple[SwarmDescriptor, VerificationReport]] = {}
        self._instances: dict[str, SwarmInstance] = {}
        self._inflight: dict[str, frozenset[str]] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry = threading.RLock()
        self._rr: dict[str, itertools.count] = {}
        self.instance_store = self.ledger.store("instances")
        self.ledger.participants.append(self)

    # ---- audit helper -------------------------------------------------
    def _audit(self, **draft) -> int:
        return self.ledger.audit.append(**draft)

    # ---- adapters -----------------------------------------------------
    def credential_lookup(self, username: str) -> Optional[ScramCredential]:
        return self.credentials.get(username)

    def register_adapter(self, identity: AdapterIdentity, link: AdapterLink) -> str:
        if not link.authenticated:
            raise SwarmError("UNAUTHENTICATED", identity.adapter_id)
        if link.principal != identity.adapter_id:
            raise SwarmError("IDENTITY_MISMATCH", f"channel principal {link.principal!r} != {identity.adapter_id!r}")
        with self._registry:
            old = self._adapters.get(identity.adapter_id)
            self._audit(
                actor_id=identity.adapter_id,
                actor_class=identity.actor_class,
                action=Action.REGISTER,
                detail="replaced stale channel" if old else "registered",
            )
            if old is not None:
                old[1].on_close = None
                old[1].close("REPLACED")
            link.on_close = lambda reason, aid=identity.adapter_id, lk=link: self._link_closed(aid, lk, reason)
            self._adapters[identity.adapter_id] = (identity, link)
        return identity.adapter_id

    def _link_closed(self, adapter_id: str, link: AdapterLink, reason: str) -> None:
        with self._registry:
            current = self._adapters.get(adapter_id)
            if current is None or current[1] is not link:
                return
            identity = current[0]
        try:
            self._audit(
                actor_id=adapter_id,
                actor_class=identity.actor_class,
                action=Action.REGISTER,
                detail=f"channel closed: {reason}",
            )
        except SwarmError:
            log.error("could not audit closure of %s (%s)", adapter_id, reason)

    def attach_local(self, adapter: Adapter, password: str) -> str:
        """Connect an in-process adapter over a real SCRAM handshake and register it."""
        server, client = local_channel_pair(self.credential_lookup, adapter.identity.adapter_id, password)
        link = InlineLink(server, AdapterEndpoint(adapter, client))
        return self.register_adapter(adapter.identity, link)

    def adapters(self) -> list[AdapterIdentity]:
        with self._registry:
            return [ident for ident, _ in self._adapters.values()]

    def link(self, adapter_id: str) -> AdapterLink:
        with self._registry:
            return self._adapters[adapter_id][1]

    def live_links(self) -> list[tuple[str, AdapterLink]]:
        with self._registry:
            return [(aid, lk) for aid, (_, lk) in self._adapters.items() if lk.alive]

    # ---- descriptors --------------------------------------------------
    def register_descriptor(self, d: SwarmDescriptor) -> VerificationReport:
        """Verify ``d`` against the adapters registered now; store it only if ok."""
        with self._registry:
            if d.key in self._descriptors:
                raise SwarmError("VERSION_EXISTS", f"{d.name} v{d.version}")
            report = verify(d, self.adapters())
            if report.ok:
                self._descriptors[d.key] = (d, report)
            return report

    def descriptor(self, name: str, version: Optional[int] = None) -> SwarmDescriptor:
        with self._registry:
            if version is None:
                versions = [v for (n, v) in self._descriptors if n == name]
                if not versions:
                    raise SwarmError("UNKNOWN_DESCRIPTOR", name)
                version = max(versions)
            try:
                return self._descriptors[(name, version)][0]
            except KeyError:
                raise SwarmError("UNKNOWN_DESCRIPTOR", f"{name} v{version}") from None

    def descriptors(self) -> list[SwarmDescriptor]:
        with self._registry:
            return [d for d, _ in self._descriptors.values()]

    # ---- instances ----------------------------------------------------
    def _lock_for(self, instance_id: str) -> threading.Lock:
        with self._registry:
            return self._locks.setdefault(instance_id, threading.Lock())

    def _get(self, instance_id: str) -> SwarmInstance:
        try:
            return self._instances[instance_id]
        except KeyError:
            raise SwarmError("UNKNOWN_INSTANCE", instance_id) from None

    def _save(self, inst: SwarmInstance) -> None:
        self._instances[inst.instance_id] = inst
        self.instance_store.put(inst.subject_id, inst.instance_id, canonical_encode(inst))

    def instance(self, instance_id: str) -> SwarmInstance:
        return self._get(instance_id)

    def instances(self) -> list[SwarmInstance]:
        with self._registry:
            return list(self._instances.values())

    def launch(
        self,
        descriptor_name: str,
        version: Optional[int],
        launch_payload: Mapping[str, Any],
        subject_id: str,
        consent_token: str = "",
    ) -> str:
        d = self.descriptor(descriptor_name, version)
        keys = set(launch_payload)
        if keys != d.launch_fields:
            missing = sorted(d.launch_fields - keys)
            extra = sorted(keys - d.launch_fields)
            raise SwarmError("BAD_LAUNCH_FIELDS", f"missing={missing} extra={extra}")
        envelope.encode(dict(launch_payload))
        # erasure holds write_lock; a launch must not slip in behind its sweep
        with self.ledger.write_lock:
            return self._launch(d, keys, launch_payload, subject_id, consent_token)

    def _launch(self, d, keys, launch_payload, subject_id, consent_token) -> str:
        if not self._consent_ok(d, subject_id, consent_token):
            raise SwarmError("NO_CONSENT", f"{subject_id} for {d.name}")
        inst = SwarmInstance(
            instance_id=uuid.uuid4().hex,
            descriptor=d.key,
            current_phase=d.entry_phase,
            payload=dict(launch_payload),
            subject_id=subject_id,
            consent_token=consent_token,
        )
        self._audit(
            actor_id=BUS_ACTOR,
            actor_class=ActorClass.SOFTWARE,
            action=Action.LAUNCH,
            subject_id=subject_id,
            instance_id=inst.instance_id,
            field_names=keys,
            categories={d.category(f).value for f in keys},
            detail=f"{d.name} v{d.version}",
        )
        with self._registry:
            self._save(inst)
        return inst.instance_id

    def _consent_ok(self, d: SwarmDescriptor, subject_id: str, token: str) -> bool:
        cats = {f.category for f in d.fields}
        consents = self.ledger.consents
        if token:
            return consents.check_token(token, subject_id, d.name, cats)
        return consents.check(subject_id, d.name, cats)

    def _pick(self, d: SwarmDescriptor, phase: str) -> tuple[AdapterIdentity, AdapterLink]:
        role = d.phase(phase).target_role
        with self._registry:
            candidates = [
                (ident, lk)
                for ident, lk in self._adapters.values()
                if ident.role == role and lk.alive and adapter_may_serve(d, phase, ident)
            ]
            # one cursor per role; a shared one would lock-step with the phase order
            turn = next(self._rr.setdefault(role, itertools.count()))
        if not candidates:
            raise SwarmError("ADAPTER_UNREACHABLE", f"no live adapter for role {role}")
        return candidates[turn % len(candidates)]

    def step(self, instance_id: str) -> SwarmInstance:
        """Advance one phase. Steps of one instance are strictly serialized."""
        with self._lock_for(instance_id):
            inst = self._get(instance_id)
            if inst.status.terminal:
                return inst
            d = self.descriptor(*inst.descriptor)
            if not self._consent_ok(d, inst.subject_id, inst.consent_token):
                inst = replace(inst, status=Status.CANCELLED, current_phase=None, payload={}, detail="NO_CONSENT")
                self._save(inst)
                return inst

            phase = d.phase(inst.current_phase)
            identity, link = self._pick(d, phase.name)
            delivered = {f: inst.payload[f] for f in sorted(phase.input_fields) if f in inst.payload}
            self._audit(
                actor_id=identity.adapter_id,
                actor_class=identity.actor_class,
                action=Action.DELIVER,
                subject_id=inst.subject_id,
                instance_id=instance_id,
                field_names=delivered,
                categories={d.category(f).value for f in delivered},
                detail=phase.name,
            )
            self._inflight[instance_id] = frozenset(delivered)
            try:
                return self._complete_step(d, inst, phase, identity, link, delivered)
            finally:
                self._inflight.pop(instance_id, None)

    def _complete_step(self, d, inst, phase, identity, link, delivered) -> SwarmInstance:
        fault: Optional[str] = None
        result = None
        try:
            result = link.deliver(inst.instance_id, phase.name, delivered)
        except SwarmError as exc:
            # ADAPTER_UNREACHABLE here means the link died between pick and send
            fault = f"{exc.code}: {exc.detail}"

        written: frozenset[str] = frozenset()
        if fault is None:
            undeclared = set(result.outputs) - phase.output_fields
            if undeclared:
                fault = f"OUTPUT_VIOLATION: {','.join(sorted(undeclared))}"
            else:
                written = frozenset(result.outputs)

        audit = dict(
            actor_id=identity.adapter_id,
            actor_class=identity.actor_class,
            action=Action.RETURN,
            subject_id=inst.subject_id,
            instance_id=inst.instance_id,
            field_names=written,
            categories={d.category(f).value for f in written},
        )
        ts = now_ms()
        if inst.hop_trail:
            ts = max(ts, inst.hop_trail[-1].timestamp_utc)
        hop = HopRecord(identity.adapter_id, phase.name, ts, frozenset(delivered), written)
        trail = inst.hop_trail + (hop,)

        if fault is not None:
            kind = "OUTPUT_VIOLATION" if fault.startswith("OUTPUT_VIOLATION") else "HANDLER_FAULT"
            try:
                self._audit(**audit, detail=f"{phase.name}: {fault}" if kind == "OUTPUT_VIOLATION" else f"{phase.name}: HANDLER_FAULT {fault}")
            finally:
                inst = replace(inst, hop_trail=trail, status=Status.FAILED, current_phase=None, detail=f"{kind} at {phase.name}")
                self._save(inst)
            return inst

        try:
            self._audit(**audit, detail=phase.name)
        except SwarmError:
            inst = replace(inst, hop_trail=trail, status=Status.FAILED, current_phase=None, detail="STORE_UNAVAILABLE")
            self._save(inst)
            raise

        payload = dict(inst.payload)
        payload.update(result.outputs)
        tr = phase.next_step(payload)
        if tr is None:
            inst = replace(inst, payload=payload, hop_trail=trail, status=Status.FAILED, current_phase=None, detail=f"NO_ROUTE at {phase.name}")
        elif tr.outcome is not None:
            inst = replace(inst, payload=payload, hop_trail=trail, status=Status(tr.outcome.value), current_phase=None)
        else:
            inst = replace(inst, payload=payload, hop_trail=trail, current_phase=tr.target)
        self._save(inst)
        return inst

    def run_to_completion(self, instance_id: str) -> SwarmInstance:
        """Step until terminal. Unreachable adapters are retried with backoff."""
        inst = self._get(instance_id)
        bound = len(self.descriptor(*inst.descriptor).phases)
        attempts = 0
        steps = 0
        while not inst.status.terminal:
            try:
                inst = self.step(instance_id)
            except SwarmError as exc:
                if exc.code != "ADAPTER_UNREACHABLE":
                    raise
                if attempts >= len(self.retry_backoff):
                    return self._fail_unreachable(instance_id, exc.detail)
                self.sleep(self.retry_backoff[attempts])
                attempts += 1
                continue
            attempts = 0
            steps += 1
            if steps > bound:  # unreachable for a validated DAG
                raise SwarmError("NON_TERMINATION", instance_id)
        return inst

    def _fail_unreachable(self, instance_id: str, detail: str) -> SwarmInstance:
        with self._lock_for(instance_id):
            inst = self._get(instance_id)
            if not inst.status.terminal:
                inst = replace(inst, status=Status.FAILED, current_phase=None, detail=f"ADAPTER_UNREACHABLE: {detail}")
                self._save(inst)
            return inst

    def status(self, instance_id: str) -> InstanceStatus:
        inst = self._get(instance_id)
        return InstanceStatus(inst.instance_id, inst.status, inst.current_phase, inst.hop_trail, inst.detail)

    def escrow(self, instance_id: str) -> dict[str, Any]:
        """Payload fields the bus is withholding from the adapter right now."""
        inst = self._get(instance_id)
        if inst.status.terminal:
            return {}
        held = self._inflight.get(instance_id, frozenset())
        return {k: v for k, v in inst.payload.items() if k not in held}

    def inflight(self, instance_id: str) -> frozenset[str]:
        return self._inflight.get(instance_id, frozenset())

    def recover(self) -> list[str]:
        """Reload persisted instances (after a restart); returns RUNNING ids."""
        running = []
        for subject in self.instance_store.subjects():
            for key in self.instance_store.keys(subject):
                inst = canonical_decode(self.instance_store.get(subject, key), SwarmInstance)
                with self._registry:
                    self._instances.setdefault(inst.instance_id, inst)
                if inst.status is Status.RUNNING:
                    running.append(inst.instance_id)
        return running

    # ---- erasure participation ----------------------------------------
    def _subject_instances(self, subject_id: str) -> list[str]:
        with self._registry:
            return [i for i, inst in self._instances.items() if inst.subject_id == subject_id]

    def erase_subject(self, subject_id: str) -> ParticipantErasure:
        part = ParticipantErasure()
        ids = self._subject_instances(subject_id)
        wiped = 0
        for iid in ids:
            with self._lock_for(iid):
                inst = self._instances[iid]
                wiped += len(inst.payload)
                if inst.status is Status.RUNNING:
                    part.cancelled.append(iid)
                    inst = replace(inst, status=Status.CANCELLED, current_phase=None, detail="ERASED")
                # tombstone keeps field names in the hop trail, no values
                self._instances[iid] = replace(inst, payload={}, consent_token="")
                self._inflight.pop(iid, None)
        part.per_store.append(("escrow", wiped))
        for aid, lk in self.live_links():
            try:
                n = lk.control("erase", {"instances": ids})["deleted"]
                part.per_store.append((f"adapter:{aid}", n))
            except SwarmError as exc:
                part.unreachable.append(f"adapter {aid} ({exc.code})")
        with self._registry:
            dead = [aid for aid, (_, lk) in self._adapters.items() if not lk.alive]
        part.unreachable.extend(f"adapter {aid} (disconnected)" for aid in dead if ids)
        return part

    def residual_scan(self, subject_id: str) -> list[str]:
        findings = []
        ids = self._subject_instances(subject_id)
        for iid in ids:
            inst = self._instances[iid]
            if inst.payload:
                findings.append(f"escrow {iid}: {len(inst.payload)} values")
            if inst.status is Status.RUNNING:
                findings.append(f"instance {iid} still RUNNING")
        if ids:
            for aid, lk in self.live_links():
                try:
                    found = lk.control("scan", {"instances": ids})["found"]
                except SwarmError as exc:
                    findings.append(f"unreachable: adapter {aid} ({exc.code})")
                    continue
                if found:
                    findings.append(f"adapter {aid}: {found} case files")
        return findings
