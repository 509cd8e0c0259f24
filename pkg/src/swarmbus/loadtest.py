"""Many concurrent issue_ehic instances against adapters in separate processes.

The bus runs in this process on an ephemeral port; each institution is a
``swarmbus adapter run`` subprocess that dials in over TCP.
"""

from __future__ import annotations

import os
import random
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import scram
from .bus import Bus
from .healthfuse.institutions import CitizenProfile, build_issue_ehic_descriptor, demo_identities
from .ledger import PrivacyLedger
from .server import Directory, write_envelope_file, BusServer


@dataclass(frozen=True)
class LoadConfig:
    instances: int = 1000
    workers: int = 32
    seed: int = 7
    ready_timeout: float = 30.0


@dataclass
class LoadResult:
    instances: int
    wall_clock_s: float
    statuses: dict[str, int]
    non_terminal: list[str]
    first_bad_seq: Optional[int]
    minimization_violations: list[str] = field(default_factory=list)
    deliveries_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.non_terminal and self.first_bad_seq is None and not self.minimization_violations


def _profiles(n: int, rng: random.Random) -> list[CitizenProfile]:
    out = []
    for i in range(n):
        out.append(CitizenProfile(
            f"citizen-{i:05d}",
            identity_valid=rng.random() > 0.05,
            employed=rng.random() > 0.1,
            taxes_paid=rng.random() > 0.1,
            has_dividends=rng.random() < 0.4,
            dividend_statistics_ok=rng.random() > 0.05,
        ))
    return out


def _spawn_adapters(work: Path, port: int, directory: Directory) -> list[subprocess.Popen]:
    env = dict(os.environ, SWARMBUS_PORT=str(port))
    procs = []
    for ident in directory.identities.values():
        cmd = [sys.executable, "-m", "swarmbus", "adapter", "run", ident.role,
               "--fixtures", str(work / "fixtures.env"), "--directory", str(work / "adapters.env"),
               "--secrets", str(work / "secrets.env")]
        log = open(work / f"{ident.adapter_id}.log", "wb")
        procs.append(subprocess.Popen(cmd, env=env, stdout=log, stderr=subprocess.STDOUT))
    return procs


def run_load(config: LoadConfig = LoadConfig(), work_dir: Optional[os.PathLike] = None) -> LoadResult:
    rng = random.Random(config.seed)
    with tempfile.TemporaryDirectory(prefix="swarm-load-") as tmp:
        work = Path(work_dir or tmp)
        work.mkdir(parents=True, exist_ok=True)
        d = build_issue_ehic_descriptor()
        idents = demo_identities(d)
        passwords = {i.adapter_id: scram.generate_nonce() for i in idents}
        directory = Directory(
            {i.adapter_id: i for i in idents},
            {a: scram.new_credential(a, pw) for a, pw in passwords.items()},
        )
        profiles = _profiles(config.instances, rng)
        write_envelope_file(work / "adapters.env", directory.to_envelope())
        write_envelope_file(work / "secrets.env", {"passwords": passwords})
        write_envelope_file(work / "fixtures.env", {"profiles": [p.to_envelope() for p in profiles]})

        ledger = PrivacyLedger(work / "data")
        bus = Bus(ledger)
        server = BusServer(bus, directory, port=0, pending=[d])
        port = server.start()
        procs = _spawn_adapters(work, port, directory)
        try:
            deadline = time.monotonic() + config.ready_timeout
            while len(bus.live_links()) < len(idents) or server.pending():
                if time.monotonic() > deadline:
                    raise TimeoutError(f"only {len(bus.live_links())} adapters connected")
                time.sleep(0.05)

            cats = {f.category for f in d.fields}
            tokens = {p.person_id: ledger.grant_consent(p.person_id, d.name, cats) for p in profiles}

            start = time.perf_counter()
            ids = [
                bus.launch(d.name, d.version, {"person_id": p.person_id, "insurance_type": "ehic",
                                               "has_dividends": p.has_dividends}, p.person_id, tokens[p.person_id])
                for p in profiles
            ]
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                finals = list(pool.map(bus.run_to_completion, ids))
            wall = time.perf_counter() - start

            statuses: dict[str, int] = {}
            for inst in finals:
                statuses[inst.status.value] = statuses.get(inst.status.value, 0) + 1
            result = LoadResult(
                instances=len(ids),
                wall_clock_s=wall,
                statuses=statuses,
                non_terminal=[i.instance_id for i in finals if not i.status.terminal],
                first_bad_seq=ledger.verify_chain(),
            )
            for aid, link in bus.live_links():
                for seen in link.control("observed")["deliveries"]:
                    result.deliveries_checked += 1
                    allowed = d.phase(seen["phase"]).input_fields
                    extra = set(seen["fields"]) - allowed
                    if extra:
                        result.minimization_violations.append(f"{aid} {seen['phase']}: {sorted(extra)}")
            return result
        finally:
            server.stop()
            for p in procs:
                p.terminate()
            for p in procs:
                p.wait(timeout=10)
            ledger.audit.close()
