import os
import subprocess
import sys
import threading
import time
from pathlib import Path

import pytest

from swarmbus import scram
from swarmbus.bus import Bus
from swarmbus.cli import main
from swarmbus.errors import SwarmError
from swarmbus.healthfuse.institutions import build_institutions, build_issue_ehic_descriptor, demo_identities, demo_profiles
from swarmbus.healthfuse.service import RECORDS_PURPOSE, ehic_categories
from swarmbus.ledger import PrivacyLedger
from swarmbus.server import BusServer, Directory, OperatorClient, run_adapter, write_envelope_file

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def deployment(tmp_path, monkeypatch):
    d = build_issue_ehic_descriptor()
    idents = demo_identities(d)
    pw = {i.adapter_id: scram.generate_nonce() for i in idents} | {"operator": "op-pw"}
    directory = Directory({i.adapter_id: i for i in idents},
                          {k: scram.new_credential(k, v) for k, v in pw.items()}, ["operator"])
    write_envelope_file(tmp_path / "secrets.env", {"passwords": pw})
    ledger = PrivacyLedger(tmp_path / "data")
    server = BusServer(Bus(ledger), directory, port=0, pending=[d])
    port = server.start()
    for inst in build_institutions(demo_profiles(), idents):
        threading.Thread(target=run_adapter, args=(inst, pw[inst.identity.adapter_id], "127.0.0.1", port),
                         daemon=True).start()
    deadline = time.monotonic() + 10
    while server.pending() and time.monotonic() < deadline:
        time.sleep(0.02)
    assert not server.pending()
    monkeypatch.setenv("SWARMBUS_PORT", str(port))
    monkeypatch.setenv("SWARMBUS_DATA_DIR", str(tmp_path / "data"))
    op = OperatorClient.connect("127.0.0.1", port, "operator", "op-pw")
    yield server, op, tmp_path
    op.close()
    server.stop()
    ledger.close()


def test_operator_launch_and_status(deployment):
    _, op, _ = deployment
    assert op.call("ping")["pending"] == []
    token = op.call("consent.grant", subjectId="citizen-ana", purpose="issue_ehic",
                    categories=sorted(c.value for c in ehic_categories()))["token"]
    iid = op.call("swarm.launch", name="issue_ehic", payload={"person_id": "citizen-ana", "insurance_type": "ehic",
                  "has_dividends": True}, subjectId="citizen-ana", consentToken=token, wait=True)["instanceId"]
    status = op.call("swarm.status", instanceId=iid)
    assert status["status"] == "ISSUED" and len(status["hopTrail"]) == 6
    with pytest.raises(SwarmError) as e:
        op.call("swarm.launch", name="nope", payload={}, subjectId="x")
    assert e.value.code == "UNKNOWN_DESCRIPTOR"
    assert op.call("audit.verify")["firstBadSeq"] is None


def test_large_record_round_trip_in_chunks(deployment):
    _, op, _ = deployment
    op.call("consent.grant", subjectId="citizen-bogdan", purpose=RECORDS_PURPOSE, categories=["medical"])
    data = os.urandom(16 * 1024 * 1024)
    rid = op.upload_record("citizen-bogdan", "mri.dcm", data)
    assert op.download_record("citizen-bogdan", rid) == data
    with pytest.raises(SwarmError) as e:
        op.call("record.chunk", uploadId="ghost", index=0, data="")
    assert e.value.code == "UNKNOWN_UPLOAD"


def test_oversized_record_is_refused(deployment):
    _, op, _ = deployment
    op.call("consent.grant", subjectId="citizen-bogdan", purpose=RECORDS_PURPOSE, categories=["medical"])
    uid = op.call("record.begin", subjectId="citizen-bogdan", filename="big")["uploadId"]
    part = "A" * (4 * ((1024 * 1024) // 3 + 2))
    with pytest.raises(SwarmError) as e:
        op.call("record.chunk", uploadId=uid, index=0, data=part)
    assert e.value.code == "LENGTH_OVERFLOW"


def test_unknown_principal_is_turned_away(deployment):
    server, _, _ = deployment
    with pytest.raises(SwarmError):
        OperatorClient.connect("127.0.0.1", server.port, "stranger", "x").call("ping")


def test_cli_against_running_bus(deployment, tmp_path, capsys):
    _, _, work = deployment
    common = ["--secrets", str(work / "secrets.env")]
    cats = ",".join(sorted(c.value for c in ehic_categories()))
    assert main(["consent", "grant", "citizen-carmen", "--purpose", "issue_ehic", "--categories", cats, *common]) == 0
    token = capsys.readouterr().out.strip()
    payload = tmp_path / "payload.env"
    write_envelope_file(payload, {"has_dividends": True, "insurance_type": "ehic", "person_id": "citizen-carmen"})
    rc = main(["swarm", "launch", "issue_ehic", "--subject", "citizen-carmen", "--payload", str(payload),
               "--consent", token, "--wait", *common])
    out = capsys.readouterr().out
    assert rc == 1 and "DENIED" in out
    assert main(["swarm", "launch", "ghost", "--subject", "x", "--payload", str(payload), *common]) == 1
    assert "UNKNOWN_DESCRIPTOR" in capsys.readouterr().err
    assert main(["gdpr", "erase", "citizen-carmen", *common]) == 0
    assert capsys.readouterr().out.strip().endswith("ERASED")
    assert main(["audit", "verify"]) == 0
    assert main(["audit", "who", "citizen-carmen"]) == 0
    assert "redacted" in capsys.readouterr().out


def test_cli_offline_commands(tmp_path, capsys):
    assert main(["descriptor", "verify", str(ROOT / "choreographies/issue_ehic.swarm"),
                 "--adapters", str(ROOT / "demo/adapters.env")]) == 0
    assert capsys.readouterr().out.strip() == "OK"

    log = PrivacyLedger(tmp_path)
    for i in range(5):
        log.grant_consent(f"s{i}", "p", ["tax"])
    log.close()
    path = tmp_path / "audit.log"
    raw = bytearray(path.read_bytes())
    raw[raw.index(b"s3")] = ord("t")
    path.write_bytes(bytes(raw))
    assert main(["audit", "verify", "--log", str(path)]) == 1
    assert capsys.readouterr().out.strip() == "firstBadSeq=3"


def test_cli_usage_errors_exit_2():
    with pytest.raises(SystemExit) as e:
        main(["swarm"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 2


def test_module_entry_point_runs_all_scenarios():
    r = subprocess.run([sys.executable, "-m", "swarmbus", "demo", "scenario", "all"], capture_output=True, text=True, timeout=120)
    assert r.returncode == 0, r.stdout + r.stderr
    assert "FAIL" not in r.stdout
