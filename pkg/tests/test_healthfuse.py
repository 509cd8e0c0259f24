import pytest
from fastapi.testclient import TestClient

from swarmbus import envelope, scram
from swarmbus.errors import SwarmError
from swarmbus.healthfuse import Healthfuse
from swarmbus.healthfuse.http import create_app
from swarmbus.healthfuse.service import RECORDS_PURPOSE, SUPPORT_PURPOSE, ehic_categories
from swarmbus.ledger import Action
from swarmbus.model import Status

ANA, BOGDAN = "citizen-ana", "citizen-bogdan"


@pytest.fixture
def hf():
    service = Healthfuse.in_process()
    yield service
    service.close()


def code_of(call):
    with pytest.raises(SwarmError) as e:
        call()
    return e.value.code


def test_every_demo_profile_reaches_expected_outcome(hf):
    expected = {
        "citizen-ana": (Status.ISSUED, None),
        "citizen-bogdan": (Status.ISSUED, None),
        "citizen-carmen": (Status.DENIED, "taxReceipt"),
        "citizen-dan": (Status.DENIED, "verifyIdentity"),
        "citizen-elena": (Status.DENIED, "dividendStatistics"),
    }
    for who, (status, reason) in expected.items():
        hf.grant_consent(who, "issue_ehic", ehic_categories())
        d = hf.decision(hf.request_insurance(who, "ehic"))
        assert (d.outcome, d.reason_phase) == (status, reason), who
        if status is Status.ISSUED:
            assert d.card_id


def test_institutions_only_see_their_inputs(hf):
    hf.grant_consent(ANA, "issue_ehic", ehic_categories())
    hf.request_insurance(ANA, "ehic")
    d = hf.bus.descriptor("issue_ehic")
    fiscal = hf.bus.link("FiscalAgency").control("observed")["deliveries"]
    assert {s["phase"] for s in fiscal} == {"incomeDeclaration", "taxReceipt"}
    for s in fiscal:
        assert "identity_card" not in s["fields"]
        assert set(s["fields"]) == d.phase(s["phase"]).input_fields


def test_no_consent_no_request(hf):
    assert code_of(lambda: hf.request_insurance(ANA, "ehic")) == "NO_CONSENT"
    assert code_of(lambda: hf.request_insurance("nobody", "ehic")) == "UNKNOWN_PROFILE"


def test_status_is_owner_only(hf):
    hf.grant_consent(ANA, "issue_ehic", ehic_categories())
    iid = hf.request_insurance(ANA, "ehic")
    assert hf.insurance_status(ANA, iid)["decision"]["outcome"] == "ISSUED"
    assert code_of(lambda: hf.insurance_status(BOGDAN, iid)) == "NOT_OWNER"


def test_records_round_trip_and_ownership(hf):
    assert code_of(lambda: hf.upload_record(ANA, "x.pdf", b"1")) == "NO_CONSENT"
    hf.grant_consent(ANA, RECORDS_PURPOSE, ["medical"])
    hf.grant_consent(BOGDAN, RECORDS_PURPOSE, ["medical"])
    rid = hf.upload_record(ANA, "scan.pdf", b"\x00\x01binary")
    assert hf.download_record(ANA, rid) == b"\x00\x01binary"
    assert code_of(lambda: hf.download_record(BOGDAN, rid)) == "NOT_OWNER"
    denied = [e for e in hf.ledger.audit.entries() if e.detail == "DENIED NOT_OWNER"]
    assert len(denied) == 1 and denied[0].subject_id == ANA and not denied[0].field_names
    hf.delete_record(ANA, rid)
    assert code_of(lambda: hf.download_record(ANA, rid)) == "UNKNOWN_RECORD"


def test_support_access_needs_live_consent(hf):
    hf.add_staff("agent", "pw")
    token = hf.grant_consent(BOGDAN, SUPPORT_PURPOSE, ["contact", "decision"])
    tid = hf.open_support_ticket(BOGDAN, "where is my card?", token)
    view = hf.support_view("agent", tid)
    assert view["ticket"]["description"] == "where is my card?"
    assert hf.human_actors(BOGDAN) == {"agent"}
    hf.revoke_consent(BOGDAN, token)
    assert code_of(lambda: hf.support_view("agent", tid)) == "NO_CONSENT"
    assert code_of(lambda: hf.support_view("agent", "nope")) == "UNKNOWN_TICKET"
    assert code_of(lambda: hf.support_view("intruder", tid)) == "UNKNOWN_STAFF"
    other = hf.grant_consent(BOGDAN, "issue_ehic", ehic_categories())
    assert code_of(lambda: hf.open_support_ticket(BOGDAN, "x", other)) == "NO_CONSENT"


def test_revoke_is_owner_only(hf):
    token = hf.grant_consent(ANA, SUPPORT_PURPOSE, ["contact"])
    assert code_of(lambda: hf.revoke_consent(BOGDAN, token)) == "NOT_OWNER"


def test_automated_run_has_no_humans(hf):
    hf.grant_consent(ANA, "issue_ehic", ehic_categories())
    hf.request_insurance(ANA, "ehic")
    assert hf.human_actors(ANA) == set()
    actions = {a.action for a in hf.access_log(ANA)}
    assert Action.SUPPORT_ACCESS not in actions


# ---- HTTP -------------------------------------------------------------------

def send(client, method, url, doc=None, token=None, **kw):
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    if doc is not None:
        kw["content"] = envelope.encode(doc)
        headers["Content-Type"] = "application/json"
    return client.request(method, url, headers=headers, **kw)


def http_login(client, user, pw):
    c = scram.handshake_step(scram.client_start(user, pw))
    r = send(client, "POST", "/sessions", {"clientFirst": c.message})
    assert r.status_code == 200, r.text
    c = scram.handshake_step(c.state, r.json()["serverFirst"])
    r = send(client, "POST", "/sessions", {"attempt": r.json()["attempt"], "clientFinal": c.message})
    assert r.status_code == 201, r.text
    assert scram.handshake_step(c.state, r.json()["serverFinal"]).authenticated
    return r.json()["token"]


@pytest.fixture
def api(hf):
    hf.add_account(ANA, "ana-pw")
    hf.add_account(BOGDAN, "bogdan-pw")
    hf.add_staff("agent", "agent-pw")
    return TestClient(create_app(hf)), hf


def test_http_insurance_flow(api):
    client, hf = api
    tok = http_login(client, ANA, "ana-pw")
    cats = sorted(c.value for c in ehic_categories())
    r = send(client, "POST", "/consents", {"purpose": "issue_ehic", "categories": cats}, tok)
    assert r.status_code == 201
    r = send(client, "POST", "/insurance-requests", {"insuranceType": "ehic"}, tok)
    assert r.status_code == 202
    iid = r.json()["instanceId"]
    hf.wait(iid)
    r = send(client, "GET", f"/insurance-requests/{iid}", token=tok)
    assert r.status_code == 200 and r.json()["decision"]["outcome"] == "ISSUED"
    other = http_login(client, BOGDAN, "bogdan-pw")
    assert send(client, "GET", f"/insurance-requests/{iid}", token=other).status_code == 403
    log = send(client, "GET", "/gdpr/access-log", token=tok).json()["accesses"]
    assert {row["action"] for row in log} >= {"LAUNCH", "DELIVER", "RETURN"}


def test_http_auth_and_encoding_errors(api):
    client, _ = api
    assert send(client, "GET", "/gdpr/access-log").status_code == 401
    assert send(client, "GET", "/gdpr/access-log", token="bogus").status_code == 401
    c = scram.handshake_step(scram.client_start(ANA, "wrong"))
    r = send(client, "POST", "/sessions", {"clientFirst": c.message})
    c = scram.handshake_step(c.state, r.json()["serverFirst"])
    r = send(client, "POST", "/sessions", {"attempt": r.json()["attempt"], "clientFinal": c.message})
    assert r.status_code == 401
    tok = http_login(client, ANA, "ana-pw")
    r = client.post("/consents", content=b'{ "purpose": "x" }', headers={"Authorization": f"Bearer {tok}"})
    assert r.status_code == 400 and r.json()["error"] == "ENCODING"
    r = send(client, "POST", "/consents", {"purpose": "x", "categories": ["astrology"]}, tok)
    assert r.status_code == 404 and r.json()["error"] == "UNKNOWN_CATEGORY"


def test_http_records_and_support(api):
    client, _ = api
    tok = http_login(client, BOGDAN, "bogdan-pw")
    send(client, "POST", "/consents", {"purpose": RECORDS_PURPOSE, "categories": ["medical"]}, tok)
    r = client.post("/records", files={"file": ("x.bin", b"\xffdata")}, headers={"Authorization": f"Bearer {tok}"})
    assert r.status_code == 201
    rid = r.json()["recordId"]
    r = send(client, "GET", f"/records/{rid}", token=tok)
    assert r.content == b"\xffdata" and r.headers["content-type"] == "application/octet-stream"
    assert send(client, "DELETE", f"/records/{rid}", token=tok).status_code == 204
    assert send(client, "GET", f"/records/{rid}", token=tok).status_code == 404

    consent = send(client, "POST", "/consents", {"purpose": SUPPORT_PURPOSE, "categories": ["contact", "medical"]}, tok)
    r = send(client, "POST", "/support-tickets", {"consentToken": consent.json()["token"], "description": "help"}, tok)
    assert r.status_code == 201
    tid = r.json()["ticketId"]
    assert send(client, "GET", f"/support-tickets/{tid}", token=tok).status_code == 403
    staff = http_login(client, "agent", "agent-pw")
    r = send(client, "GET", f"/support-tickets/{tid}", token=staff)
    assert r.status_code == 200 and r.json()["ticket"]["description"] == "help"


def test_http_erasure(api):
    client, hf = api
    tok = http_login(client, ANA, "ana-pw")
    cats = sorted(c.value for c in ehic_categories())
    send(client, "POST", "/consents", {"purpose": "issue_ehic", "categories": cats}, tok)
    iid = send(client, "POST", "/insurance-requests", {"insuranceType": "ehic"}, tok).json()["instanceId"]
    hf.wait(iid)
    r = send(client, "POST", "/gdpr/erasure", {}, tok)
    assert r.status_code == 200 and r.json()["success"] is True
    assert hf.bus.instance(iid).payload == {}
    assert send(client, "GET", "/gdpr/access-log", token=tok).status_code == 401
