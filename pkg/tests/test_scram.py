import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarmbus import scram
from swarmbus.errors import SwarmError

CRED = scram.new_credential("alice", "correct horse")


def lookup(u):
    return CRED if u == "alice" else None


def run(user, password, tamper_client_final=None, tamper_server_first=None):
    """Drive both sides; returns (client result, server result) at the point the exchange stops."""
    c = scram.handshake_step(scram.client_start(user, password))
    s = scram.handshake_step(scram.server_start(lookup), c.message)
    msg = tamper_server_first(s.message) if tamper_server_first else s.message
    c = scram.handshake_step(c.state, msg)
    if c.failed:
        return c, s
    msg = tamper_client_final(c.message) if tamper_client_final else c.message
    s = scram.handshake_step(s.state, msg)
    c = scram.handshake_step(c.state, s.message)
    return c, s


def test_honest_handshake_agrees_on_key():
    c, s = run("alice", "correct horse")
    assert c.authenticated and s.authenticated
    assert c.state.password is None


def test_wrong_password():
    c, s = run("alice", "wrong")
    assert s.error == "PROOF_MISMATCH" and s.message == "e=invalid-proof"
    assert c.error == "PROOF_MISMATCH"


def test_unknown_user_is_indistinguishable_until_proof():
    first = scram.handshake_step(scram.client_start("mallory", "x"))
    a = scram.handshake_step(scram.server_start(lookup), first.message)
    b = scram.handshake_step(scram.server_start(lookup), first.message)
    salt_a = a.message.split(",s=")[1].split(",")[0]
    salt_b = b.message.split(",s=")[1].split(",")[0]
    assert salt_a == salt_b and a.message.endswith(f",i={scram.MIN_ITERATIONS}")
    _, s = run("mallory", "x")
    assert s.error == "PROOF_MISMATCH"


def test_nonce_tamper_on_client_final():
    c, s = run("alice", "correct horse", tamper_client_final=lambda m: m.replace(",r=", ",r=X", 1))
    assert s.error == "NONCE_MISMATCH"


def test_server_nonce_must_extend_client_nonce():
    c, _ = run("alice", "correct horse", tamper_server_first=lambda m: "r=zzz" + m[m.index(","):])
    assert c.error == "NONCE_MISMATCH"


def test_weak_iterations_rejected_by_client():
    c, _ = run("alice", "correct horse", tamper_server_first=lambda m: m.rsplit(",i=", 1)[0] + ",i=1000")
    assert c.error == "WEAK_ITERATIONS"


@pytest.mark.parametrize("text", ["QR==", "QQ", "Q Q==", "QQ==\n", "é"])
def test_non_canonical_base64(text):
    with pytest.raises(SwarmError) as e:
        scram.b64_strict(text)
    assert e.value.code == "MALFORMED_MESSAGE"


def test_channel_binding_header_rejected():
    s = scram.handshake_step(scram.server_start(lookup), "p=tls-unique,,n=alice,r=abc")
    assert s.failed and s.error == "MALFORMED_MESSAGE"


def test_finished_state_cannot_be_reused():
    c, s = run("alice", "correct horse")
    again = scram.handshake_step(s.state, "anything")
    assert again.failed and again.error == "HANDSHAKE_CLOSED"


@settings(max_examples=200, deadline=None)
@given(st.text(min_size=1, max_size=12).filter(lambda u: u.isprintable()))
def test_username_escape_round_trip(user):
    assert scram.unescape_username(scram.escape_username(user)) == user
    assert "," not in scram.escape_username(user)
