"""SCRAM-SHA-1 (RFC 5802) without channel binding.

The handshake is a pure state machine: :func:`handshake_step` takes an
immutable :class:`HandshakeState` and the incoming message text and returns a
:class:`StepResult` with the next state and what to send. Transport lives
elsewhere.

On mutual success both sides derive a session key,
``HMAC-SHA-1(StoredKey, AuthMessage + "Session")``, used to MAC transport
frames. RFC 5802 does not define this; it is an extension.

Usernames are escaped as the RFC requires, but no SASLprep normalisation is
applied: passwords are used as their UTF-8 bytes.
"""

from __future__ import annotations

import base64
import binascii
import functools
import hashlib
import hmac
import os
import secrets
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Mapping, Optional

from .errors import SwarmError

MIN_ITERATIONS = 4096
NONCE_LENGTH = 24
DIGEST_SIZE = 20
GS2_HEADER = "n,,"
_B64_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"


def H(data: bytes) -> bytes:
    return hashlib.sha1(data).digest()


def HMAC(key: bytes, msg: bytes) -> bytes:
    return hmac.new(key, msg, hashlib.sha1).digest()


def XOR(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64_strict(text: str) -> bytes:
    """Decode base64, rejecting any text that is not the canonical encoding."""
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, ValueError) as exc:
        raise SwarmError("MALFORMED_MESSAGE", "bad base64") from exc
    if b64(raw) != text:
        raise SwarmError("MALFORMED_MESSAGE", "non-canonical base64")
    return raw


@functools.lru_cache(maxsize=256)
def salted_password(password: bytes, salt: bytes, iterations: int) -> bytes:
    return hashlib.pbkdf2_hmac("sha1", password, salt, iterations, DIGEST_SIZE)


def generate_nonce(length: int = NONCE_LENGTH) -> str:
    return "".join(secrets.choice(_B64_ALPHABET) for _ in range(length))


@dataclass(frozen=True)
class ScramCredential:
    username: str
    salt: bytes
    iterations: int
    stored_key: bytes
    server_key: bytes

    def to_envelope(self) -> dict:
        return {
            "username": self.username,
            "salt": b64(self.salt),
            "iterations": self.iterations,
            "storedKey": b64(self.stored_key),
            "serverKey": b64(self.server_key),
        }

    @classmethod
    def from_envelope(cls, doc: Mapping[str, Any]) -> "ScramCredential":
        return cls(
            doc["username"],
            base64.b64decode(doc["salt"]),
            doc["iterations"],
            base64.b64decode(doc["storedKey"]),
            base64.b64decode(doc["serverKey"]),
        )


def derive_credential(password: str, salt: bytes, iterations: int = MIN_ITERATIONS, username: str = "") -> ScramCredential:
    if iterations < MIN_ITERATIONS:
        raise SwarmError("WEAK_ITERATIONS", f"{iterations} < {MIN_ITERATIONS}")
    salted = salted_password(password.encode("utf-8"), salt, iterations)
    client_key = HMAC(salted, b"Client Key")
    return ScramCredential(
        username=username,
        salt=salt,
        iterations=iterations,
        stored_key=H(client_key),
        server_key=HMAC(salted, b"Server Key"),
    )


def new_credential(username: str, password: str, iterations: int = MIN_ITERATIONS) -> ScramCredential:
    return derive_credential(password, os.urandom(16), iterations, username)


def session_key(stored_key: bytes, auth_message: str) -> bytes:
    return HMAC(stored_key, auth_message.encode("utf-8") + b"Session")


def escape_username(name: str) -> str:
    return name.replace("=", "=3D").replace(",", "=2C")


def unescape_username(name: str) -> str:
    out, i = [], 0
    while i < len(name):
        if name[i] == "=":
            code = name[i:i + 3]
            if code == "=2C":
                out.append(",")
            elif code == "=3D":
                out.append("=")
            else:
                raise SwarmError("MALFORMED_MESSAGE", "bad username escape")
            i += 3
        else:
            out.append(name[i])
            i += 1
    return "".join(out)


def _attrs(message: str, expected: list[str]) -> dict[str, str]:
    parts = message.split(",")
    if len(parts) != len(expected):
        raise SwarmError("MALFORMED_MESSAGE", f"expected attributes {expected}")
    out = {}
    for part, key in zip(parts, expected):
        if len(part) < 2 or part[0] != key or part[1] != "=":
            raise SwarmError("MALFORMED_MESSAGE", f"expected attribute {key}")
        out[key] = part[2:]
    return out


class Side(str, Enum):
    CLIENT = "client"
    SERVER = "server"


class Phase(str, Enum):
    INIT = "INIT"
    CLIENT_FIRST_SENT = "CLIENT_FIRST_SENT"
    SERVER_FIRST_SENT = "SERVER_FIRST_SENT"
    CLIENT_FINAL_SENT = "CLIENT_FINAL_SENT"
    AUTHENTICATED = "AUTHENTICATED"
    FAILED = "FAILED"


CredentialLookup = Callable[[str], Optional[ScramCredential]]


@dataclass(frozen=True)
class HandshakeState:
    side: Side
    phase: Phase = Phase.INIT
    username: str = ""
    password: Optional[str] = None
    client_nonce: str = ""
    server_nonce: str = ""
    auth_message: str = ""
    lookup: Optional[CredentialLookup] = None
    credential: Optional[ScramCredential] = None
    expected_server_signature: bytes = b""
    gs2_header: str = ""
    client_first_bare: str = ""
    server_first: str = ""
    error: Optional[str] = None

    def __repr__(self) -> str:  # keep secrets out of logs
        return f"HandshakeState(side={self.side.value}, phase={self.phase.value}, username={self.username!r})"


@dataclass(frozen=True)
class StepResult:
    state: HandshakeState
    message: Optional[str] = None
    session_key: Optional[bytes] = None

    @property
    def authenticated(self) -> bool:
        return self.state.phase is Phase.AUTHENTICATED

    @property
    def failed(self) -> bool:
        return self.state.phase is Phase.FAILED

    @property
    def error(self) -> Optional[str]:
        return self.state.error


def client_start(username: str, password: str, nonce: Optional[str] = None) -> HandshakeState:
    return HandshakeState(Side.CLIENT, username=username, password=password, client_nonce=nonce or generate_nonce())


def server_start(lookup: CredentialLookup, nonce: Optional[str] = None) -> HandshakeState:
    return HandshakeState(Side.SERVER, lookup=lookup, server_nonce=nonce or generate_nonce())


_FAKE_SECRET = os.urandom(32)


def _fake_credential(username: str) -> ScramCredential:
    # unknown users get a stable decoy so the exchange does not reveal existence
    salt = HMAC(_FAKE_SECRET, username.encode("utf-8"))[:16]
    return ScramCredential(username, salt, MIN_ITERATIONS, os.urandom(20), os.urandom(20))


def handshake_step(state: HandshakeState, incoming: Optional[str] = None) -> StepResult:
    """Advance one side of the exchange by one message."""
    if state.phase in (Phase.AUTHENTICATED, Phase.FAILED):
        return StepResult(replace(state, phase=Phase.FAILED, error=state.error or "HANDSHAKE_CLOSED"))
    try:
        if state.side is Side.CLIENT:
            return _client_step(state, incoming)
        return _server_step(state, incoming)
    except SwarmError as exc:
        return StepResult(replace(state, phase=Phase.FAILED, error=exc.code))


def _client_step(state: HandshakeState, incoming: Optional[str]) -> StepResult:
    if state.phase is Phase.INIT:
        bare = f"n={escape_username(state.username)},r={state.client_nonce}"
        nxt = replace(state, phase=Phase.CLIENT_FIRST_SENT, client_first_bare=bare, gs2_header=GS2_HEADER)
        return StepResult(nxt, GS2_HEADER + bare)

    if incoming is None:
        raise SwarmError("MALFORMED_MESSAGE", "missing message")

    if state.phase is Phase.CLIENT_FIRST_SENT:
        if incoming.startswith("e="):
            raise SwarmError("PROOF_MISMATCH", incoming[2:])
        a = _attrs(incoming, ["r", "s", "i"])
        nonce = a["r"]
        if not nonce.startswith(state.client_nonce) or len(nonce) == len(state.client_nonce):
            raise SwarmError("NONCE_MISMATCH")
        if "," in nonce or not nonce.isprintable():
            raise SwarmError("MALFORMED_MESSAGE", "bad nonce")
        salt = b64_strict(a["s"])
        if not a["i"].isdigit() or str(int(a["i"])) != a["i"]:
            raise SwarmError("MALFORMED_MESSAGE", "bad iteration count")
        iterations = int(a["i"])
        if iterations < MIN_ITERATIONS:
            raise SwarmError("WEAK_ITERATIONS", str(iterations))

        salted = salted_password(state.password.encode("utf-8"), salt, iterations)
        client_key = HMAC(salted, b"Client Key")
        stored_key = H(client_key)
        server_key = HMAC(salted, b"Server Key")
        without_proof = f"c={b64(GS2_HEADER.encode('ascii'))},r={nonce}"
        auth_message = f"{state.client_first_bare},{incoming},{without_proof}"
        proof = XOR(client_key, HMAC(stored_key, auth_message.encode("utf-8")))
        nxt = replace(
            state,
            phase=Phase.CLIENT_FINAL_SENT,
            server_nonce=nonce[len(state.client_nonce):],
            auth_message=auth_message,
            server_first=incoming,
            expected_server_signature=HMAC(server_key, auth_message.encode("utf-8")),
            credential=ScramCredential(state.username, salt, iterations, stored_key, server_key),
        )
        return StepResult(nxt, f"{without_proof},p={b64(proof)}")

    if state.phase is Phase.CLIENT_FINAL_SENT:
        if incoming.startswith("e="):
            raise SwarmError("PROOF_MISMATCH", incoming[2:])
        a = _attrs(incoming, ["v"])
        signature = b64_strict(a["v"])
        if not hmac.compare_digest(signature, state.expected_server_signature):
            raise SwarmError("PROOF_MISMATCH", "server signature")
        nxt = replace(state, phase=Phase.AUTHENTICATED, password=None)
        return StepResult(nxt, None, session_key(state.credential.stored_key, state.auth_message))

    raise SwarmError("MALFORMED_MESSAGE", f"unexpected message in {state.phase.value}")


def _server_step(state: HandshakeState, incoming: Optional[str]) -> StepResult:
    if incoming is None:
        raise SwarmError("MALFORMED_MESSAGE", "missing message")

    if state.phase is Phase.INIT:
        if incoming.startswith("n,,"):
            header = "n,,"
        elif incoming.startswith("y,,"):
            header = "y,,"
        else:
            # channel binding ("p=") and authzid are not supported
            raise SwarmError("MALFORMED_MESSAGE", "unsupported gs2 header")
        bare = incoming[len(header):]
        a = _attrs(bare, ["n", "r"])
        username = unescape_username(a["n"])
        client_nonce = a["r"]
        if not username or not client_nonce or not client_nonce.isprintable():
            raise SwarmError("MALFORMED_MESSAGE", "empty username or nonce")
        cred = state.lookup(username) if state.lookup else None
        if cred is None:
            cred = _fake_credential(username)
        server_first = f"r={client_nonce}{state.server_nonce},s={b64(cred.salt)},i={cred.iterations}"
        nxt = replace(
            state,
            phase=Phase.SERVER_FIRST_SENT,
            username=username,
            client_nonce=client_nonce,
            credential=cred,
            gs2_header=header,
            client_first_bare=bare,
            server_first=server_first,
        )
        return StepResult(nxt, server_first)

    if state.phase is Phase.SERVER_FIRST_SENT:
        a = _attrs(incoming, ["c", "r", "p"])
        if a["c"] != b64(state.gs2_header.encode("ascii")):
            raise SwarmError("MALFORMED_MESSAGE", "channel binding mismatch")
        if a["r"] != state.client_nonce + state.server_nonce:
            raise SwarmError("NONCE_MISMATCH")
        proof = b64_strict(a["p"])
        if len(proof) != DIGEST_SIZE:
            raise SwarmError("MALFORMED_MESSAGE", "bad proof length")
        without_proof = incoming[: incoming.rindex(",p=")]
        auth_message = f"{state.client_first_bare},{state.server_first},{without_proof}"
        cred = state.credential
        client_signature = HMAC(cred.stored_key, auth_message.encode("utf-8"))
        if not hmac.compare_digest(H(XOR(proof, client_signature)), cred.stored_key):
            failed = replace(state, phase=Phase.FAILED, error="PROOF_MISMATCH")
            return StepResult(failed, "e=invalid-proof")
        signature = HMAC(cred.server_key, auth_message.encode("utf-8"))
        nxt = replace(state, phase=Phase.AUTHENTICATED, auth_message=auth_message)
        return StepResult(nxt, f"v={b64(signature)}", session_key(cred.stored_key, auth_message))

    raise SwarmError("MALFORMED_MESSAGE", f"unexpected message in {state.phase.value}")
