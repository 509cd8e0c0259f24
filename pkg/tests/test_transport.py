import struct
import threading

import pytest

from swarmbus import scram, transport
from swarmbus.errors import SwarmError
from swarmbus.transport import Channel, Frame, FrameType, MemoryStream

CRED = scram.new_credential("node", "pw")


def lookup(u):
    return CRED if u == "node" else None


def handshaken_pair():
    s_stream, c_stream = MemoryStream.pair()
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("s", transport.server_handshake(s_stream, lookup)))
    t.start()
    client = transport.client_handshake(c_stream, "node", "pw")
    t.join()
    return box["s"], client, c_stream


def test_header_layout_is_big_endian():
    raw = transport.encode_frame(Frame(FrameType.AUTH, 0x0102030405060708, b"hi"))
    assert raw == b"\x00\x00\x00\x02\x01\x01\x02\x03\x04\x05\x06\x07\x08hi"
    assert transport.HEADER_SIZE == 13
    mac = bytes(20)
    raw = transport.encode_frame(Frame(FrameType.DELIVER, 1, b"{}", mac))
    assert struct.unpack(">IBQ", raw[:13]) == (2, 2, 1) and raw.endswith(mac)
    assert transport.decode_frame(raw) == Frame(FrameType.DELIVER, 1, b"{}", mac)


@pytest.mark.parametrize("data,code", [
    (b"\x00\x00", "TRUNCATED"),
    (struct.pack(">IBQ", 5, 1, 0) + b"abc", "TRUNCATED"),
    (struct.pack(">IBQ", 0, 9, 0), "UNKNOWN_TYPE"),
    (struct.pack(">IBQ", transport.MAX_BODY + 1, 2, 0), "LENGTH_OVERFLOW"),
    (struct.pack(">IBQ", 1, 1, 0) + b"ab", "TRAILING_BYTES"),
])
def test_decode_errors(data, code):
    with pytest.raises(SwarmError) as e:
        transport.decode_frame(data)
    assert e.value.code == code


def test_data_frames_need_a_mac():
    with pytest.raises(SwarmError) as e:
        transport.encode_frame(Frame(FrameType.CONTROL, 0, b"{}"))
    assert e.value.code == "MISSING_MAC"


def test_authenticated_round_trip_and_keys_match():
    server, client, _ = handshaken_pair()
    assert server.key == client.key and server.principal == "node"
    client.send(FrameType.DELIVER, {"a": 1})
    assert server.recv().decoded() == {"a": 1}
    server.send(FrameType.RETURN, {"ok": True})
    assert client.recv().decoded() == {"ok": True}


def test_bad_password_fails_both_sides():
    with pytest.raises(SwarmError) as e:
        transport.local_channel_pair(lookup, "node", "nope")
    assert e.value.code in ("PROOF_MISMATCH", "HANDSHAKE_FAILED")


def test_flipped_byte_closes_with_mac_fail():
    server, client, c_stream = handshaken_pair()
    c_stream.tamper = lambda data: data[:-1] + bytes([data[-1] ^ 1])
    client.send(FrameType.DELIVER, {"a": 1})
    with pytest.raises(SwarmError) as e:
        server.recv()
    assert e.value.code == "MAC_FAIL"
    assert server.closed and server.close_reason == "MAC_FAIL"
    with pytest.raises(SwarmError):
        server.recv()


def _raw_send(chan: Channel, seq: int, body: bytes = b"{}"):
    mac = transport.frame_mac(chan.key, FrameType.CONTROL, seq, body)
    chan.stream.send(transport.encode_frame(Frame(FrameType.CONTROL, seq, body, mac)))


def test_replayed_frame_closes_channel():
    server, client, _ = handshaken_pair()
    seq = client.send_seq
    _raw_send(client, seq)
    server.recv()
    _raw_send(client, seq)
    with pytest.raises(SwarmError) as e:
        server.recv()
    assert e.value.code == "REPLAY"


def test_skipped_sequence_closes_channel():
    server, client, _ = handshaken_pair()
    _raw_send(client, client.send_seq + 1)
    with pytest.raises(SwarmError) as e:
        server.recv()
    assert e.value.code == "GAP"


def test_data_before_handshake_is_refused():
    a, b = MemoryStream.pair()
    b.send(transport.encode_frame(Frame(FrameType.DELIVER, 0, b"{}", bytes(20))))
    chan = Channel(a)
    with pytest.raises(SwarmError) as e:
        chan.recv()
    assert e.value.code == "UNAUTHENTICATED"


def test_chunks_cover_payload():
    data = bytes(range(256)) * 9000
    parts = transport.chunks(data, 1000)
    assert b"".join(parts) == data and all(len(p) <= 1000 for p in parts)
    assert transport.chunks(b"") == [b""]
