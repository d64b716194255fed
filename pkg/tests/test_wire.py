import socket
import struct

import pytest

from pep3.elgamal import encrypt
from pep3.group import B, GroupElement, Scalar
from pep3.keyshares import partition_triples
from pep3.messages import (
    Mode, Permit, ProofRequest, TranscryptRequest, TranscryptResponse,
)
from pep3.parties import CertificationAuthority
from pep3.transport import InProcessTransport, ServiceUnavailable, TcpTransport, serve
from pep3.wire import (
    MAX_FRAME, ErrorCode, ProtocolError, Reader, Tag, WireFormatError, Writer, error_frame,
    expect, frame, unframe,
)


def test_frame_layout():
    data = frame(Tag.PROOF, b"abc")
    assert data == struct.pack(">IB", 4, 0x02) + b"abc"
    assert unframe(data) == (Tag.PROOF, b"abc")
    for bad in (b"", b"\x00\x00\x00\x05\x01", b"\x00\x00\x00\x00\x01"):
        with pytest.raises(WireFormatError):
            unframe(bad)
    assert MAX_FRAME >= 1 << 20


def test_error_frames():
    with pytest.raises(ProtocolError) as info:
        expect(error_frame(ErrorCode.REFUSED, "no"), Tag.PROOF_OK)
    assert info.value.code == ErrorCode.REFUSED and info.value.message == "no"
    with pytest.raises(WireFormatError):
        expect(frame(Tag.ENROL_OK, b""), Tag.PROOF_OK)


def test_reader_writer():
    X = GroupElement.random()
    s = Scalar.random()
    data = Writer().u8(1).u16(2).u32(3).u64(4).var(b"xy").element(X).scalar(s).getvalue()
    r = Reader(data)
    assert (r.u8(), r.u16(), r.u32(), r.u64(), r.var(), r.element(), r.scalar()) == (
        1, 2, 3, 4, b"xy", X, s)
    r.done()
    with pytest.raises(WireFormatError):
        Reader(b"\x01").u16()
    with pytest.raises(WireFormatError):
        Reader(b"\x01\x02").done()
    with pytest.raises(WireFormatError):
        Reader(bytes(32 * [0xFF])).element()
    with pytest.raises(WireFormatError):
        Reader(b"\x00\x00\x00\x09ab").var()


def test_message_roundtrips():
    ca = CertificationAuthority()
    target = Scalar.random(nonzero=True) * B
    cs = tuple(encrypt(GroupElement.random(), target) for _ in range(3))
    permit = ca.issue(b"mp", Mode.PSEUDONYMISE, [b"mp"], [b"sf"], cs[0])
    assert Permit.from_bytes(permit.to_bytes()) == permit
    assert permit.check(ca.public) is None
    req = TranscryptRequest(Mode.PSEUDONYMISE, b"mp", b"sf", partition_triples("ACD")["C"], cs,
                            permit, target_out=target)
    assert TranscryptRequest.from_bytes(req.to_bytes()) == req
    resp = TranscryptResponse(cs, (b"t1", b"t2", b"t3"))
    assert TranscryptResponse.from_bytes(resp.to_bytes()) == resp
    preq = ProofRequest(bytes(32), b"ticket", cs[0], cs[1])
    assert ProofRequest.from_bytes(preq.to_bytes()) == preq
    with pytest.raises(WireFormatError):
        TranscryptRequest.from_bytes(b"\x09" + req.to_bytes()[1:])


class Echo:
    def handle(self, data, sender):
        return frame(Tag.PROOF_OK, sender + b":" + unframe(data)[1])


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_tcp_transport_authenticates():
    key = Scalar.random(nonzero=True)
    port = _free_port()
    server = serve("E", Echo(), ("127.0.0.1", port), {b"alice": key * B})
    try:
        tr = TcpTransport({"E": ("127.0.0.1", port)}, b"alice", key)
        for i in range(3):
            assert expect(tr.request("E", frame(Tag.PROOF, b"%d" % i)), Tag.PROOF_OK) == \
                b"alice:%d" % i
        tr.close()
        # reconnects after close
        assert expect(tr.request("E", frame(Tag.PROOF, b"x")), Tag.PROOF_OK) == b"alice:x"
        tr.close()
        impostor = TcpTransport({"E": ("127.0.0.1", port)}, b"alice",
                                Scalar.random(nonzero=True))
        with pytest.raises(ProtocolError):
            impostor.request("E", frame(Tag.PROOF, b"x"))
        impostor.close()
    finally:
        server.shutdown()
        server.server_close()


def test_unreachable_service():
    tr = TcpTransport({"E": ("127.0.0.1", _free_port())}, b"a", Scalar(5), timeout=2)
    with pytest.raises(ServiceUnavailable):
        tr.request("E", frame(Tag.PROOF, b""))
    with pytest.raises(ServiceUnavailable):
        tr.request("F", frame(Tag.PROOF, b""))
    with pytest.raises(ServiceUnavailable):
        InProcessTransport({}, b"a").request("A", frame(Tag.PROOF, b""))
