"""Typed request/response messages and their wire encodings."""
from __future__ import annotations

import enum
import hashlib
import time
from dataclasses import dataclass, field, replace

from pep3.elgamal import Cyphertext
from pep3.group import GroupElement, Scalar
from pep3.keyshares import PowersTables, TRIPLES, decode_triple_set, encode_triple_set
from pep3.proofs import ProductProof, RSKCertificate, Signature, sign, verify_signature
from pep3.wire import Reader, WireFormatError, Writer


class Mode(enum.IntEnum):
    TRANSLATE = 1
    PSEUDONYMISE = 2
    DEPSEUDONYMISE = 3


WHICH = ("pseudonym", "encryption")


def _which_code(which: str) -> int:
    return WHICH.index(which)


def _ordered(triples) -> tuple[str, ...]:
    return tuple(t for t in TRIPLES if t in set(triples))


# -- permits -----------------------------------------------------------------------------

@dataclass(frozen=True)
class Permit:
    subject: bytes
    operation: Mode
    from_set: tuple[bytes, ...]
    to_set: tuple[bytes, ...]
    cyphertext: Cyphertext | None = None
    expiry: int = 0
    signature: Signature | None = None

    def body(self) -> bytes:
        w = Writer().raw(b"pep3-permit").var(self.subject).u8(self.operation)
        w.items(self.from_set, Writer.var).items(self.to_set, Writer.var)
        if self.cyphertext is None:
            w.u8(0)
        else:
            w.u8(1).cyphertext(self.cyphertext)
        return w.u64(self.expiry).getvalue()

    def signed(self, ca_secret: Scalar) -> Permit:
        return replace(self, signature=sign(ca_secret, self.body()))

    def check(self, ca_public: GroupElement, now: float | None = None) -> str | None:
        """Return a reason the permit is unacceptable, or ``None``."""
        if self.signature is None or not verify_signature(ca_public, self.body(), self.signature):
            return "bad permit signature"
        if (time.time() if now is None else now) >= self.expiry:
            return "permit expired"
        return None

    def to_bytes(self) -> bytes:
        if self.signature is None:
            raise ValueError("unsigned permit")
        return self.body() + self.signature.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> Permit:
        r = Reader(data)
        if r.raw(11) != b"pep3-permit":
            raise WireFormatError("not a permit")
        subject = r.var()
        try:
            op = Mode(r.u8())
        except ValueError:
            raise WireFormatError("unknown permit operation") from None
        from_set = tuple(r.items(Reader.var))
        to_set = tuple(r.items(Reader.var))
        c = r.cyphertext() if r.u8() else None
        expiry = r.u64()
        sig = Signature(r.element(), r.scalar())
        r.done()
        return cls(subject, op, from_set, to_set, c, expiry, sig)


# -- evidence ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionEvidence:
    """Per-triple key points of a party and the chain multiplying them together."""

    which: str
    party: bytes
    triples: tuple[str, ...]
    points: tuple[GroupElement, ...]
    product: GroupElement
    chain: ProductProof

    def put(self, w: Writer) -> None:
        w.u8(_which_code(self.which)).var(self.party).u16(encode_triple_set(self.triples))
        w.items(self.points, Writer.element).element(self.product).var(self.chain.to_bytes())

    @classmethod
    def get(cls, r: Reader) -> PartitionEvidence:
        which = WHICH[r.u8()]
        party = r.var()
        triples = _ordered(decode_triple_set(r.u16()))
        points = tuple(r.items(Reader.element))
        product = r.element()
        chain = ProductProof.from_bytes(r.var())
        return cls(which, party, triples, points, product, chain)


@dataclass(frozen=True)
class KeyProof:
    """A per-triple key point ``share * B`` with its derivation proof."""

    which: str
    party: bytes
    triple: str
    point: GroupElement
    proof: ProductProof

    def put(self, w: Writer) -> None:
        w.u8(_which_code(self.which)).var(self.party).u8(TRIPLES.index(self.triple))
        w.element(self.point).var(self.proof.to_bytes())

    @classmethod
    def get(cls, r: Reader) -> KeyProof:
        which = WHICH[r.u8()]
        party = r.var()
        idx = r.u8()
        if idx >= len(TRIPLES):
            raise WireFormatError("bad triple index")
        return cls(which, party, TRIPLES[idx], r.element(), ProductProof.from_bytes(r.var()))


@dataclass(frozen=True)
class StepProof:
    """What a peer returns when asked to prove one of its operations."""

    cert: RSKCertificate
    evidence: tuple[PartitionEvidence, ...]

    def put(self, w: Writer) -> None:
        w.var(self.cert.to_bytes()).items(self.evidence, lambda w_, e: e.put(w_))

    @classmethod
    def get(cls, r: Reader) -> StepProof:
        cert = RSKCertificate.from_bytes(r.var())
        return cls(cert, tuple(r.items(PartitionEvidence.get)))

    def to_bytes(self) -> bytes:
        w = Writer()
        self.put(w)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> StepProof:
        r = Reader(data)
        out = cls.get(r)
        r.done()
        return out


@dataclass(frozen=True)
class ChainLink:
    """One completed depseudonymisation hop, passed along to the next peer."""

    peer: str
    triples: frozenset[str]
    c_in: Cyphertext
    c_out: Cyphertext
    proof: StepProof
    key_proofs: tuple[KeyProof, ...] = ()

    def put(self, w: Writer) -> None:
        w.u8(ord(self.peer)).u16(encode_triple_set(self.triples))
        w.cyphertext(self.c_in).cyphertext(self.c_out)
        self.proof.put(w)
        w.items(self.key_proofs, lambda w_, k: k.put(w_))

    @classmethod
    def get(cls, r: Reader) -> ChainLink:
        peer = chr(r.u8())
        triples = decode_triple_set(r.u16())
        c_in, c_out = r.cyphertext(), r.cyphertext()
        proof = StepProof.get(r)
        return cls(peer, triples, c_in, c_out, proof, tuple(r.items(KeyProof.get)))


# -- requests ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TranscryptRequest:
    mode: Mode
    from_party: bytes
    to_party: bytes
    triples: frozenset[str]
    cyphertexts: tuple[Cyphertext, ...]
    permit: Permit
    chain: tuple[ChainLink, ...] = ()
    # known resulting public key; lets the peer skip one multiplication
    target_out: GroupElement | None = None

    def to_bytes(self) -> bytes:
        w = Writer().u8(self.mode).var(self.from_party).var(self.to_party)
        w.u16(encode_triple_set(self.triples)).cyphertexts(self.cyphertexts)
        w.var(self.permit.to_bytes()).items(self.chain, lambda w_, c: c.put(w_))
        if self.target_out is None:
            return w.u8(0).getvalue()
        return w.u8(1).element(self.target_out).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> TranscryptRequest:
        r = Reader(data)
        try:
            mode = Mode(r.u8())
        except ValueError:
            raise WireFormatError("unknown mode") from None
        from_party, to_party = r.var(), r.var()
        triples = decode_triple_set(r.u16())
        cs = tuple(r.cyphertexts())
        permit = Permit.from_bytes(r.var())
        chain = tuple(r.items(ChainLink.get))
        target_out = r.element() if r.u8() else None
        r.done()
        return cls(mode, from_party, to_party, triples, cs, permit, chain, target_out)


def request_hash(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


@dataclass(frozen=True)
class TranscryptResponse:
    cyphertexts: tuple[Cyphertext, ...]
    tickets: tuple[bytes, ...]

    def to_bytes(self) -> bytes:
        return Writer().cyphertexts(self.cyphertexts).items(self.tickets, Writer.var).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> TranscryptResponse:
        r = Reader(data)
        out = cls(tuple(r.cyphertexts()), tuple(r.items(Reader.var)))
        r.done()
        return out


@dataclass(frozen=True)
class ProofRequest:
    request_hash: bytes
    ticket: bytes
    c_in: Cyphertext
    c_out: Cyphertext

    def to_bytes(self) -> bytes:
        return (Writer().raw(self.request_hash).var(self.ticket)
                .cyphertext(self.c_in).cyphertext(self.c_out).getvalue())

    @classmethod
    def from_bytes(cls, data: bytes) -> ProofRequest:
        r = Reader(data)
        out = cls(r.raw(32), r.var(), r.cyphertext(), r.cyphertext())
        r.done()
        return out


@dataclass(frozen=True)
class EnrolShare:
    triple: str
    share: Scalar
    point: GroupElement
    proof: ProductProof


@dataclass(frozen=True)
class EnrolResponse:
    peer: str
    tables: dict[str, PowersTables]
    shares: tuple[EnrolShare, ...] = field(default=())

    def to_bytes(self) -> bytes:
        w = Writer().u8(ord(self.peer))
        w.items(sorted(self.tables.items(), key=lambda kv: TRIPLES.index(kv[0])),
                lambda w_, kv: w_.u8(TRIPLES.index(kv[0])).raw(kv[1].to_bytes()))
        w.items(self.shares, lambda w_, s: w_.u8(TRIPLES.index(s.triple)).scalar(s.share)
                .element(s.point).var(s.proof.to_bytes()))
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> EnrolResponse:
        from pep3.keyshares import TABLE_SIZE

        r = Reader(data)
        peer = chr(r.u8())
        tables = {}
        for _ in range(r.u32()):
            t = TRIPLES[r.u8()]
            tables[t] = PowersTables.from_bytes(r.raw(2 * TABLE_SIZE * 32))
        shares = []
        for _ in range(r.u32()):
            t = TRIPLES[r.u8()]
            shares.append(EnrolShare(t, r.scalar(), r.element(), ProductProof.from_bytes(r.var())))
        r.done()
        return cls(peer, tables, tuple(shares))
