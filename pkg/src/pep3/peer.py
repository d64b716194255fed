"""The peer node: transcryption, retroactive proofs, enrolment and derivation proofs.

After setup a peer's only state is its :class:`~pep3.keyshares.MasterSecrets`.
Whatever it needs to prove an operation later travels with the client in a
sealed proof ticket.
"""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from pep3.elgamal import Cyphertext, rsk
from pep3.evidence import (
    KeyDirectory, composite_certificates, needed_keys, partition_evidence, step_factors,
    verify_step,
)
from pep3.group import GroupElement, Scalar
from pep3.keyshares import (
    TRIPLES, MasterSecrets, MissingShareError, decode_triple_set, encode_triple_set, hash_id,
)
from pep3.messages import (
    EnrolResponse, EnrolShare, KeyProof, Mode, ProofRequest, WHICH, StepProof, TranscryptRequest,
    TranscryptResponse, _ordered, request_hash,
)
from pep3.proofs import InconsistentInput, derivation_prove, rsk_prove
from pep3.wire import (
    ErrorCode, ProtocolError, Reader, Tag, WireFormatError, Writer, error_frame, frame, unframe,
)

log = logging.getLogger(__name__)


class PermitInvalid(ProtocolError):
    def __init__(self, message: str) -> None:
        super().__init__(ErrorCode.PERMIT_INVALID, message)


class ChainInvalid(ProtocolError):
    def __init__(self, message: str) -> None:
        super().__init__(ErrorCode.CHAIN_INVALID, message)


class NotMyTriples(ProtocolError):
    def __init__(self, message: str) -> None:
        super().__init__(ErrorCode.NOT_MY_TRIPLES, message)


class TicketForged(ProtocolError):
    def __init__(self, message: str = "ticket does not authenticate") -> None:
        super().__init__(ErrorCode.TICKET_FORGED, message)


class TicketMismatch(ProtocolError):
    def __init__(self, message: str) -> None:
        super().__init__(ErrorCode.TICKET_MISMATCH, message)


@dataclass(frozen=True)
class TicketRecord:
    request_hash: bytes
    input_hash: bytes
    r: Scalar
    mode: Mode
    from_party: bytes
    to_party: bytes
    triples: frozenset[str]

    def to_bytes(self) -> bytes:
        return (Writer().raw(self.request_hash).raw(self.input_hash).scalar(self.r)
                .u8(self.mode).var(self.from_party).var(self.to_party)
                .u16(encode_triple_set(self.triples)).getvalue())

    @classmethod
    def from_bytes(cls, data: bytes) -> TicketRecord:
        r = Reader(data)
        out = cls(r.raw(32), r.raw(32), r.scalar(), Mode(r.u8()), r.var(), r.var(),
                  decode_triple_set(r.u16()))
        r.done()
        return out


def _digest(c: Cyphertext) -> bytes:
    return hashlib.sha256(c.to_bytes()).digest()


class Peer:
    """One of the five transcryptor peers.

    ``parties`` lists the identifiers allowed to talk to this peer;
    ``ca_public`` verifies permits.
    """

    def __init__(self, masters: MasterSecrets, ca_public: GroupElement,
                 parties: Mapping[bytes, GroupElement] | None = None) -> None:
        self.masters = masters
        self.letter = masters.peer
        self.ca_public = ca_public
        self.parties = dict(parties or {})
        self._aead = ChaCha20Poly1305(masters.ticket_key)
        self._aad = b"pep3-ticket:" + self.letter.encode()
        self.directory = KeyDirectory(masters.tables, local=self._local_point)
        self._partition = lru_cache(maxsize=4096)(self._partition_uncached)
        self._share_point = lru_cache(maxsize=4096)(self._share_point_uncached)
        self._step_evidence = lru_cache(maxsize=1024)(self._step_evidence_uncached)
        self._key_proofs: dict[tuple[str, bytes, str], KeyProof] = {}

    # -- key material ------------------------------------------------------------------

    def _share_point_uncached(self, which: str, party: bytes, triple: str) -> GroupElement:
        return GroupElement.base_mul(self.masters.share(triple, party, which))

    def _local_point(self, which: str, party: bytes, triple: str) -> GroupElement | None:
        if not self.masters.holds(triple):
            return None
        return self._share_point(which, party, triple)

    def _partition_uncached(self, which: str, party: bytes, triples: frozenset[str]) -> Scalar:
        acc = Scalar(1)
        for t in _ordered(triples):
            acc = acc * self.masters.share(t, party, which)
        return acc

    def _factors(self, mode: Mode, from_party: bytes, to_party: bytes,
                 triples: frozenset[str]) -> tuple[Scalar, Scalar]:
        keys = {k: self._partition(k[0], k[1], triples)
                for k in needed_keys(mode, from_party, to_party)}
        return step_factors(mode, keys, from_party, to_party)

    def _check_triples(self, triples: frozenset[str]) -> None:
        if not triples:
            raise NotMyTriples("no triples assigned")
        missing = [t for t in triples if not self.masters.holds(t)]
        if missing:
            raise NotMyTriples(f"peer {self.letter} is not in {', '.join(sorted(missing))}")

    # -- dispatch ----------------------------------------------------------------------

    def handle(self, data: bytes, sender: bytes) -> bytes:
        """Answer one request frame; errors come back as error frames."""
        try:
            tag, payload = unframe(data)
            if tag == Tag.TRANSCRYPT:
                return frame(Tag.TRANSCRYPT_OK, self.handle_transcrypt_bytes(payload, sender))
            if tag == Tag.PROOF:
                req = ProofRequest.from_bytes(payload)
                return frame(Tag.PROOF_OK, self.handle_proof_request(req).to_bytes())
            if tag == Tag.ENROL:
                return frame(Tag.ENROL_OK, self.handle_enrolment(sender).to_bytes())
            if tag == Tag.DERIVATION_PROOF:
                r = Reader(payload)
                party, which, triple_idx = r.var(), r.u8(), r.u8()
                r.done()
                if which >= 2 or triple_idx >= len(TRIPLES):
                    raise WireFormatError("bad derivation proof request")
                kp = self.handle_derivation_proof_request(party, WHICH[which], TRIPLES[triple_idx])
                w = Writer()
                kp.put(w)
                return frame(Tag.DERIVATION_PROOF_OK, w.getvalue())
            raise WireFormatError(f"unsupported tag {tag:#x}")
        except ProtocolError as exc:
            return error_frame(exc.code, exc.message)
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("peer %s failed", self.letter)
            return error_frame(ErrorCode.INTERNAL, type(exc).__name__)

    # -- transcryption -----------------------------------------------------------------

    def check_permit(self, req: TranscryptRequest, sender: bytes) -> None:
        permit = req.permit
        problem = permit.check(self.ca_public)
        if problem:
            raise PermitInvalid(problem)
        if permit.subject != sender:
            raise PermitInvalid("permit subject is not the requester")
        if permit.operation != req.mode:
            raise PermitInvalid("permit does not cover this operation")
        if req.from_party not in permit.from_set or req.to_party not in permit.to_set:
            raise PermitInvalid("permit does not cover these parties")
        if req.mode == Mode.DEPSEUDONYMISE:
            if permit.cyphertext is None:
                raise PermitInvalid("depseudonymisation needs a permit for a specific pseudonym")
            if len(req.cyphertexts) != 1:
                raise PermitInvalid("depseudonymisation handles one pseudonym at a time")
            self.check_chain(req)

    def check_chain(self, req: TranscryptRequest) -> None:
        """Link the permit's cyphertext to the input through earlier hops."""
        current = req.permit.cyphertext
        used: set[str] = set()
        for link in req.chain:
            if link.c_in != current:
                raise ChainInvalid("chain does not continue from the previous result")
            if used & link.triples or req.triples & link.triples:
                raise ChainInvalid("triples applied twice")
            for kp in link.key_proofs:
                if kp.triple in self.directory.tables and not self.directory.add_proof(kp):
                    raise ChainInvalid(f"derivation proof for {kp.triple} rejected")
            if not verify_step(self.directory, req.mode, req.from_party, req.to_party,
                               link.triples, link.c_in, link.c_out, link.proof):
                raise ChainInvalid(f"certificate of peer {link.peer} does not verify")
            used |= link.triples
            current = link.c_out
        if req.cyphertexts[0] != current:
            raise ChainInvalid("input is not linked to the permitted pseudonym")

    def handle_transcrypt_bytes(self, payload: bytes, sender: bytes) -> bytes:
        req = TranscryptRequest.from_bytes(payload)
        return self.handle_transcrypt(req, sender, request_hash(payload)).to_bytes()

    def handle_transcrypt(self, req: TranscryptRequest, sender: bytes,
                          req_hash: bytes | None = None) -> TranscryptResponse:
        if req_hash is None:
            req_hash = request_hash(req.to_bytes())
        if not req.cyphertexts:
            raise WireFormatError("no cyphertexts")
        self._check_triples(req.triples)
        self.check_permit(req, sender)
        s, n = self._factors(req.mode, req.from_party, req.to_party, req.triples)
        outs, tickets = [], []
        for c in req.cyphertexts:
            r = Scalar.random(nonzero=True)
            outs.append(self.apply(c, s, n, r, req.target_out))
            record = TicketRecord(req_hash, _digest(c), r, req.mode, req.from_party,
                                  req.to_party, req.triples)
            tickets.append(self.seal_ticket(record))
        return TranscryptResponse(tuple(outs), tuple(tickets))

    def apply(self, c: Cyphertext, s: Scalar, n: Scalar, r: Scalar,
              target_out: GroupElement | None = None) -> Cyphertext:
        # A wrong target_out only hurts the requester, and the proof for it
        # is refused: the recomputation in prove_step will not match.
        return rsk(c, s, n, r, target_out)

    # -- tickets and proofs ------------------------------------------------------------

    def seal_ticket(self, record: TicketRecord) -> bytes:
        nonce = os.urandom(12)
        return nonce + self._aead.encrypt(nonce, record.to_bytes(), self._aad)

    def open_ticket(self, ticket: bytes) -> TicketRecord:
        try:
            plain = self._aead.decrypt(ticket[:12], ticket[12:], self._aad)
        except (InvalidTag, ValueError):
            raise TicketForged() from None
        return TicketRecord.from_bytes(plain)

    def handle_proof_request(self, req: ProofRequest) -> StepProof:
        record = self.open_ticket(req.ticket)
        if record.request_hash != req.request_hash:
            raise TicketMismatch("ticket belongs to another request")
        if record.input_hash != _digest(req.c_in):
            raise TicketMismatch("ticket belongs to another input")
        return self.prove_step(record, req.c_in, req.c_out)

    def _step_evidence_uncached(self, mode: Mode, from_party: bytes, to_party: bytes,
                                triples: frozenset[str]):
        """Factors, partition evidence and factor certificates; all reusable."""
        keys, points, evidence = {}, {}, []
        order = _ordered(triples)
        for which, party in needed_keys(mode, from_party, to_party):
            shares = {t: self.masters.share(t, party, which) for t in order}
            share_points = {t: self._share_point(which, party, t) for t in order}
            k, ev = partition_evidence(which, party, order, shares, share_points)
            keys[which, party] = k
            points[which, party] = ev.product
            evidence.append(ev)
        s, n = step_factors(mode, keys, from_party, to_party)
        composites = composite_certificates(mode, keys, points, from_party, to_party)
        return s, n, tuple(evidence), tuple(composites)

    def prove_step(self, record: TicketRecord, c_in: Cyphertext, c_out: Cyphertext) -> StepProof:
        s, n, evidence, composites = self._step_evidence(
            record.mode, record.from_party, record.to_party, record.triples)
        try:
            cert = rsk_prove(c_in, c_out, s, n, record.r, composites)
        except InconsistentInput:
            raise TicketMismatch("output does not match the recorded operation") from None
        return StepProof(cert, evidence)

    # -- enrolment and derivation proofs -----------------------------------------------

    def handle_derivation_proof_request(self, party: bytes, which: str, triple: str) -> KeyProof:
        try:
            master = self.masters.master(triple, which)
        except MissingShareError as exc:
            raise NotMyTriples(str(exc)) from None
        key = (which, party, triple)
        kp = self._key_proofs.get(key)
        if kp is None:
            table = self.masters.tables[triple].table(which)
            point, proof = derivation_prove(master, table, hash_id(party))
            kp = KeyProof(which, party, triple, point, proof)
            if len(self._key_proofs) > 4096:
                self._key_proofs.clear()
            self._key_proofs[key] = kp
        return kp

    def handle_enrolment(self, party: bytes) -> EnrolResponse:
        if party not in self.parties:
            raise ProtocolError(ErrorCode.UNKNOWN_PARTY, "party is not registered")
        shares = []
        for t in self.masters.secrets:
            kp = self.handle_derivation_proof_request(party, "encryption", t)
            shares.append(EnrolShare(t, self.masters.share(t, party, "encryption"), kp.point,
                                     kp.proof))
        return EnrolResponse(self.letter, dict(self.masters.tables), tuple(shares))
