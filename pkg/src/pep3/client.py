"""Party-side access to the transcryptor: enrolment, transcryption, proof checks.

A transcryption visits the three active peers in order, each applying the
factor for the triples the partition assigns it.  After every hop the client
asks, with probability ``sampling`` per cyphertext, for a proof of that hop and
checks it.  Depseudonymisation always asks, and carries the verified hops along
so each later peer can check the chain itself.
"""
from __future__ import annotations

import logging
import random
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from pep3.elgamal import Cyphertext
from pep3.evidence import EvidenceError, KeyDirectory, needed_keys, verify_step
from pep3.group import GroupElement, Scalar
from pep3.keyshares import (
    PEERS, TRIPLES, PowersTables, assemble_party_key, hash_id, partition_triples,
)
from pep3.messages import (
    ChainLink, EnrolResponse, KeyProof, Mode, Permit, ProofRequest, StepProof, TranscryptRequest,
    TranscryptResponse, WHICH, request_hash,
)
from pep3.proofs import derivation_verify
from pep3.transport import ServiceUnavailable, Transport
from pep3.wire import ProtocolError, Reader, Tag, Writer, expect, frame

log = logging.getLogger(__name__)

DEFAULT_ACTIVE = "ACD"


class VerificationFailure(Exception):
    """A peer's result could not be proven correct."""

    def __init__(self, peer: str, reason: str, operation: int | None = None) -> None:
        super().__init__(f"peer {peer}: {reason}")
        self.peer = peer
        self.reason = reason
        self.operation = operation


class EnrolmentError(Exception):
    pass


class EvidenceUnavailable(EvidenceError):
    pass


@dataclass
class ProofStats:
    operations: int = 0
    sampled: int = 0
    verified: int = 0
    failures: list[VerificationFailure] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"operations": self.operations, "sampled": self.sampled,
                "verified": self.verified, "failures": len(self.failures),
                "failed_peers": sorted({f.peer for f in self.failures})}


@dataclass
class Enrolment:
    key: Scalar
    public: GroupElement
    tables: dict[str, PowersTables]
    liars: set[str]
    responders: set[str]


class TranscryptorClient:
    def __init__(self, transport: Transport, tables: dict[str, PowersTables] | None = None,
                 sampling: float = 0.01, active: str = DEFAULT_ACTIVE,
                 rng: random.Random | None = None, raise_on_failure: bool = True) -> None:
        if not 0.0 <= sampling <= 1.0:
            raise ValueError("sampling probability must lie in [0, 1]")
        self.transport = transport
        self.identity = transport.identity
        self.sampling = sampling
        self.active = active
        self.rng = rng or random.SystemRandom()
        self.raise_on_failure = raise_on_failure
        self.stats = ProofStats()
        self._lock = threading.Lock()
        self._key_proofs: dict[tuple[str, bytes, str], KeyProof] = {}
        self.directory: KeyDirectory | None = None
        if tables is not None:
            self.set_tables(tables)

    def set_tables(self, tables: dict[str, PowersTables]) -> None:
        self.tables = dict(tables)
        self.directory = KeyDirectory(self.tables, fetch=self._fetch_key_proof)

    # -- plumbing ----------------------------------------------------------------------

    def _call(self, peer: str, tag: Tag, payload: bytes, ok: Tag) -> bytes:
        return expect(self.transport.request(peer, frame(tag, payload)), ok)

    def _fetch_key_proof(self, which: str, party: bytes, triple: str) -> KeyProof:
        last: Exception | None = None
        payload = Writer().var(party).u8(WHICH.index(which)).u8(TRIPLES.index(triple)).getvalue()
        holders = sorted(triple, key=lambda p: (p not in self.active, p))
        for peer in holders:
            try:
                data = self._call(peer, Tag.DERIVATION_PROOF, payload, Tag.DERIVATION_PROOF_OK)
                r = Reader(data)
                kp = KeyProof.get(r)
                r.done()
            except (ProtocolError, ServiceUnavailable) as exc:
                last = exc
                continue
            table = self.tables[triple].table(which)
            if (kp.which, kp.party, kp.triple) == (which, party, triple) and \
                    derivation_verify(table, hash_id(party), kp.point, kp.proof):
                self._key_proofs[which, party, triple] = kp
                return kp
            last = VerificationFailure(peer, f"bad derivation proof for {triple}")
        raise EvidenceUnavailable(f"no valid derivation proof for {which} key of {triple}: {last}")

    def key_proof(self, which: str, party: bytes, triple: str) -> KeyProof:
        kp = self._key_proofs.get((which, party, triple))
        if kp is None:
            self.directory.point(which, party, triple)
            kp = self._key_proofs[which, party, triple]
        return kp

    # -- enrolment ---------------------------------------------------------------------

    def enrol(self, peers: Iterable[str] = PEERS) -> Enrolment:
        """Collect shares from every reachable peer and follow the majority.

        A peer is a liar if any table it reports differs from the majority
        version or a share it hands out fails its derivation proof.
        """
        responses: dict[str, EnrolResponse] = {}
        for peer in peers:
            try:
                data = self._call(peer, Tag.ENROL, b"", Tag.ENROL_OK)
                responses[peer] = EnrolResponse.from_bytes(data)
            except (ProtocolError, ServiceUnavailable) as exc:
                log.warning("enrolment: peer %s failed: %s", peer, exc)
        liars: set[str] = set()
        tables: dict[str, PowersTables] = {}
        for t in TRIPLES:
            votes = Counter(r.tables[t].to_bytes() for r in responses.values() if t in r.tables)
            if not votes:
                raise EnrolmentError(f"no tables reported for {t}")
            best, count = votes.most_common(1)[0]
            if count < 3:
                raise EnrolmentError(f"no majority on the tables of {t}")
            tables[t] = PowersTables.from_bytes(best)
            for peer, r in responses.items():
                if t not in r.tables or r.tables[t].to_bytes() != best:
                    liars.add(peer)
        exponent = hash_id(self.identity)
        shares: dict[str, Scalar] = {}
        checked: dict[tuple[str, bytes], bool] = {}
        for peer, r in responses.items():
            for item in r.shares:
                if peer not in item.triple:
                    liars.add(peer)
                    continue
                key = (item.triple, item.share.to_bytes())
                if key not in checked:
                    point = GroupElement.base_mul(item.share)
                    checked[key] = point == item.point and derivation_verify(
                        tables[item.triple].encryption, exponent, item.point, item.proof)
                if not checked[key]:
                    liars.add(peer)
                elif item.triple not in shares:
                    shares[item.triple] = item.share
        missing = [t for t in TRIPLES if t not in shares]
        if missing:
            raise EnrolmentError(f"no verified share for {', '.join(missing)}")
        key = assemble_party_key(shares[t] for t in TRIPLES)
        self.set_tables(tables)
        return Enrolment(key, GroupElement.base_mul(key), tables, liars, set(responses))

    # -- transcryption -----------------------------------------------------------------

    def _route(self, active: str | None) -> list[tuple[str, frozenset[str]]]:
        partition = partition_triples(active or self.active)
        return [(p, partition[p]) for p in sorted(partition)]

    def _hop(self, peer: str, req: TranscryptRequest) -> tuple[bytes, TranscryptResponse]:
        payload = req.to_bytes()
        data = self._call(peer, Tag.TRANSCRYPT, payload, Tag.TRANSCRYPT_OK)
        resp = TranscryptResponse.from_bytes(data)
        if len(resp.cyphertexts) != len(req.cyphertexts) or len(resp.tickets) != len(resp.cyphertexts):
            raise VerificationFailure(peer, "response has the wrong number of results")
        return request_hash(payload), resp

    def prove_hop(self, peer: str, req: TranscryptRequest, req_hash: bytes, ticket: bytes,
                  c_in: Cyphertext, c_out: Cyphertext) -> StepProof:
        """Ask ``peer`` for a proof of one hop and check it; raise on failure."""
        try:
            data = self._call(peer, Tag.PROOF, ProofRequest(req_hash, ticket, c_in, c_out).to_bytes(),
                              Tag.PROOF_OK)
            proof = StepProof.from_bytes(data)
        except ProtocolError as exc:
            raise VerificationFailure(peer, f"proof refused ({exc.code.name})") from None
        if not verify_step(self.directory, req.mode, req.from_party, req.to_party, req.triples,
                           c_in, c_out, proof):
            raise VerificationFailure(peer, "certificate rejected")
        return proof

    def transcrypt(self, mode: Mode, from_party: bytes, to_party: bytes,
                   cyphertexts: Sequence[Cyphertext], permit: Permit,
                   active: str | None = None,
                   target_out: GroupElement | None = None) -> list[Cyphertext]:
        """Run ``cyphertexts`` through the active peers, sampling proofs.

        ``target_out`` is the recipient's public key, if known; the last peer
        then skips computing it.
        """
        if mode == Mode.DEPSEUDONYMISE:
            if len(cyphertexts) != 1:
                raise ValueError("depseudonymise one cyphertext at a time")
            return [self.depseudonymise(cyphertexts[0], from_party, to_party, permit, active)]
        current = list(cyphertexts)
        route = self._route(active)
        for i, (peer, triples) in enumerate(route):
            last = i == len(route) - 1
            req = TranscryptRequest(mode, from_party, to_party, triples, tuple(current), permit,
                                    target_out=target_out if last else None)
            req_hash, resp = self._hop(peer, req)
            for c_in, c_out, ticket in zip(current, resp.cyphertexts, resp.tickets):
                self._sample(peer, req, req_hash, ticket, c_in, c_out)
            current = list(resp.cyphertexts)
        with self._lock:
            self.stats.operations += len(cyphertexts)
        return current

    def _sample(self, peer, req, req_hash, ticket, c_in, c_out) -> None:
        if self.sampling <= 0 or self.rng.random() >= self.sampling:
            return
        with self._lock:
            self.stats.sampled += 1
            op = self.stats.operations
        try:
            self.prove_hop(peer, req, req_hash, ticket, c_in, c_out)
        except VerificationFailure as exc:
            exc.operation = op
            with self._lock:
                self.stats.failures.append(exc)
            if self.raise_on_failure:
                raise
            return
        with self._lock:
            self.stats.verified += 1

    def depseudonymise(self, c: Cyphertext, from_party: bytes, to_party: bytes, permit: Permit,
                       active: str | None = None) -> Cyphertext:
        """Walk the active peers with a proof at every hop, forwarding the chain."""
        chain: list[ChainLink] = []
        current = c
        for peer, triples in self._route(active):
            req = TranscryptRequest(Mode.DEPSEUDONYMISE, from_party, to_party, triples, (current,),
                                    permit, tuple(chain))
            req_hash, resp = self._hop(peer, req)
            out = resp.cyphertexts[0]
            proof = self.prove_hop(peer, req, req_hash, resp.tickets[0], current, out)
            key_proofs = tuple(self.key_proof(which, party, t)
                               for which, party in needed_keys(Mode.DEPSEUDONYMISE, from_party,
                                                               to_party)
                               for t in sorted(triples, key=TRIPLES.index))
            chain.append(ChainLink(peer, triples, current, out, proof, key_proofs))
            current = out
        with self._lock:
            self.stats.operations += 1
            self.stats.sampled += len(chain)
            self.stats.verified += len(chain)
        return current

