"""Misbehaving peers and setup participants for the adversarial scenarios."""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Mapping

from pep3.elgamal import Cyphertext, rsk
from pep3.group import GroupElement, Scalar
from pep3.keyshares import PEERS, PowersTables, SetupParticipant, derive_share, hash_id
from pep3.messages import EnrolResponse, EnrolShare, StepProof
from pep3.peer import Peer, TicketMismatch, TicketRecord
from pep3.proofs import derivation_prove, powers_table, rsk_prove
from pep3.wire import ErrorCode, ProtocolError

SCENARIOS = ("corrupt-result", "wrong-enrolment-share", "bad-setup-public", "refuse-proof")
SETUP_FAULTS = ("tamper-table", "split-pair", "withhold-table")

# A corrupted result reshuffles by this extra factor.
_TWIST = Scalar(7)


@dataclass(frozen=True)
class AdversaryScript:
    peers: tuple[str, ...]
    misbehaviour: str
    rate: float = 1.0  # trigger: probability of misbehaving on each opportunity

    def __post_init__(self) -> None:
        if self.misbehaviour not in SCENARIOS:
            raise ValueError(f"unknown misbehaviour {self.misbehaviour!r}")
        if not 1 <= len(self.peers) <= 2 or len(set(self.peers)) != len(self.peers):
            raise ValueError("a scenario names one or two distinct peers")
        if any(p not in PEERS for p in self.peers):
            raise ValueError(f"unknown peer in {self.peers}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("trigger rate must lie in [0, 1]")


class CorruptResultPeer(Peer):
    """Returns a wrongly reshuffled result, and tries to prove it anyway."""

    def __init__(self, *args, rate: float = 1.0, rng: random.Random | None = None, **kw) -> None:
        super().__init__(*args, **kw)
        self.rate = rate
        self.rng = rng or random.Random()
        self.corrupted = 0

    def apply(self, c: Cyphertext, s: Scalar, n: Scalar, r: Scalar,
              target_out: GroupElement | None = None) -> Cyphertext:
        if self.rng.random() < self.rate:
            self.corrupted += 1
            return rsk(c, s, n * _TWIST, r, target_out)
        return rsk(c, s, n, r, target_out)

    def prove_step(self, record: TicketRecord, c_in: Cyphertext, c_out: Cyphertext) -> StepProof:
        try:
            return super().prove_step(record, c_in, c_out)
        except TicketMismatch:
            pass
        # Certify what was actually done; the key evidence stays honest.
        s, n, evidence, composites = self._step_evidence(
            record.mode, record.from_party, record.to_party, record.triples)
        cert = rsk_prove(c_in, c_out, s, n * _TWIST, record.r, composites)
        return StepProof(cert, evidence)


class RefuseProofPeer(Peer):
    def handle_proof_request(self, req):
        raise ProtocolError(ErrorCode.REFUSED, "proof refused")


class WrongEnrolmentPeer(Peer):
    """Hands out shares from invented master keys, with tables and proofs to match."""

    def __init__(self, *args, **kw) -> None:
        super().__init__(*args, **kw)
        self._fake = {t: Scalar.random(nonzero=True) for t in self.masters.secrets}
        self._fake_tables = {t: PowersTables(self.masters.tables[t].pseudonym, powers_table(m))
                             for t, m in self._fake.items()}

    def handle_enrolment(self, party: bytes) -> EnrolResponse:
        if party not in self.parties:
            raise ProtocolError(ErrorCode.UNKNOWN_PARTY, "party is not registered")
        tables = dict(self.masters.tables)
        tables.update(self._fake_tables)
        shares = []
        for t, m in self._fake.items():
            point, proof = derivation_prove(m, self._fake_tables[t].encryption, hash_id(party))
            shares.append(EnrolShare(t, derive_share(m, party), point, proof))
        return EnrolResponse(self.letter, tables, tuple(shares))


class FaultySetupParticipant(SetupParticipant):
    """Injects one inconsistency into the setup exchange."""

    def __init__(self, peer: str, fault: str, rng: random.Random | None = None) -> None:
        super().__init__(peer)
        if fault not in SETUP_FAULTS:
            raise ValueError(f"unknown setup fault {fault!r}")
        self.fault = fault
        self.rng = rng or random.Random()

    def distribute(self, announcements):
        out = super().distribute(announcements)
        if self.fault == "split-pair":
            victim = self.rng.choice(sorted(out))
            items = out[victim]
            i = self.rng.randrange(len(items))
            t, n, s = items[i]
            items[i] = (t, n + Scalar(1), s)
        return out

    def combine(self, received):
        published = super().combine(received)
        t = self.rng.choice(sorted(published))
        if self.fault == "tamper-table":
            which = self.rng.choice(("pseudonym", "encryption"))
            table = list(published[t].table(which))
            k = self.rng.randrange(len(table))
            table[k] = table[k] + GroupElement.base_mul(Scalar(1))
            published[t] = (PowersTables(table, published[t].encryption) if which == "pseudonym"
                            else PowersTables(published[t].pseudonym, table))
        elif self.fault == "withhold-table":
            del published[t]
        return published


def build_peer(script: AdversaryScript | None, letter: str, *args, **kw) -> Peer:
    if script is None or letter not in script.peers:
        return Peer(*args, **kw)
    if script.misbehaviour == "corrupt-result":
        return CorruptResultPeer(*args, rate=script.rate, **kw)
    if script.misbehaviour == "refuse-proof":
        return RefuseProofPeer(*args, **kw)
    if script.misbehaviour == "wrong-enrolment-share":
        return WrongEnrolmentPeer(*args, **kw)
    return Peer(*args, **kw)


def setup_participants(script: AdversaryScript | None, fault: str = "tamper-table",
                       rng: random.Random | None = None) -> Mapping[str, SetupParticipant]:
    faulty = script.peers if script and script.misbehaviour == "bad-setup-public" else ()
    return {p: FaultySetupParticipant(p, fault, rng) if p in faulty else SetupParticipant(p)
            for p in PEERS}
