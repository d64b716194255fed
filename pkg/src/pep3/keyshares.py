"""Ten-share key algebra over the five peers A-E.

Every party key is the product of ten shares, one per 3-subset ("triple") of
peers.  A triple ``T`` derives its share for party ``P`` from its master key
as ``master^H(id_P)`` so that the derivation can be proven against a public
table of squarings.  Any three peers jointly hold all ten shares; no two do.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Iterable, Mapping

from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from pep3.group import L, GroupElement, Scalar, hash_to_scalar
from pep3.proofs import powers_table

PEERS = "ABCDE"
TRIPLES = ("ABE", "ABC", "BCD", "CDE", "ADE", "ACD", "BDE", "ACE", "ABD", "BCE")
TABLE_SIZE = 253

assert sorted(TRIPLES) == ["".join(c) for c in combinations(PEERS, 3)]


class MissingShareError(KeyError):
    pass


class SetupAbort(RuntimeError):
    """Setup found inconsistent key material; lists what disagreed."""

    def __init__(self, message: str, details: list[str] | None = None) -> None:
        super().__init__(message)
        self.details = details or []


def triples_of(peer: str) -> tuple[str, ...]:
    return tuple(t for t in TRIPLES if peer in t)


def triple_index(triple: str) -> int:
    return TRIPLES.index(triple)


def encode_triple_set(triples: Iterable[str]) -> int:
    mask = 0
    for t in triples:
        mask |= 1 << TRIPLES.index(t)
    return mask


def decode_triple_set(mask: int) -> frozenset[str]:
    if mask >> len(TRIPLES):
        raise ValueError("invalid triple mask")
    return frozenset(t for i, t in enumerate(TRIPLES) if mask >> i & 1)


# -- derivation --------------------------------------------------------------------------

def hash_id(party_id: bytes) -> int:
    """Exponent in ``[1, L-1)`` derived from a party identifier."""
    if not party_id:
        raise ValueError("empty party id")
    counter = 0
    while True:
        digest = hashlib.sha512(b"pep3-id" + struct.pack(">I", counter) + party_id).digest()
        e = int.from_bytes(digest, "little") % (L - 1)
        if e:
            return e
        counter += 1


@lru_cache(maxsize=65536)
def _derive(master: int, exponent: int) -> int:
    return pow(master, exponent, L)


def derive_share(master: Scalar, party_id: bytes) -> Scalar:
    if not master:
        raise ValueError("zero master key")
    return Scalar(_derive(master.value, hash_id(party_id)))


def assemble_party_key(shares: Iterable[Scalar]) -> Scalar:
    shares = list(shares)
    if len(shares) != len(TRIPLES):
        raise ValueError(f"expected {len(TRIPLES)} shares, got {len(shares)}")
    acc = Scalar(1)
    for s in shares:
        if not s:
            raise ValueError("zero share")
        acc = acc * s
    return acc


def partition_triples(active: Iterable[str]) -> dict[str, frozenset[str]]:
    """Assign every triple to the first active member in peer order."""
    active = sorted(set(active))
    if len(active) != 3 or any(p not in PEERS for p in active):
        raise ValueError(f"need exactly three distinct peers, got {active!r}")
    assignment: dict[str, set[str]] = {p: set() for p in active}
    for t in TRIPLES:
        owner = next(p for p in active if p in t)
        assignment[owner].add(t)
    return {p: frozenset(ts) for p, ts in assignment.items()}


# -- master secrets -----------------------------------------------------------------------

@dataclass
class PowersTables:
    pseudonym: list[GroupElement]
    encryption: list[GroupElement]

    def table(self, which: str) -> list[GroupElement]:
        return self.pseudonym if which == "pseudonym" else self.encryption

    def to_bytes(self) -> bytes:
        return b"".join(x.to_bytes() for x in self.pseudonym + self.encryption)

    @classmethod
    def from_bytes(cls, data: bytes) -> PowersTables:
        if len(data) != 2 * TABLE_SIZE * 32:
            raise ValueError("powers tables have the wrong size")
        pts = [GroupElement(data[i:i + 32]) for i in range(0, len(data), 32)]
        return cls(pts[:TABLE_SIZE], pts[TABLE_SIZE:])

    def __eq__(self, other) -> bool:
        return isinstance(other, PowersTables) and self.to_bytes() == other.to_bytes()


@dataclass
class MasterSecrets:
    peer: str
    secrets: dict[str, tuple[Scalar, Scalar]]  # triple -> (n^T, s^T)
    tables: dict[str, PowersTables]  # all ten triples
    ticket_key: bytes = field(default_factory=lambda: os.urandom(32))

    MAGIC = b"PEP3MS1"

    def holds(self, triple: str) -> bool:
        return triple in self.secrets

    def master(self, triple: str, which: str) -> Scalar:
        try:
            n, s = self.secrets[triple]
        except KeyError:
            raise MissingShareError(f"peer {self.peer} is not in triple {triple}") from None
        return n if which == "pseudonym" else s

    def share(self, triple: str, party_id: bytes, which: str) -> Scalar:
        return derive_share(self.master(triple, which), party_id)

    def to_bytes(self) -> bytes:
        out = [self.MAGIC, self.peer.encode(), self.ticket_key]
        for t in TRIPLES:
            if t in self.secrets:
                n, s = self.secrets[t]
                out += [bytes([triple_index(t)]), n.to_bytes(), s.to_bytes()]
        out.append(b"\xff")
        for t in TRIPLES:
            out.append(self.tables[t].to_bytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> MasterSecrets:
        if not data.startswith(cls.MAGIC):
            raise ValueError("not a master-secret file")
        off = len(cls.MAGIC)
        peer = data[off:off + 1].decode()
        ticket_key = data[off + 1:off + 33]
        off += 33
        secrets = {}
        while data[off] != 0xFF:
            t = TRIPLES[data[off]]
            secrets[t] = (Scalar.from_bytes(data[off + 1:off + 33]),
                          Scalar.from_bytes(data[off + 33:off + 65]))
            off += 65
        off += 1
        size = 2 * TABLE_SIZE * 32
        tables = {}
        for t in TRIPLES:
            tables[t] = PowersTables.from_bytes(data[off:off + size])
            off += size
        if off != len(data):
            raise ValueError("trailing bytes in master-secret file")
        return cls(peer, secrets, tables, ticket_key)

    def seal(self, key: bytes) -> bytes:
        nonce = os.urandom(12)
        return nonce + ChaCha20Poly1305(key).encrypt(nonce, self.to_bytes(), self.MAGIC)

    @classmethod
    def unseal(cls, key: bytes, blob: bytes) -> MasterSecrets:
        return cls.from_bytes(ChaCha20Poly1305(key).decrypt(blob[:12], blob[12:], cls.MAGIC))


def partition_factor(masters: MasterSecrets, assigned: Iterable[str], party_id: bytes,
                     which: str) -> Scalar:
    acc = Scalar(1)
    for t in assigned:
        acc = acc * masters.share(t, party_id, which)
    return acc


# -- setup --------------------------------------------------------------------------------

def _pair(x: str, y: str) -> str:
    return "".join(sorted(x + y))


class SetupParticipant:
    """One peer's side of the setup exchange.

    Rounds: ``announce`` a Diffie-Hellman point; ``distribute`` pair secrets to
    the third member of each triple; ``combine`` the copies received (checking
    both holders sent the same value) into triple secrets and publish the
    powers tables; ``finish`` by cross-checking everybody's tables.
    """

    def __init__(self, peer: str) -> None:
        if peer not in PEERS:
            raise ValueError(f"unknown peer {peer!r}")
        self.peer = peer
        self._dh = Scalar.random(nonzero=True)
        self._pairs: dict[str, tuple[Scalar, Scalar]] = {}
        self._secrets: dict[str, tuple[Scalar, Scalar]] = {}
        self._tables: dict[str, PowersTables] = {}

    def announce(self) -> GroupElement:
        return GroupElement.base_mul(self._dh)

    def pair_secrets(self, announcements: Mapping[str, GroupElement]) -> None:
        for other in PEERS:
            if other == self.peer:
                continue
            shared = self._dh * announcements[other]
            pair = _pair(self.peer, other).encode()
            n = hash_to_scalar(b"pep3-setup-n:" + pair, [shared])
            s = hash_to_scalar(b"pep3-setup-s:" + pair, [shared])
            self._pairs[_pair(self.peer, other)] = (n or Scalar(1), s or Scalar(1))

    def distribute(self, announcements: Mapping[str, GroupElement]
                   ) -> dict[str, list[tuple[str, Scalar, Scalar]]]:
        """Pair secrets destined to each peer: ``recipient -> [(triple, n, s)]``."""
        self.pair_secrets(announcements)
        out: dict[str, list] = {p: [] for p in PEERS if p != self.peer}
        for t in triples_of(self.peer):
            for recipient in t:
                if recipient == self.peer:
                    continue
                partner = t.replace(recipient, "").replace(self.peer, "")
                n, s = self._pairs[_pair(self.peer, partner)]
                out[recipient].append((t, n, s))
        return out

    def combine(self, received: Mapping[str, list[tuple[str, Scalar, Scalar]]]
                ) -> dict[str, PowersTables]:
        """Form the triple secrets and return this peer's published tables."""
        copies: dict[str, dict[str, tuple[Scalar, Scalar]]] = {}
        for sender, items in received.items():
            for t, n, s in items:
                copies.setdefault(t, {})[sender] = (n, s)
        for t in triples_of(self.peer):
            y, z = (p for p in t if p != self.peer)
            got = copies.get(t, {})
            if set(got) != {y, z}:
                raise SetupAbort(f"peer {self.peer}: missing pair secret for {t}",
                                 [f"{t}: received from {sorted(got)}"])
            if got[y] != got[z]:
                raise SetupAbort(
                    f"peer {self.peer}: copies of pair secret {_pair(y, z)} disagree",
                    [f"{t}: {y} and {z} sent different values for {_pair(y, z)}"])
            n_yz, s_yz = got[y]
            n_xy, s_xy = self._pairs[_pair(self.peer, y)]
            n_xz, s_xz = self._pairs[_pair(self.peer, z)]
            self._secrets[t] = (n_xy * n_yz * n_xz, s_xy * s_yz * s_xz)
            n, s = self._secrets[t]
            self._tables[t] = PowersTables(powers_table(n), powers_table(s))
        return dict(self._tables)

    def finish(self, published: Mapping[str, Mapping[str, PowersTables]]) -> MasterSecrets:
        """Cross-compare all published tables; abort on any disagreement."""
        problems = []
        agreed: dict[str, PowersTables] = {}
        for t in TRIPLES:
            versions = {p: published[p][t] for p in t if p in published and t in published[p]}
            if set(versions) != set(t):
                problems.append(f"{t}: tables missing from {sorted(set(t) - set(versions))}")
                continue
            if t in self._tables:
                versions[self.peer] = self._tables[t]
            encodings = {p: v.to_bytes() for p, v in versions.items()}
            if len(set(encodings.values())) != 1:
                for i, which in ((0, "pseudonym"), (1, "encryption")):
                    tables = {p: v.table(which) for p, v in versions.items()}
                    for k in range(TABLE_SIZE):
                        entries = {p: tab[k] for p, tab in tables.items()}
                        if len(set(entries.values())) != 1:
                            problems.append(f"{t}: {which} table entry {k} differs between "
                                            f"{', '.join(sorted(entries))}")
                            break
                continue
            agreed[t] = versions[t[0]]
        if problems:
            raise SetupAbort(f"peer {self.peer}: inconsistent public key material", problems)
        return MasterSecrets(self.peer, dict(self._secrets), agreed)


def run_setup(participants: Mapping[str, SetupParticipant]) -> dict[str, MasterSecrets]:
    """Drive all rounds between in-process participants."""
    announcements = {p: part.announce() for p, part in participants.items()}
    outgoing = {p: part.distribute(announcements) for p, part in participants.items()}
    inbox: dict[str, dict[str, list]] = {p: {} for p in participants}
    for sender, msgs in outgoing.items():
        for recipient, items in msgs.items():
            inbox[recipient][sender] = items
    published = {p: part.combine(inbox[p]) for p, part in participants.items()}
    return {p: part.finish(published) for p, part in participants.items()}
