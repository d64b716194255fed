"""Checking a peer's step: which keys it used, and that they are the right ones.

A peer acting for the triples ``X`` on behalf of parties ``P -> Q`` applies
rekey factor ``s_Q^X / s_P^X`` and a reshuffle factor depending on the mode.
The verifier ties those factors to public key points in three layers:

* per-triple points ``share * B``, proven from the published powers tables
  (or computed locally by a peer holding the triple);
* partition points ``(prod of shares over X) * B``, proven by a product chain;
* the factor points ``sB`` / ``nB`` of the RSK certificate, tied to partition
  points by composite certificates.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

from pep3.elgamal import Cyphertext
from pep3.group import B, GroupElement, Scalar
from pep3.keyshares import PowersTables, TRIPLES, hash_id
from pep3.messages import KeyProof, Mode, PartitionEvidence, StepProof, _ordered
from pep3.proofs import (
    TAG_PRODUCT, Ratio, derivation_verify, factor_certificate, product_prove, product_verify,
    rsk_verify,
)


class EvidenceError(ValueError):
    pass


def needed_keys(mode: Mode, from_party: bytes, to_party: bytes) -> list[tuple[str, bytes]]:
    keys = [("encryption", from_party), ("encryption", to_party)]
    if mode in (Mode.TRANSLATE, Mode.DEPSEUDONYMISE):
        keys.append(("pseudonym", from_party))
    if mode in (Mode.TRANSLATE, Mode.PSEUDONYMISE):
        keys.append(("pseudonym", to_party))
    return keys


def step_factors(mode: Mode, keys: Mapping[tuple[str, bytes], Scalar], from_party: bytes,
                 to_party: bytes) -> tuple[Scalar, Scalar]:
    """The rekey and reshuffle factors from partition scalars."""
    s = keys["encryption", to_party] * keys["encryption", from_party].invert()
    if mode == Mode.TRANSLATE:
        n = keys["pseudonym", to_party] * keys["pseudonym", from_party].invert()
    elif mode == Mode.PSEUDONYMISE:
        n = keys["pseudonym", to_party]
    else:
        n = keys["pseudonym", from_party].invert()
    return s, n


def composite_certificates(mode: Mode, keys: Mapping[tuple[str, bytes], Scalar],
                           points: Mapping[tuple[str, bytes], GroupElement],
                           from_party: bytes, to_party: bytes):
    s, n = step_factors(mode, keys, from_party, to_party)
    e_from, e_to = ("encryption", from_party), ("encryption", to_party)
    out = [factor_certificate(s, keys[e_to], keys[e_from], points[e_from], points[e_to])]
    p_from, p_to = ("pseudonym", from_party), ("pseudonym", to_party)
    if mode == Mode.TRANSLATE:
        out.append(factor_certificate(n, keys[p_to], keys[p_from], points[p_from], points[p_to]))
    elif mode == Mode.DEPSEUDONYMISE:
        out.append(factor_certificate(n, Scalar(1), keys[p_from], points[p_from], B))
    return out


def partition_evidence(which: str, party: bytes, triples: Iterable[str],
                       shares: Mapping[str, Scalar], share_points: Mapping[str, GroupElement]
                       ) -> tuple[Scalar, PartitionEvidence]:
    order = _ordered(triples)
    factors = [shares[t] for t in order]
    pts = [share_points[t] for t in order]
    product, chain = product_prove(factors, pts, TAG_PRODUCT)
    acc = Scalar(1)
    for f in factors:
        acc = acc * f
    return acc, PartitionEvidence(which, party, order, tuple(pts), product, chain)


class KeyDirectory:
    """Verified per-triple key points ``share * B``, keyed by (which, party, triple).

    ``tables`` are the agreed public powers tables.  ``fetch`` is asked for a
    :class:`KeyProof` when a point is missing; ``local`` may compute the point
    directly (for triples whose secrets the holder knows).
    """

    def __init__(self, tables: Mapping[str, PowersTables],
                 fetch: Callable[[str, bytes, str], KeyProof] | None = None,
                 local: Callable[[str, bytes, str], GroupElement | None] | None = None) -> None:
        self.tables = dict(tables)
        self._fetch = fetch
        self._local = local
        self._points: dict[tuple[str, bytes, str], GroupElement] = {}
        # verified partition products and factor certificates; both are
        # deterministic statements, so one check suffices
        self.partitions: dict[tuple[str, bytes, tuple[str, ...]], GroupElement] = {}
        self.factor_certs: set[bytes] = set()

    def add_proof(self, kp: KeyProof) -> bool:
        key = (kp.which, kp.party, kp.triple)
        if key in self._points:
            return self._points[key] == kp.point
        table = self.tables[kp.triple].table(kp.which)
        if not derivation_verify(table, hash_id(kp.party), kp.point, kp.proof):
            return False
        self._points[key] = kp.point
        return True

    def point(self, which: str, party: bytes, triple: str) -> GroupElement:
        key = (which, party, triple)
        if key in self._points:
            return self._points[key]
        if self._local is not None:
            pt = self._local(which, party, triple)
            if pt is not None:
                self._points[key] = pt
                return pt
        if self._fetch is None:
            raise EvidenceError(f"no proven {which} key point for {triple}")
        kp = self._fetch(which, party, triple)
        if (kp.which, kp.party, kp.triple) != key or not self.add_proof(kp):
            raise EvidenceError(f"derivation proof for {which} key of {triple} rejected")
        return kp.point

    def known(self, which: str, party: bytes, triple: str) -> bool:
        return (which, party, triple) in self._points


def verify_step(directory: KeyDirectory, mode: Mode, from_party: bytes, to_party: bytes,
                triples: Iterable[str], c_in: Cyphertext, c_out: Cyphertext,
                proof: StepProof) -> bool:
    """Accept iff ``proof`` shows ``c_out`` is the correct step applied to ``c_in``."""
    order = _ordered(triples)
    if not order:
        return False
    partition: dict[tuple[str, bytes], GroupElement] = {}
    by_key = {(e.which, e.party): e for e in proof.evidence}
    try:
        for key in needed_keys(mode, from_party, to_party):
            ev = by_key.get(key)
            if ev is None or ev.triples != order:
                return False
            cached = directory.partitions.get((key[0], key[1], order))
            if cached is not None:
                if ev.product != cached:
                    return False
                partition[key] = cached
                continue
            expected = [directory.point(key[0], key[1], t) for t in order]
            if list(ev.points) != expected:
                return False
            if not product_verify(expected, ev.product, ev.chain, TAG_PRODUCT):
                return False
            partition[key] = ev.product
            directory.partitions[key[0], key[1], order] = ev.product
    except EvidenceError:
        return False
    e_from, e_to = partition["encryption", from_party], partition["encryption", to_party]
    s_claim = Ratio(e_to, e_from)
    if mode == Mode.TRANSLATE:
        n_claim = Ratio(partition["pseudonym", to_party], partition["pseudonym", from_party])
    elif mode == Mode.PSEUDONYMISE:
        n_claim = partition["pseudonym", to_party]
    else:
        n_claim = Ratio(B, partition["pseudonym", from_party])
    return rsk_verify(c_in, c_out, s_claim, n_claim, proof.cert, directory.factor_certs)


__all__ = [
    "EvidenceError", "KeyDirectory", "TRIPLES", "composite_certificates", "needed_keys",
    "partition_evidence", "step_factors", "verify_step",
]
