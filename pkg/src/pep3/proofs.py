"""Non-interactive Schnorr-type certificates.

The building block is a certified Diffie-Hellman triplet: a prover knowing
``a`` with ``A = aB`` shows that ``N = aM`` without revealing ``a``.  On top of
it sit certificates for the fused rekey/reshuffle/rerandomise operation,
product chains (used for key derivation from a table of squarings and for
assembling partition factors) and Schnorr signatures for permits.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from pep3.elgamal import Cyphertext, rsk
from pep3.group import B, GroupElement, GroupError, Scalar, hash_to_scalar

TAG_DH = b"pep3-dh-cert"
TAG_RSK = b"pep3-rsk"
TAG_FACTOR = b"pep3-factor"
TAG_DERIVE = b"pep3-derive"
TAG_PRODUCT = b"pep3-product"
TAG_SIGN = b"pep3-sign"


class InconsistentInput(ValueError):
    """The prover was asked to certify something that is not true."""


class ProofFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DHCertificate:
    R_M: GroupElement
    R_B: GroupElement
    s: Scalar

    SIZE = 96

    def to_bytes(self) -> bytes:
        return self.R_M.to_bytes() + self.R_B.to_bytes() + self.s.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> DHCertificate:
        if len(data) != 96:
            raise ProofFormatError("DH certificate must be 96 bytes")
        return cls(GroupElement(data[:32]), GroupElement(data[32:64]), Scalar.from_bytes(data[64:]))


@dataclass(frozen=True)
class CertifiedTriplet:
    A: GroupElement
    M: GroupElement
    N: GroupElement
    cert: DHCertificate

    SIZE = 192

    @property
    def triplet(self) -> tuple[GroupElement, GroupElement, GroupElement]:
        return self.A, self.M, self.N

    def verify(self, tag: bytes = TAG_DH) -> bool:
        return dh_verify(self.triplet, self.cert, tag)

    def to_bytes(self) -> bytes:
        return self.A.to_bytes() + self.M.to_bytes() + self.N.to_bytes() + self.cert.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> CertifiedTriplet:
        if len(data) != 192:
            raise ProofFormatError("certified triplet must be 192 bytes")
        return cls(GroupElement(data[:32]), GroupElement(data[32:64]), GroupElement(data[64:96]),
                   DHCertificate.from_bytes(data[96:]))


def _challenge(tag: bytes, A, M, N, R_M, R_B) -> Scalar:
    return hash_to_scalar(tag, (A, M, N, R_M, R_B))


def dh_prove(a: Scalar, A: GroupElement | None, M: GroupElement, tag: bytes = TAG_DH,
             r: Scalar | None = None, N: GroupElement | None = None
             ) -> tuple[GroupElement, DHCertificate]:
    """Certify ``(aB, M, aM)``; returns ``N = aM`` and the certificate.

    ``A`` and ``N`` may be passed when the caller already has them, saving
    multiplications; they are trusted to equal ``aB`` and ``aM``.
    """
    if A is None:
        A = GroupElement.base_mul(a)
    if N is None:
        N = a * M
    if r is None:
        r = Scalar.random()
    R_B = GroupElement.base_mul(r)
    R_M = r * M
    h = _challenge(tag, A, M, N, R_M, R_B)
    return N, DHCertificate(R_M, R_B, r + h * a)


def certify(a: Scalar, A: GroupElement | None, M: GroupElement, tag: bytes = TAG_DH,
            N: GroupElement | None = None) -> CertifiedTriplet:
    if A is None:
        A = GroupElement.base_mul(a)
    N, cert = dh_prove(a, A, M, tag, N=N)
    return CertifiedTriplet(A, M, N, cert)


def dh_verify(triplet: tuple[GroupElement, GroupElement, GroupElement], cert: DHCertificate,
              tag: bytes = TAG_DH) -> bool:
    """Check ``sB = R_B + hA`` and ``sM = R_M + hN``."""
    A, M, N = triplet
    h = _challenge(tag, A, M, N, cert.R_M, cert.R_B)
    if GroupElement.base_mul(cert.s) != cert.R_B + h * A:
        return False
    return cert.s * M == cert.R_M + h * N


# -- fused rekey/reshuffle/rerandomise -------------------------------------------------

@dataclass(frozen=True)
class Ratio:
    """Claim that a factor equals ``numerator / denominator`` (as scalars)."""

    numerator: GroupElement
    denominator: GroupElement


@dataclass(frozen=True)
class RSKCertificate:
    sB: GroupElement
    nB: GroupElement
    nsB: GroupElement
    rB: GroupElement
    r_tau: GroupElement
    triplets: tuple[CertifiedTriplet, ...]
    composites: tuple[CertifiedTriplet, ...] = field(default=())

    def to_bytes(self) -> bytes:
        head = b"".join(x.to_bytes() for x in (self.sB, self.nB, self.nsB, self.rB, self.r_tau))
        body = b"".join(t.to_bytes() for t in self.triplets)
        tail = struct.pack(">H", len(self.composites)) + b"".join(
            t.to_bytes() for t in self.composites)
        return head + body + tail

    @classmethod
    def from_bytes(cls, data: bytes) -> RSKCertificate:
        if len(data) < 160 + 5 * 192 + 2:
            raise ProofFormatError("RSK certificate truncated")
        pts = [GroupElement(data[i:i + 32]) for i in range(0, 160, 32)]
        triplets = tuple(CertifiedTriplet.from_bytes(data[160 + 192 * i:352 + 192 * i])
                         for i in range(5))
        off = 160 + 5 * 192
        (count,) = struct.unpack(">H", data[off:off + 2])
        off += 2
        if len(data) != off + 192 * count:
            raise ProofFormatError("RSK certificate length mismatch")
        composites = tuple(CertifiedTriplet.from_bytes(data[off + 192 * i:off + 192 * (i + 1)])
                           for i in range(count))
        return cls(*pts, triplets=triplets, composites=composites)


def _rsk_triplets(c_in: Cyphertext, c_out: Cyphertext, sB, nB, nsB, rB, r_tau):
    return [
        (nsB, c_in.blinding + rB, c_out.blinding),
        (nB, c_in.core + r_tau, c_out.core),
        (sB, c_in.target, c_out.target),
        (sB, nsB, nB),
        (rB, c_in.target, r_tau),
    ]


def rsk_prove(c_in: Cyphertext, c_out: Cyphertext, s: Scalar, n: Scalar, r: Scalar,
              composites: Iterable[CertifiedTriplet] = ()) -> RSKCertificate:
    """Certify that ``c_out = rsk(c_in, s, n, r)``."""
    if not s or not n:
        raise InconsistentInput("zero rekey or reshuffle factor")
    if rsk(c_in, s, n, r) != c_out:
        raise InconsistentInput("output is not rsk(input)")
    ns = n * s.invert()
    sB, nB, nsB, rB = (GroupElement.base_mul(k) for k in (s, n, ns, r))
    r_tau = r * c_in.target
    scalars = (ns, n, s, s, r)
    triplets = []
    for a, (A, M, N) in zip(scalars, _rsk_triplets(c_in, c_out, sB, nB, nsB, rB, r_tau)):
        _, cert = dh_prove(a, A, M, TAG_RSK, N=N)
        triplets.append(CertifiedTriplet(A, M, N, cert))
    return RSKCertificate(sB, nB, nsB, rB, r_tau, tuple(triplets), tuple(composites))


def factor_certificate(factor: Scalar, numerator_key: Scalar, denominator_key: Scalar,
                       denominator_point: GroupElement | None = None,
                       numerator_point: GroupElement | None = None) -> CertifiedTriplet:
    """Certify ``(factor*B, den*B, num*B)`` where ``factor * den = num``."""
    if factor * denominator_key != numerator_key:
        raise InconsistentInput("factor is not numerator/denominator")
    if denominator_point is None:
        denominator_point = GroupElement.base_mul(denominator_key)
    return certify(factor, None, denominator_point, TAG_FACTOR, N=numerator_point)


def _check_claim(point: GroupElement, expected, composites: Sequence[CertifiedTriplet],
                 known: set[bytes] | None) -> bool:
    if isinstance(expected, GroupElement):
        return point == expected
    if isinstance(expected, Ratio):
        for ct in composites:
            if (ct.A == point and ct.M == expected.denominator
                    and ct.N == expected.numerator):
                if known is None:
                    return ct.verify(TAG_FACTOR)
                enc = ct.to_bytes()
                if enc in known:
                    return True
                if ct.verify(TAG_FACTOR):
                    known.add(enc)
                    return True
                return False
        return False
    raise TypeError(f"unsupported factor claim {expected!r}")


def rsk_verify(c_in: Cyphertext, c_out: Cyphertext, expected_sB, expected_nB,
               cert: RSKCertificate, known: set[bytes] | None = None) -> bool:
    """Accept iff ``cert`` proves ``c_out = rsk(c_in, s, n, r)`` for the expected factors.

    ``expected_sB`` / ``expected_nB`` are either the factor's public point or a
    :class:`Ratio` whose composite certificate must be carried in ``cert``.
    Composite certificates found in ``known`` (encodings verified before) are
    not checked again; newly verified ones are added to it.
    """
    if len(cert.triplets) != 5:
        return False
    if not _check_claim(cert.sB, expected_sB, cert.composites, known):
        return False
    if not _check_claim(cert.nB, expected_nB, cert.composites, known):
        return False
    stated = _rsk_triplets(c_in, c_out, cert.sB, cert.nB, cert.nsB, cert.rB, cert.r_tau)
    for ct, triplet in zip(cert.triplets, stated):
        if ct.triplet != tuple(triplet):
            return False
        if not dh_verify(triplet, ct.cert, TAG_RSK):
            return False
    return True


# -- product chains and key derivation -------------------------------------------------

@dataclass(frozen=True)
class ProductProof:
    """Chain of certified triplets multiplying public points together."""

    chain: tuple[CertifiedTriplet, ...]

    def to_bytes(self) -> bytes:
        return struct.pack(">H", len(self.chain)) + b"".join(t.to_bytes() for t in self.chain)

    @classmethod
    def from_bytes(cls, data: bytes) -> ProductProof:
        if len(data) < 2:
            raise ProofFormatError("chain truncated")
        (count,) = struct.unpack(">H", data[:2])
        if len(data) != 2 + 192 * count:
            raise ProofFormatError("chain length mismatch")
        return cls(tuple(CertifiedTriplet.from_bytes(data[2 + 192 * i:194 + 192 * i])
                         for i in range(count)))


DerivationProof = ProductProof


def product_prove(factors: Sequence[Scalar], points: Sequence[GroupElement] | None = None,
                  tag: bytes = TAG_PRODUCT) -> tuple[GroupElement, ProductProof]:
    """Prove ``(a_1 ... a_k) B`` from the points ``a_i B``.

    Returns the product point and a chain of ``k - 1`` certified triplets
    ``(A_j, a_{j+1} B, A_{j+1})`` with ``A_j`` the running product.
    """
    if not factors:
        raise ValueError("empty product")
    if points is None:
        points = [GroupElement.base_mul(a) for a in factors]
    acc = factors[0]
    acc_point = points[0]
    chain = []
    for a, point in zip(factors[1:], points[1:]):
        ct = certify(acc, acc_point, point, tag)
        chain.append(ct)
        acc = acc * a
        acc_point = ct.N
    return acc_point, ProductProof(tuple(chain))


def product_verify(points: Sequence[GroupElement], claimed: GroupElement, proof: ProductProof,
                   tag: bytes = TAG_PRODUCT) -> bool:
    if not points or len(proof.chain) != len(points) - 1:
        return False
    acc = points[0]
    for ct, point in zip(proof.chain, points[1:]):
        if ct.A != acc or ct.M != point:
            return False
        if not ct.verify(tag):
            return False
        acc = ct.N
    return acc == claimed


def exponent_bits(exponent: int) -> list[int]:
    return [i for i in range(exponent.bit_length()) if exponent >> i & 1]


def powers_table(master: Scalar, size: int = 253) -> list[GroupElement]:
    """``[(master^(2^i)) B for i in range(size)]``."""
    table = []
    m = master
    for _ in range(size):
        table.append(GroupElement.base_mul(m))
        m = m * m
    return table


def derivation_prove(master: Scalar, powers: Sequence[GroupElement], exponent: int
                     ) -> tuple[GroupElement, DerivationProof]:
    """Prove ``master^exponent * B`` from the published table of squarings."""
    if exponent <= 0:
        raise ValueError("derivation exponent must be nonzero")
    bits = exponent_bits(exponent)
    if bits[-1] >= len(powers):
        raise ValueError("exponent exceeds the powers table")
    factors = [master ** (1 << i) for i in bits]
    return product_prove(factors, [powers[i] for i in bits], TAG_DERIVE)


def derivation_verify(powers: Sequence[GroupElement], exponent: int, claimed_key: GroupElement,
                      proof: DerivationProof) -> bool:
    if exponent <= 0:
        return False
    bits = exponent_bits(exponent)
    if bits[-1] >= len(powers):
        return False
    return product_verify([powers[i] for i in bits], claimed_key, proof, TAG_DERIVE)


# -- Schnorr signatures ------------------------------------------------------------------

@dataclass(frozen=True)
class Signature:
    R: GroupElement
    s: Scalar

    def to_bytes(self) -> bytes:
        return self.R.to_bytes() + self.s.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> Signature:
        if len(data) != 64:
            raise ProofFormatError("signature must be 64 bytes")
        return cls(GroupElement(data[:32]), Scalar.from_bytes(data[32:]))


def sign(secret: Scalar, message: bytes, public: GroupElement | None = None) -> Signature:
    if public is None:
        public = GroupElement.base_mul(secret)
    k = Scalar.random(nonzero=True)
    R = GroupElement.base_mul(k)
    e = hash_to_scalar(TAG_SIGN, (R, public), message)
    return Signature(R, k + e * secret)


def verify_signature(public: GroupElement, message: bytes, sig: Signature) -> bool:
    try:
        e = hash_to_scalar(TAG_SIGN, (sig.R, public), message)
        return GroupElement.base_mul(sig.s) == sig.R + e * public
    except GroupError:
        return False


__all__ = [
    "B", "CertifiedTriplet", "DHCertificate", "DerivationProof", "InconsistentInput",
    "ProductProof", "RSKCertificate", "Ratio", "Signature", "certify", "derivation_prove",
    "derivation_verify", "dh_prove", "dh_verify", "factor_certificate", "powers_table",
    "product_prove", "product_verify", "rsk_prove", "rsk_verify", "sign", "verify_signature",
]
