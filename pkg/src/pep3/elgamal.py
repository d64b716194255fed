"""ElGamal triples and the rekey / reshuffle / rerandomise operations."""
from __future__ import annotations

from dataclasses import dataclass

from pep3.group import B, GroupElement, GroupError, Scalar

CYPHERTEXT_SIZE = 96


class ZeroKeyError(ValueError):
    pass


@dataclass(frozen=True)
class Cyphertext:
    blinding: GroupElement
    core: GroupElement
    target: GroupElement

    def to_bytes(self) -> bytes:
        return self.blinding.to_bytes() + self.core.to_bytes() + self.target.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> Cyphertext:
        if len(data) != CYPHERTEXT_SIZE:
            raise GroupError("cyphertext encoding must be 96 bytes")
        return cls(
            GroupElement(data[:32]), GroupElement(data[32:64]), GroupElement(data[64:])
        )


def encrypt(M: GroupElement, target: GroupElement, r: Scalar | None = None) -> Cyphertext:
    """Encrypt ``M`` for the public key ``target``; ``r`` is drawn when omitted."""
    if r is None:
        r = Scalar.random(nonzero=True)
    return Cyphertext(GroupElement.base_mul(r), M + r * target, target)


def decrypt(c: Cyphertext, s: Scalar) -> GroupElement:
    return c.core - s * c.blinding


def _nonzero(k: Scalar, what: str) -> None:
    if not k:
        raise ZeroKeyError(f"{what} must be nonzero")


def rekey(c: Cyphertext, s: Scalar) -> Cyphertext:
    _nonzero(s, "rekey factor")
    return Cyphertext(s.invert() * c.blinding, c.core, s * c.target)


def reshuffle(c: Cyphertext, n: Scalar) -> Cyphertext:
    _nonzero(n, "reshuffle factor")
    return Cyphertext(n * c.blinding, n * c.core, c.target)


def rerandomise(c: Cyphertext, r: Scalar) -> Cyphertext:
    return Cyphertext(c.blinding + GroupElement.base_mul(r), c.core + r * c.target, c.target)


def rsk(c: Cyphertext, s: Scalar, n: Scalar, r: Scalar,
        target_out: GroupElement | None = None) -> Cyphertext:
    """Rekey by ``s``, reshuffle by ``n`` and rerandomise by ``r`` in one pass.

    Costs four general scalar multiplications and one base multiplication.
    When the resulting target is already known (e.g. the storage facility's
    public key) pass it as ``target_out`` to skip the multiplication ``s*tau``;
    it is the caller's responsibility that it equals ``s*tau``.
    """
    _nonzero(s, "rekey factor")
    _nonzero(n, "reshuffle factor")
    blinding = (n * s.invert()) * (c.blinding + GroupElement.base_mul(r))
    core = n * (c.core + r * c.target)
    target = s * c.target if target_out is None else target_out
    return Cyphertext(blinding, core, target)


def translate(c: Cyphertext, src: tuple[Scalar, Scalar], dst: tuple[Scalar, Scalar],
              r: Scalar) -> Cyphertext:
    """Turn an encrypted pseudonym for ``src = (s_P, n_P)`` into one for ``dst``."""
    (s_p, n_p), (s_q, n_q) = src, dst
    for k in (s_p, n_p, s_q, n_q):
        _nonzero(k, "party key")
    return rsk(c, s_q * s_p.invert(), n_q * n_p.invert(), r)


def pseudonymise(c: Cyphertext, s_src: Scalar, dst: tuple[Scalar, Scalar],
                 r: Scalar) -> Cyphertext:
    """Encrypted plain address for ``s_src`` to encrypted pseudonym for ``dst``."""
    s_q, n_q = dst
    _nonzero(s_src, "party key")
    return rsk(c, s_q * s_src.invert(), n_q, r)


def depseudonymise(c: Cyphertext, src: tuple[Scalar, Scalar], s_dst: Scalar,
                   r: Scalar) -> Cyphertext:
    """Encrypted pseudonym for ``src`` to encrypted plain address for ``s_dst``."""
    s_p, n_p = src
    _nonzero(s_p, "party key")
    _nonzero(n_p, "party key")
    return rsk(c, s_dst * s_p.invert(), n_p.invert(), r)


def public_key(s: Scalar) -> GroupElement:
    return GroupElement.base_mul(s)


__all__ = [
    "B", "CYPHERTEXT_SIZE", "Cyphertext", "ZeroKeyError", "decrypt", "depseudonymise",
    "encrypt", "pseudonymise", "public_key", "rekey", "rerandomise", "reshuffle", "rsk",
    "translate",
]
