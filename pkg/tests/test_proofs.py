import pytest

from pep3.elgamal import encrypt, rsk
from pep3.group import B, GroupElement, Scalar
from pep3.proofs import (
    TAG_DH, CertifiedTriplet, DHCertificate, InconsistentInput, ProductProof, ProofFormatError,
    RSKCertificate, Ratio, Signature, certify, derivation_prove, derivation_verify, dh_prove,
    dh_verify, exponent_bits, factor_certificate, powers_table, product_prove, product_verify,
    rsk_prove, rsk_verify, sign, verify_signature,
)


def rnd() -> Scalar:
    return Scalar.random(nonzero=True)


def _bump(x):
    return x + Scalar(1) if isinstance(x, Scalar) else x + B


# -- DH certificates ----------------------------------------------------------------------

def test_dh_honest():
    a = rnd()
    M = GroupElement.random()
    N, cert = dh_prove(a, None, M)
    assert N == a * M
    assert dh_verify((a * B, M, N), cert)


@pytest.mark.parametrize("field", ["A", "M", "N", "R_M", "R_B", "s"])
def test_dh_single_field_mutation(field):
    a = rnd()
    M = GroupElement.random()
    N, cert = dh_prove(a, None, M)
    triplet = {"A": a * B, "M": M, "N": N}
    if field in triplet:
        triplet[field] = _bump(triplet[field])
    else:
        cert = DHCertificate(**{**cert.__dict__, field: _bump(getattr(cert, field))})
    assert not dh_verify((triplet["A"], triplet["M"], triplet["N"]), cert)


def test_dh_tag_separates_domains():
    a = rnd()
    M = GroupElement.random()
    N, cert = dh_prove(a, None, M, tag=b"one")
    assert dh_verify((a * B, M, N), cert, b"one")
    assert not dh_verify((a * B, M, N), cert, b"two")


def test_forgery_on_non_dh_triplet():
    a = rnd()
    M = GroupElement.random()
    N = GroupElement.random()  # not a*M
    # an honest prover run with the wrong claim
    _, cert = dh_prove(a, None, M, N=N)
    assert not dh_verify((a * B, M, N), cert)
    # simulator: pick the response and the challenge first
    s, h = rnd(), rnd()
    A = a * B
    cert = DHCertificate(s * M - h * N, GroupElement.base_mul(s) - h * A, s)
    assert not dh_verify((A, M, N), cert)


def test_dh_certificate_encoding():
    a = rnd()
    ct = certify(a, None, GroupElement.random())
    assert CertifiedTriplet.from_bytes(ct.to_bytes()) == ct
    assert DHCertificate.from_bytes(ct.cert.to_bytes()) == ct.cert
    with pytest.raises(ProofFormatError):
        CertifiedTriplet.from_bytes(ct.to_bytes()[:-1])


# -- RSK certificates ---------------------------------------------------------------------

def _rsk_case():
    k = rnd()
    c = encrypt(GroupElement.random(), k * B)
    s, n, r = rnd(), rnd(), rnd()
    out = rsk(c, s, n, r)
    return c, out, s, n, r


def test_rsk_honest():
    c, out, s, n, r = _rsk_case()
    cert = rsk_prove(c, out, s, n, r)
    assert rsk_verify(c, out, s * B, n * B, cert)
    assert RSKCertificate.from_bytes(cert.to_bytes()) == cert


def test_rsk_refuses_false_statement():
    c, out, s, n, r = _rsk_case()
    with pytest.raises(InconsistentInput):
        rsk_prove(c, out, s, n * Scalar(2), r)


def test_rsk_wrong_expected_factor():
    c, out, s, n, r = _rsk_case()
    cert = rsk_prove(c, out, s, n, r)
    assert not rsk_verify(c, out, s * B, (n + Scalar(1)) * B, cert)
    assert not rsk_verify(c, out, (s + Scalar(1)) * B, n * B, cert)


@pytest.mark.parametrize("part", ["blinding", "core", "target"])
def test_rsk_rejects_altered_output(part):
    c, out, s, n, r = _rsk_case()
    cert = rsk_prove(c, out, s, n, r)
    bad = out.__class__(**{**out.__dict__, part: getattr(out, part) + B})
    assert not rsk_verify(c, bad, s * B, n * B, cert)


@pytest.mark.parametrize("field", ["sB", "nB", "nsB", "rB", "r_tau"])
def test_rsk_rejects_mutated_header(field):
    c, out, s, n, r = _rsk_case()
    cert = rsk_prove(c, out, s, n, r)
    bad = RSKCertificate(**{**cert.__dict__, field: getattr(cert, field) + B})
    assert not rsk_verify(c, out, s * B, n * B, bad)


def test_rsk_rejects_mutated_triplet():
    c, out, s, n, r = _rsk_case()
    cert = rsk_prove(c, out, s, n, r)
    for i in range(5):
        t = cert.triplets[i]
        bad_ct = CertifiedTriplet(t.A, t.M, t.N, DHCertificate(t.cert.R_M, t.cert.R_B,
                                                                t.cert.s + Scalar(1)))
        triplets = cert.triplets[:i] + (bad_ct,) + cert.triplets[i + 1:]
        assert not rsk_verify(c, out, s * B, n * B, RSKCertificate(
            cert.sB, cert.nB, cert.nsB, cert.rB, cert.r_tau, triplets, cert.composites))


def test_rsk_with_ratio_claims():
    c, _, _, _, r = _rsk_case()
    num, den = rnd(), rnd()
    s = num * den.invert()
    n = rnd()
    out = rsk(c, s, n, r)
    comp = factor_certificate(s, num, den)
    cert = rsk_prove(c, out, s, n, r, [comp])
    claim = Ratio(num * B, den * B)
    assert rsk_verify(c, out, claim, n * B, cert)
    known: set[bytes] = set()
    assert rsk_verify(c, out, claim, n * B, cert, known)
    assert comp.to_bytes() in known
    # claim for another ratio has no matching composite
    assert not rsk_verify(c, out, Ratio(num * B, (den + Scalar(1)) * B), n * B, cert)
    # a composite that does not verify is refused
    bogus = CertifiedTriplet(comp.A, comp.M, comp.N,
                             DHCertificate(comp.cert.R_M, comp.cert.R_B, comp.cert.s + Scalar(1)))
    cert2 = RSKCertificate(cert.sB, cert.nB, cert.nsB, cert.rB, cert.r_tau, cert.triplets,
                           (bogus,))
    assert not rsk_verify(c, out, claim, n * B, cert2)
    assert not rsk_verify(c, out, claim, n * B, cert2, set())


def test_factor_certificate_refuses_wrong_ratio():
    with pytest.raises(InconsistentInput):
        factor_certificate(Scalar(2), Scalar(3), Scalar(5))


# -- product chains and derivation ---------------------------------------------------------

def test_product_chain():
    factors = [rnd() for _ in range(5)]
    points = [f * B for f in factors]
    product, proof = product_prove(factors)
    expected = Scalar(1)
    for f in factors:
        expected = expected * f
    assert product == expected * B
    assert product_verify(points, product, proof)
    assert ProductProof.from_bytes(proof.to_bytes()) == proof
    assert not product_verify(points, product + B, proof)
    assert not product_verify(points[::-1], product, proof)
    assert not product_verify(points[:-1], product, proof)


def test_powers_table():
    m = rnd()
    table = powers_table(m, size=8)
    for i, X in enumerate(table):
        assert X == (m ** (1 << i)) * B


@pytest.mark.parametrize("exponent", [1, 2, 5, 2**100 + 7, 2**252 - 1])
def test_derivation_proof(exponent):
    m = rnd()
    table = powers_table(m)
    point, proof = derivation_prove(m, table, exponent)
    assert point == (m ** exponent) * B
    assert len(proof.chain) == len(exponent_bits(exponent)) - 1
    assert derivation_verify(table, exponent, point, proof)
    assert not derivation_verify(table, exponent + 1, point, proof)
    assert not derivation_verify(table, exponent, point + B, proof)


def test_derivation_against_other_table():
    m, other = rnd(), rnd()
    point, proof = derivation_prove(m, powers_table(m), 12345)
    assert not derivation_verify(powers_table(other), 12345, point, proof)


def test_derivation_bounds():
    m = rnd()
    table = powers_table(m, size=4)
    with pytest.raises(ValueError):
        derivation_prove(m, table, 0)
    with pytest.raises(ValueError):
        derivation_prove(m, table, 1 << 4)
    assert not derivation_verify(table, 0, B, ProductProof(()))


# -- signatures ----------------------------------------------------------------------------

def test_signatures():
    k = rnd()
    sig = sign(k, b"message")
    assert verify_signature(k * B, b"message", sig)
    assert Signature.from_bytes(sig.to_bytes()) == sig
    assert not verify_signature(k * B, b"massage", sig)
    assert not verify_signature(rnd() * B, b"message", sig)
    assert not verify_signature(k * B, b"message", Signature(sig.R, sig.s + Scalar(1)))


def test_tags_are_distinct():
    from pep3 import proofs
    tags = [getattr(proofs, n) for n in dir(proofs) if n.startswith("TAG_")]
    assert len(set(tags)) == len(tags)
    assert TAG_DH in tags
