import random
import time
from dataclasses import replace

import pytest

from pep3.adversary import AdversaryScript, build_peer
from pep3.client import TranscryptorClient, VerificationFailure
from pep3.elgamal import decrypt, encrypt
from pep3.group import B, Scalar
from pep3.keyshares import PEERS, TRIPLES, MasterSecrets, partition_triples
from pep3.lizard import decode_ip, encode_ip
from pep3.messages import Mode, ProofRequest, TranscryptRequest, request_hash
from pep3.peer import Peer
from pep3.transport import InProcessTransport
from pep3.wire import ErrorCode, ProtocolError, Tag, expect, frame

MP, SF, INV = b"mp", b"sf", b"investigator"


class Env:
    def __init__(self, masters, ca, publics):
        self.masters, self.ca, self.publics = masters, ca, publics
        self.peers = {p: Peer(masters[p], ca.public, publics) for p in PEERS}
        self.keys = {}
        for pid in (MP, SF, INV):
            self.keys[pid] = self.client(pid, 0.0).enrol().key
        self.tables = dict(masters["A"].tables)

    def client(self, pid, sampling=1.0, services=None, **kw):
        c = TranscryptorClient(InProcessTransport(services or self.peers, pid),
                               sampling=sampling, rng=random.Random(0), **kw)
        if hasattr(self, "tables"):
            c.set_tables(self.tables)
        return c

    def key(self, which, pid):
        """The full key computed from the masters directly (test oracle)."""
        acc = Scalar(1)
        for t in TRIPLES:
            acc = acc * self.masters[t[0]].share(t, pid, which)
        return acc

    def permit(self, subject, mode, frm, to, c=None, **kw):
        return self.ca.issue(subject, mode, frm, to, c, **kw)


@pytest.fixture(scope="module")
def env(masters, ca, party_publics):
    return Env(masters, ca, party_publics)


def _pseudonymise(env, client, ips, active=None):
    cs = [encrypt(encode_ip(ip), env.keys[MP] * B) for ip in ips]
    permit = env.permit(MP, Mode.PSEUDONYMISE, [MP], [SF])
    return client.transcrypt(Mode.PSEUDONYMISE, MP, SF, cs, permit, active)


def test_enrolled_key_matches_masters(env):
    for pid in (MP, SF, INV):
        assert env.keys[pid] == env.key("encryption", pid)


@pytest.mark.parametrize("active", ["ACD", "ABC", "BDE", "CDE"])
def test_pseudonymise_matches_oracle(env, active):
    client = env.client(MP, sampling=1.0)
    out = _pseudonymise(env, client, ["192.0.2.7", "2001:db8::5"], active)
    n_sf = env.key("pseudonym", SF)
    for ip, c in zip(["192.0.2.7", "2001:db8::5"], out):
        assert c.target == env.keys[SF] * B
        assert decrypt(c, env.keys[SF]) == n_sf * encode_ip(ip)
    assert client.stats.verified == 6 and not client.stats.failures


def test_fixed_target_final_hop(env):
    client = env.client(MP, sampling=1.0)
    cs = [encrypt(encode_ip("10.1.1.1"), env.keys[MP] * B)]
    permit = env.permit(MP, Mode.PSEUDONYMISE, [MP], [SF])
    out = client.transcrypt(Mode.PSEUDONYMISE, MP, SF, cs, permit, target_out=env.keys[SF] * B)
    assert decrypt(out[0], env.keys[SF]) == env.key("pseudonym", SF) * encode_ip("10.1.1.1")


def test_wrong_target_out_is_caught(env):
    client = env.client(MP, sampling=1.0)
    cs = [encrypt(encode_ip("10.1.1.2"), env.keys[MP] * B)]
    permit = env.permit(MP, Mode.PSEUDONYMISE, [MP], [SF])
    with pytest.raises(VerificationFailure):
        client.transcrypt(Mode.PSEUDONYMISE, MP, SF, cs, permit, target_out=B)


def _request(env, sender=MP, mode=Mode.PSEUDONYMISE, triples=None, permit=None, cs=None,
             frm=MP, to=SF, peer="A"):
    cs = cs or (encrypt(encode_ip("10.0.0.1"), env.keys[MP] * B),)
    permit = permit or env.permit(sender, mode, [frm], [to])
    triples = triples or partition_triples("ACD")[peer]
    return TranscryptRequest(mode, frm, to, frozenset(triples), tuple(cs), permit)


def _call(env, peer, req, sender=MP):
    return expect(env.peers[peer].handle(frame(Tag.TRANSCRYPT, req.to_bytes()), sender),
                  Tag.TRANSCRYPT_OK)


def _code(fn):
    with pytest.raises(ProtocolError) as info:
        fn()
    return info.value.code


def test_not_my_triples(env):
    req = _request(env, triples={"BCD"}, peer="A")
    assert _code(lambda: _call(env, "A", req)) == ErrorCode.NOT_MY_TRIPLES


@pytest.mark.parametrize("problem", ["subject", "expired", "operation", "parties", "signature"])
def test_permit_checks(env, problem):
    good = env.permit(MP, Mode.PSEUDONYMISE, [MP], [SF])
    permit = {
        "subject": env.permit(b"researcher-1", Mode.PSEUDONYMISE, [MP], [SF]),
        "expired": env.permit(MP, Mode.PSEUDONYMISE, [MP], [SF], now=time.time() - 7200),
        "operation": env.permit(MP, Mode.TRANSLATE, [MP], [SF]),
        "parties": env.permit(MP, Mode.PSEUDONYMISE, [MP], [b"researcher-1"]),
        "signature": replace(good, to_set=(SF, b"researcher-1")),
    }[problem]
    req = _request(env, permit=permit)
    assert _code(lambda: _call(env, "A", req)) == ErrorCode.PERMIT_INVALID


def test_blanket_depseudonymisation_refused(env):
    c = encrypt(encode_ip("10.0.0.9"), env.keys[SF] * B)
    blanket = env.permit(INV, Mode.DEPSEUDONYMISE, [SF], [INV])
    req = _request(env, sender=INV, mode=Mode.DEPSEUDONYMISE, permit=blanket, cs=(c,), frm=SF,
                   to=INV)
    assert _code(lambda: _call(env, "A", req, INV)) == ErrorCode.PERMIT_INVALID


def _stored_cyphertext(env, ip):
    """An encrypted SF pseudonym, as the facility would hand out."""
    pseudo = env.key("pseudonym", SF) * encode_ip(ip)
    return encrypt(pseudo, env.keys[SF] * B)


def test_depseudonymise_under_warrant(env):
    c = _stored_cyphertext(env, "198.51.100.23")
    warrant = env.permit(INV, Mode.DEPSEUDONYMISE, [SF], [INV], c)
    client = env.client(INV, sampling=0.0)
    out = client.depseudonymise(c, SF, INV, warrant)
    assert decode_ip(decrypt(out, env.keys[INV])) == "198.51.100.23"
    assert client.stats.verified == 3


@pytest.mark.parametrize("active", ["ABC", "BDE"])
def test_depseudonymise_other_subsets(env, active):
    c = _stored_cyphertext(env, "198.51.100.24")
    warrant = env.permit(INV, Mode.DEPSEUDONYMISE, [SF], [INV], c)
    out = env.client(INV).depseudonymise(c, SF, INV, warrant, active)
    assert decode_ip(decrypt(out, env.keys[INV])) == "198.51.100.24"


def test_substituted_cyphertext_is_chain_invalid(env):
    c = _stored_cyphertext(env, "198.51.100.25")
    other = _stored_cyphertext(env, "198.51.100.26")
    warrant = env.permit(INV, Mode.DEPSEUDONYMISE, [SF], [INV], c)
    # the first peer checks the input against the warrant directly
    req = _request(env, sender=INV, mode=Mode.DEPSEUDONYMISE, permit=warrant, cs=(other,),
                   frm=SF, to=INV)
    assert _code(lambda: _call(env, "A", req, INV)) == ErrorCode.CHAIN_INVALID

    # a later peer sees a chain that does not lead to its input
    class Swapping(InProcessTransport):
        def request(self, service, data):
            if service == "C" and data[4] == Tag.TRANSCRYPT:
                req = TranscryptRequest.from_bytes(data[5:])
                swapped = replace(req, cyphertexts=(_stored_cyphertext(env, "1.2.3.4"),))
                data = frame(Tag.TRANSCRYPT, swapped.to_bytes())
            return super().request(service, data)

    client = env.client(INV)
    client.transport = Swapping(env.peers, INV)
    with pytest.raises(ProtocolError) as info:
        client.depseudonymise(c, SF, INV, warrant)
    assert info.value.code == ErrorCode.CHAIN_INVALID


def _one_hop(env):
    req = _request(env)
    payload = req.to_bytes()
    resp = env.peers["A"].handle_transcrypt(req, MP, request_hash(payload))
    return req, request_hash(payload), resp


def _prove(env, peer, preq):
    data = env.peers[peer].handle(frame(Tag.PROOF, preq.to_bytes()), MP)
    return expect(data, Tag.PROOF_OK)


def test_forged_ticket(env):
    req, h, resp = _one_hop(env)
    ticket = bytearray(resp.tickets[0])
    ticket[20] ^= 1
    preq = ProofRequest(h, bytes(ticket), req.cyphertexts[0], resp.cyphertexts[0])
    assert _code(lambda: _prove(env, "A", preq)) == ErrorCode.TICKET_FORGED
    # tickets are bound to the issuing peer
    preq = ProofRequest(h, resp.tickets[0], req.cyphertexts[0], resp.cyphertexts[0])
    assert _code(lambda: _prove(env, "C", preq)) == ErrorCode.TICKET_FORGED


def test_ticket_mismatch(env):
    req, h, resp = _one_hop(env)
    c_in, c_out = req.cyphertexts[0], resp.cyphertexts[0]
    wrong_in = encrypt(encode_ip("10.9.9.9"), env.keys[MP] * B)
    for preq in (ProofRequest(bytes(32), resp.tickets[0], c_in, c_out),
                 ProofRequest(h, resp.tickets[0], wrong_in, c_out),
                 ProofRequest(h, resp.tickets[0], c_in, replace(c_out, core=c_out.core + B))):
        assert _code(lambda: _prove(env, "A", preq)) == ErrorCode.TICKET_MISMATCH


def test_proofs_survive_a_restart(env, ca, party_publics):
    req, h, resp = _one_hop(env)
    # a new process with the same sealed secrets
    reborn = Peer(MasterSecrets.from_bytes(env.masters["A"].to_bytes()), ca.public,
                  party_publics)
    proof = reborn.handle_proof_request(
        ProofRequest(h, resp.tickets[0], req.cyphertexts[0], resp.cyphertexts[0]))
    client = env.client(MP)
    from pep3.evidence import verify_step
    assert verify_step(client.directory, req.mode, MP, SF, req.triples, req.cyphertexts[0],
                       resp.cyphertexts[0], proof)


def test_proof_reveals_no_secrets(env):
    req, h, resp = _one_hop(env)
    data = _prove(env, "A", ProofRequest(h, resp.tickets[0], req.cyphertexts[0],
                                         resp.cyphertexts[0]))
    blob = data + b"".join(resp.tickets)
    secrets = [env.masters["A"].share(t, pid, which).to_bytes()
               for t in env.masters["A"].secrets for pid in (MP, SF)
               for which in ("pseudonym", "encryption")]
    secrets += [v.to_bytes() for pair in env.masters["A"].secrets.values() for v in pair]
    assert not any(s in blob for s in secrets)


def test_unknown_party_cannot_enrol(env):
    data = env.peers["B"].handle(frame(Tag.ENROL, b""), b"stranger")
    assert _code(lambda: expect(data, Tag.ENROL_OK)) == ErrorCode.UNKNOWN_PARTY


def test_derivation_proof_for_foreign_triple(env):
    with pytest.raises(ProtocolError) as info:
        env.peers["A"].handle_derivation_proof_request(MP, "pseudonym", "BCD")
    assert info.value.code == ErrorCode.NOT_MY_TRIPLES


def test_malformed_frames(env):
    for data in (b"", b"\x00\x00\x00\x01", frame(0x55, b""), frame(Tag.TRANSCRYPT, b"\x01")):
        reply = env.peers["A"].handle(data, MP)
        with pytest.raises(ProtocolError):
            expect(reply, Tag.TRANSCRYPT_OK)


def test_corrupt_peer_is_caught(env, ca, party_publics):
    script = AdversaryScript(("C",), "corrupt-result")
    peers = {p: build_peer(script, p, env.masters[p], ca.public, party_publics) for p in PEERS}
    client = env.client(MP, sampling=1.0, services=peers)
    with pytest.raises(VerificationFailure) as info:
        _pseudonymise(env, client, ["10.3.3.3"])
    assert info.value.peer == "C"


def test_corrupt_peer_cannot_pass_a_chain(env, ca, party_publics):
    script = AdversaryScript(("D",), "corrupt-result")
    peers = {p: build_peer(script, p, env.masters[p], ca.public, party_publics) for p in PEERS}
    c = _stored_cyphertext(env, "198.51.100.30")
    warrant = env.permit(INV, Mode.DEPSEUDONYMISE, [SF], [INV], c)
    with pytest.raises(VerificationFailure) as info:
        env.client(INV, services=peers).depseudonymise(c, SF, INV, warrant)
    assert info.value.peer == "D"


def test_refusing_peer(env, ca, party_publics):
    script = AdversaryScript(("A",), "refuse-proof")
    peers = {p: build_peer(script, p, env.masters[p], ca.public, party_publics) for p in PEERS}
    client = env.client(MP, sampling=1.0, services=peers)
    with pytest.raises(VerificationFailure) as info:
        _pseudonymise(env, client, ["10.3.3.4"])
    assert info.value.peer == "A" and "REFUSED" in info.value.reason


def test_two_lying_peers_identified(env, ca, party_publics):
    script = AdversaryScript(("B", "D"), "wrong-enrolment-share")
    peers = {p: build_peer(script, p, env.masters[p], ca.public, party_publics) for p in PEERS}
    result = env.client(b"researcher-1", 0.0, services=peers).enrol()
    assert result.liars == {"B", "D"}
    assert result.key == env.key("encryption", b"researcher-1")
