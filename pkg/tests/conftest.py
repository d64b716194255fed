from __future__ import annotations

import pytest

from pep3.group import GroupElement, Scalar
from pep3.harness import Cluster, ClusterConfig, setup_cluster
from pep3.keyshares import PEERS, SetupParticipant, run_setup
from pep3.parties import CertificationAuthority

_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def masters():
    """One honest setup shared by the peer-level tests."""
    return run_setup({p: SetupParticipant(p) for p in PEERS})


@pytest.fixture(scope="session")
def ca():
    return CertificationAuthority()


@pytest.fixture(scope="session")
def party_auth():
    return {pid: Scalar.random(nonzero=True)
            for pid in (b"mp", b"sf", b"researcher-1", b"researcher-2", b"investigator")}


@pytest.fixture(scope="session")
def party_publics(party_auth):
    return {pid: GroupElement.base_mul(k) for pid, k in party_auth.items()}


@pytest.fixture(scope="session")
def cluster_config(tmp_path_factory):
    """A set-up cluster (keys, enrolment, tables) in a temporary state dir."""
    state = tmp_path_factory.mktemp("cluster")
    cfg = ClusterConfig(str(state / "state"))
    cfg.save(str(state / "cluster.json"))
    setup_cluster(cfg)
    return cfg


@pytest.fixture
def cluster(cluster_config):
    c = Cluster(cluster_config)
    yield c
    c.close()


@pytest.fixture
def criterion():
    """Record one acceptance line; echoed again in the terminal summary."""

    def report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{title}]: {'PASS' if ok else 'FAIL'} ({detail})"
        _CRITERIA.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
