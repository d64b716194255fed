import json
import os
import socket
import subprocess
import sys
import time

import pytest

from pep3.__main__ import EXIT_ERROR, EXIT_OK, EXIT_SETUP, EXIT_VERIFY, main
from pep3.harness import ClusterConfig, generate_flows
from pep3.parties import write_flows


def _free_ports(n):
    socks = []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


@pytest.fixture(scope="module")
def cli(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ports = _free_ports(6)
    cfg = ClusterConfig("state", peers={p: ["127.0.0.1", ports[i]] for i, p in enumerate("ABCDE")},
                        storage=["127.0.0.1", ports[5]])
    path = str(root / "cluster.json")
    cfg.save(path)
    assert main(["setup", "--config", path]) == EXIT_OK
    flows = generate_flows(80, unique_hosts=20, seed=5)
    write_flows(str(root / "flows.csv"), flows)
    return root, path, flows


def test_setup_writes_state(cli):
    root, path, _ = cli
    state = root / "state"
    for p in "ABCDE":
        for suffix in ("key", "sealed"):
            f = state / f"peer-{p}.{suffix}"
            assert f.exists() and (f.stat().st_mode & 0o077) == 0
    keys = json.loads((state / "keys.json").read_text())
    assert set(keys["parties"]) == {"mp", "sf", "researcher-1", "researcher-2", "investigator"}
    assert all("key" in v for v in keys["parties"].values())
    assert (state / "tables.bin").stat().st_size == 10 * 2 * 253 * 32


def test_pipeline_through_cli(cli, capsys, tmp_path):
    root, path, flows = cli
    out = tmp_path / "out.csv"
    report = tmp_path / "report.jsonl"
    assert main(["pseudonymise", str(root / "flows.csv"), "--config", path, "--output", str(out),
                 "--report", str(report)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert len(lines) == len(flows) + 1
    rec = json.loads(report.read_text().splitlines()[-1])
    assert rec["event"] == "pseudonymise" and rec["stored"] == len(flows)

    first = lines[1].split(",")
    sf_pseudonym = first[2]
    capsys.readouterr()
    assert main(["depseudonymise", "--config", path, "--pseudonym", sf_pseudonym,
                 "--from", "sf"]) == EXIT_OK
    assert capsys.readouterr().out.strip().splitlines()[0] == flows[0].src

    assert main(["retrieve", "select count", "--config", path]) == EXIT_OK
    assert json.loads(capsys.readouterr().out.splitlines()[0])["count"] >= len(flows)


def test_retrieve_with_argument(cli, capsys):
    _, path, _ = cli
    capsys.readouterr()
    assert main(["retrieve", "select src_addr, bytes", "--config", path,
                 "--party", "researcher-2"]) == EXIT_OK
    rows = [json.loads(x) for x in capsys.readouterr().out.splitlines() if x.startswith("{")]
    mine = rows[0]["src_addr"]
    assert main(["retrieve", "select count where src_addr = :x", "--arg", f"x={mine}",
                 "--config", path, "--party", "researcher-2"]) == EXIT_OK
    count = json.loads(capsys.readouterr().out.splitlines()[0])["count"]
    assert count == sum(r["src_addr"] == mine for r in rows)


def test_whitelist_violation_exit_code(cli, capsys):
    _, path, _ = cli
    assert main(["retrieve", "select * where src_addr > :x", "--arg", "x=" + "00" * 32,
                 "--config", path]) == EXIT_ERROR
    assert "WHITELIST_VIOLATION" in capsys.readouterr().err


def test_warrant_file(cli, capsys, tmp_path):
    root, path, flows = cli
    from pep3.elgamal import encrypt
    from pep3.group import GroupElement
    from pep3.harness import Cluster
    cluster = Cluster(ClusterConfig.load(path))
    try:
        row = cluster.storage_facility().store.rows[3]
        c = encrypt(GroupElement(row[3]), cluster.party_public("sf"))
        warrant = cluster.warrant(b"investigator", b"sf", c)
    finally:
        cluster.close()
    wfile = tmp_path / "warrant.hex"
    wfile.write_text(warrant.to_bytes().hex())
    capsys.readouterr()
    assert main(["depseudonymise", "--config", path, "--cyphertext", c.to_bytes().hex(),
                 "--from", "sf", "--warrant", str(wfile)]) == EXIT_OK
    assert capsys.readouterr().out.strip().splitlines()[0] == flows[3].dst


@pytest.mark.parametrize("argv,code", [
    (["--scenario", "corrupt-result", "--peer", "C", "--ops", "4", "--sampling", "1"], EXIT_OK),
    (["--scenario", "corrupt-result", "--peer", "B", "--ops", "4", "--sampling", "0"],
     EXIT_VERIFY),
    (["--scenario", "refuse-proof", "--peer", "D", "--ops", "2", "--sampling", "1"], EXIT_OK),
    (["--scenario", "wrong-enrolment-share", "--peer", "B,D"], EXIT_OK),
    (["--scenario", "bad-setup-public", "--peer", "E", "--seed", "3"], EXIT_OK),
])
def test_adversary_scenarios(cli, argv, code, tmp_path):
    _, path, _ = cli
    report = tmp_path / "adv.jsonl"
    assert main(["adversary", "--config", path, "--report", str(report), *argv]) == code
    rec = json.loads(report.read_text().splitlines()[-1])
    if "corrupt" in argv[1] and code == EXIT_OK:
        assert rec["detected_by"] == ["C"]
    if "wrong-enrolment-share" in argv:
        assert rec["identified"] == ["B", "D"] and rec["correct"]


@pytest.mark.parametrize("inject", ["tamper-table:A", "split-pair:C", "withhold-table:E",
                                    "split-pair"])
def test_setup_abort_exit_code(tmp_path, inject, capsys):
    cfg = str(tmp_path / "c.json")
    ClusterConfig("s").save(cfg)
    assert main(["setup", "--config", cfg, "--inject", inject]) == EXIT_SETUP
    assert "setup aborted" in capsys.readouterr().out
    assert not (tmp_path / "s" / "keys.json").exists()


def test_unknown_fault(tmp_path):
    cfg = str(tmp_path / "c.json")
    ClusterConfig("s").save(cfg)
    assert main(["setup", "--config", cfg, "--inject", "nonsense"]) == EXIT_ERROR


def test_bench(cli, tmp_path):
    _, path, _ = cli
    report = tmp_path / "bench.jsonl"
    assert main(["bench", "--config", path, "--ips", "200", "--repeat", "50",
                 "--report", str(report)]) == EXIT_OK
    rec = json.loads(report.read_text().splitlines()[-1])
    assert rec["mul_counts"] == {"encrypt": [1, 1], "decrypt": [1, 0], "rsk": [4, 1],
                                 "rsk_fixed_target": [3, 1]}
    assert rec["unique_ips"] == 200 and rec["stored"] == 200
    assert rec["hardware"]["cpus"] >= 1


def _wait_for(port, deadline):
    while time.time() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.5).close()
            return True
        except OSError:
            time.sleep(0.2)
    return False


def test_remote_cluster(cli, capsys):
    root, path, flows = cli
    cfg = ClusterConfig.load(path)
    env = dict(os.environ)
    proc = subprocess.Popen([sys.executable, "-m", "pep3", "run", "--config", path,
                             "--duration", "120"], env=env, stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE)
    try:
        assert _wait_for(cfg.storage[1], time.time() + 30)
        assert all(_wait_for(port, time.time() + 10) for _, port in cfg.peers.values())
        assert main(["pseudonymise", str(root / "flows.csv"), "--config", path,
                     "--remote"]) == EXIT_OK
        capsys.readouterr()
        assert main(["retrieve", "select count where proto = 6", "--config", path,
                     "--remote"]) == EXIT_OK
        count = json.loads(capsys.readouterr().out.splitlines()[0])["count"]
        assert count >= sum(f.proto == 6 for f in flows)
    finally:
        proc.terminate()
        proc.wait(timeout=10)
