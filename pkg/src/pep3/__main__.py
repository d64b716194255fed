"""Command-line entry point: ``pep3 <command> [options]``.

Exit codes: 0 success, 1 usage or runtime error, 2 verification failure,
3 setup abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import random
import signal
import sys
import threading

from pep3.adversary import SCENARIOS, SETUP_FAULTS, AdversaryScript
from pep3.client import EnrolmentError, VerificationFailure
from pep3.elgamal import Cyphertext, encrypt
from pep3.group import GroupElement
from pep3.harness import (
    Cluster, ClusterConfig, Reporter, bench, pseudonymise_csv, run_adversary, serve_cluster,
    setup_cluster,
)
from pep3.keyshares import SetupAbort
from pep3.messages import Permit
from pep3.parties import read_flows
from pep3.wire import ProtocolError

EXIT_OK, EXIT_ERROR, EXIT_VERIFY, EXIT_SETUP = 0, 1, 2, 3
DEFAULT_CONFIG = "pep3-cluster.json"


def _config(args) -> ClusterConfig:
    cfg = ClusterConfig.load(args.config)
    if args.active:
        cfg.active = "".join(sorted(args.active.upper()))
    if args.sampling is not None:
        cfg.sampling = args.sampling
    cfg.__post_init__()
    return cfg


def _cluster(args, **kw) -> Cluster:
    cfg = _config(args)
    return Cluster(cfg, remote=args.remote, **kw)


def cmd_setup(args, reporter: Reporter) -> int:
    if os.path.exists(args.config):
        cfg = _config(args)
    else:
        state = args.state or os.path.splitext(os.path.basename(args.config))[0] + "-state"
        cfg = ClusterConfig(state)
        cfg.save(args.config)
        cfg = _config(args)
    script, fault = None, "tamper-table"
    if args.inject:
        fault, _, peer = args.inject.partition(":")
        if fault not in SETUP_FAULTS:
            print(f"unknown fault {fault!r}; choose from {', '.join(SETUP_FAULTS)}",
                  file=sys.stderr)
            return EXIT_ERROR
        script = AdversaryScript(((peer or "B").upper(),), "bad-setup-public")
    try:
        setup_cluster(cfg, script, fault)
    except SetupAbort as exc:
        reporter.emit("setup", f"setup aborted: {exc}", aborted=True, details=exc.details)
        for d in exc.details:
            print(f"  {d}", file=sys.stderr)
        return EXIT_SETUP
    reporter.emit("setup", f"setup complete; state in {cfg.state_dir}", aborted=False,
                  state_dir=cfg.state_dir)
    return EXIT_OK


def cmd_run(args, reporter: Reporter) -> int:
    cfg = _config(args)
    servers = serve_cluster(cfg)
    reporter.emit("run", "serving " + ", ".join(
        f"{name} on {host}:{port}" for name, (host, port) in cfg.endpoints().items()))
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait(args.duration if args.duration else None)
    except KeyboardInterrupt:
        pass
    for s in servers:
        s.shutdown()
    return EXIT_OK


def cmd_pseudonymise(args, reporter: Reporter) -> int:
    cluster = _cluster(args)
    try:
        flows = read_flows(args.input)
        rec = pseudonymise_csv(cluster, flows, reporter, args.party)
        if args.output and not cluster.remote:
            store = cluster.storage_facility().store
            with open(args.output, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("ts_start", "ts_end", "src_pseudonym", "dst_pseudonym", "src_port",
                            "dst_port", "proto", "packets", "bytes"))
                for row in store.rows[-rec["stored"]:] if rec["stored"] else []:
                    w.writerow([row[0], row[1], row[2].hex(), row[3].hex(), *row[4:]])
    finally:
        cluster.close()
    return EXIT_OK


def _pseudonym_json(value):
    return value.to_bytes().hex() if isinstance(value, GroupElement) else value


def cmd_retrieve(args, reporter: Reporter) -> int:
    cluster = _cluster(args)
    try:
        researcher = cluster.researcher(args.party)
        query_args = {}
        for item in args.arg or []:
            name, _, value = item.partition("=")
            query_args[name] = GroupElement(bytes.fromhex(value))
        rows = researcher.retrieve(args.query, query_args)
        for row in rows:
            print(json.dumps({k: _pseudonym_json(v) for k, v in row.items()}))
        reporter.emit("retrieve", None, query=args.query, rows=len(rows),
                      proofs=researcher.client.stats.as_dict())
    finally:
        cluster.close()
    return EXIT_OK


def cmd_depseudonymise(args, reporter: Reporter) -> int:
    cluster = _cluster(args)
    try:
        inv = cluster.investigator(args.party)
        from_party = args.source.encode()
        if args.cyphertext:
            c = Cyphertext.from_bytes(bytes.fromhex(args.cyphertext))
        elif args.pseudonym:
            c = encrypt(GroupElement(bytes.fromhex(args.pseudonym)),
                        cluster.party_public(args.source))
        else:
            print("give --cyphertext or --pseudonym", file=sys.stderr)
            return EXIT_ERROR
        if args.warrant:
            with open(args.warrant, "rb") as fh:
                warrant = Permit.from_bytes(bytes.fromhex(fh.read().decode().strip()))
            if warrant.cyphertext is not None and not args.cyphertext:
                c = warrant.cyphertext
        else:
            warrant = cluster.warrant(inv.identity, from_party, c)
        ip = inv.depseudonymise(c, from_party, warrant)
        print(ip)
        reporter.emit("depseudonymise", None, address=ip, proofs=inv.client.stats.as_dict())
    finally:
        cluster.close()
    return EXIT_OK


def cmd_adversary(args, reporter: Reporter) -> int:
    cfg = _config(args)
    peers = tuple(p.upper() for p in args.peer.split(","))
    script = AdversaryScript(peers, args.scenario, args.rate)
    sampling = cfg.sampling if args.sampling is not None else 1.0
    rng = random.Random(args.seed) if args.seed is not None else None
    rec = run_adversary(cfg, script, reporter, sampling, args.ops, args.windows, rng)
    return EXIT_OK if rec.get("detected") else EXIT_VERIFY


def cmd_bench(args, reporter: Reporter) -> int:
    cluster = _cluster(args)
    try:
        bench(cluster, reporter, args.ips, args.repeat)
    finally:
        cluster.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_CONFIG, help="cluster config (JSON)")
    common.add_argument("--active", help="three active peers, e.g. ACD")
    common.add_argument("--sampling", type=float, help="proof sampling probability")
    common.add_argument("--report", help="append JSON-lines report here")
    common.add_argument("--remote", action="store_true",
                        help="talk to a cluster started with 'run' over TCP")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pep3", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("setup", parents=[common], help="run key setup and enrol all parties")
    s.add_argument("--state", help="state directory for a new config")
    s.add_argument("--inject", metavar="FAULT[:PEER]",
                   help=f"script a setup inconsistency ({', '.join(SETUP_FAULTS)})")
    s.set_defaults(func=cmd_setup)

    s = sub.add_parser("run", parents=[common], help="serve peers and storage over TCP")
    s.add_argument("--duration", type=float, help="stop after this many seconds")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("pseudonymise", parents=[common], help="pseudonymise a flow CSV")
    s.add_argument("input")
    s.add_argument("--output", help="write the stored rows (pseudonyms in hex) as CSV")
    s.add_argument("--party", help="metering process id")
    s.set_defaults(func=cmd_pseudonymise)

    s = sub.add_parser("retrieve", parents=[common], help="query storage as a researcher")
    s.add_argument("query")
    s.add_argument("--arg", action="append", metavar="NAME=HEX",
                   help="own pseudonym bound to :NAME")
    s.add_argument("--party", help="researcher id")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("depseudonymise", parents=[common],
                       help="recover the address behind a pseudonym under a warrant")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--cyphertext", help="encrypted pseudonym (hex, 96 bytes)")
    g.add_argument("--pseudonym", help="pseudonym of --from (hex); encrypted for it first")
    s.add_argument("--from", dest="source", required=True, help="party the pseudonym belongs to")
    s.add_argument("--warrant", help="file holding a hex-encoded permit")
    s.add_argument("--party", help="investigator id")
    s.set_defaults(func=cmd_depseudonymise)

    s = sub.add_parser("adversary", parents=[common], help="run an adversarial scenario")
    s.add_argument("--scenario", choices=SCENARIOS, required=True)
    s.add_argument("--peer", required=True, help="misbehaving peer(s), e.g. B or B,D")
    s.add_argument("--rate", type=float, default=1.0, help="misbehaviour trigger probability")
    s.add_argument("--ops", type=int, default=100, help="operations per window")
    s.add_argument("--windows", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_adversary)

    s = sub.add_parser("bench", parents=[common], help="time operations and throughput")
    s.add_argument("--ips", type=int, default=2000, help="unique addresses for throughput")
    s.add_argument("--repeat", type=int, default=2000)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    reporter = Reporter(args.report)
    try:
        return args.func(args, reporter)
    except SetupAbort as exc:
        print(f"setup aborted: {exc}", file=sys.stderr)
        return EXIT_SETUP
    except VerificationFailure as exc:
        reporter.emit("verification-failure", f"verification failure: {exc}", peer=exc.peer,
                      reason=exc.reason)
        return EXIT_VERIFY
    except (ProtocolError, EnrolmentError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
