"""Client-side roles: metering process, storage facility, researchers, investigator, CA.

Flow records carry two address columns.  They leave the metering process as
cyphertexts, are stored as the storage facility's pseudonym points, and are
handed out again only freshly encrypted under the facility's key, for the
requester to translate into its own pseudonyms.
"""
from __future__ import annotations

import csv
import io
import os
import re
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from pep3.client import TranscryptorClient
from pep3.elgamal import Cyphertext, decrypt, encrypt
from pep3.group import GroupElement, Scalar
from pep3.lizard import decode_ip, encode_ip
from pep3.messages import Mode, Permit
from pep3.transport import Transport
from pep3.wire import (
    ErrorCode, ProtocolError, Reader, Tag, WireFormatError, Writer, error_frame, expect, frame,
    unframe,
)

CSV_HEADER = ("ts_start", "ts_end", "src_ip", "dst_ip", "src_port", "dst_port", "proto",
              "packets", "bytes")
COLUMNS = ("ts_start", "ts_end", "src_addr", "dst_addr", "src_port", "dst_port", "proto",
           "packets", "bytes")
PSEUDONYM_COLUMNS = frozenset({"src_addr", "dst_addr"})


class WhitelistViolation(ProtocolError):
    def __init__(self, message: str) -> None:
        super().__init__(ErrorCode.WHITELIST_VIOLATION, message)


class QuerySyntaxError(WireFormatError):
    pass


# -- flow records ------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowRecord:
    """A flow; ``src``/``dst`` hold IP text, cyphertexts or pseudonym points."""

    ts_start: int
    ts_end: int
    src: object
    dst: object
    src_port: int
    dst_port: int
    proto: int
    packets: int
    bytes: int

    def __post_init__(self) -> None:
        if self.ts_start > self.ts_end:
            raise ValueError("flow ends before it starts")
        for name, bits in (("src_port", 16), ("dst_port", 16), ("proto", 8), ("packets", 64),
                           ("bytes", 64), ("ts_start", 64), ("ts_end", 64)):
            v = getattr(self, name)
            if not 0 <= v < 1 << bits:
                raise ValueError(f"{name} out of range: {v}")

    def with_addresses(self, src, dst) -> FlowRecord:
        return FlowRecord(self.ts_start, self.ts_end, src, dst, self.src_port, self.dst_port,
                          self.proto, self.packets, self.bytes)


def read_flows(source: str | io.TextIOBase) -> list[FlowRecord]:
    """Parse the flow CSV (timestamps in unix microseconds)."""
    if isinstance(source, str):
        with open(source, newline="") as fh:
            return read_flows(fh)
    reader = csv.DictReader(source)
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    return [FlowRecord(int(r["ts_start"]), int(r["ts_end"]), r["src_ip"].strip(),
                       r["dst_ip"].strip(), int(r["src_port"]), int(r["dst_port"]),
                       int(r["proto"]), int(r["packets"]), int(r["bytes"]))
            for r in reader]


def write_flows(path: str, flows: Iterable[FlowRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for f in flows:
            w.writerow([f.ts_start, f.ts_end, f.src, f.dst, f.src_port, f.dst_port, f.proto,
                        f.packets, f.bytes])


def _put_encrypted_flow(w: Writer, f: FlowRecord) -> None:
    w.u64(f.ts_start).u64(f.ts_end).cyphertext(f.src).cyphertext(f.dst)
    w.u16(f.src_port).u16(f.dst_port).u8(f.proto).u64(f.packets).u64(f.bytes)


def _get_encrypted_flow(r: Reader) -> FlowRecord:
    try:
        return FlowRecord(r.u64(), r.u64(), r.cyphertext(), r.cyphertext(), r.u16(), r.u16(),
                          r.u8(), r.u64(), r.u64())
    except ValueError as exc:
        raise WireFormatError(str(exc)) from None


# -- certification authority ---------------------------------------------------------------

class CertificationAuthority:
    def __init__(self, secret: Scalar | None = None) -> None:
        self.secret = secret or Scalar.random(nonzero=True)
        self.public = GroupElement.base_mul(self.secret)

    def issue(self, subject: bytes, operation: Mode, from_set: Iterable[bytes],
              to_set: Iterable[bytes], cyphertext: Cyphertext | None = None,
              lifetime: float = 3600.0, now: float | None = None) -> Permit:
        expiry = int((time.time() if now is None else now) + lifetime)
        permit = Permit(subject, Mode(operation), tuple(from_set), tuple(to_set), cyphertext,
                        expiry)
        return permit.signed(self.secret)


# -- storage ------------------------------------------------------------------------------

ROW = struct.Struct(">QQ32s32sHHBQQ")
STORE_MAGIC = b"PEP3SF1\n"


class FlowStore:
    """Append-only fixed-width rows with an in-memory index on both address columns.

    Rows are 101 bytes: two u64 timestamps, two 32-byte pseudonym encodings,
    two u16 ports, a u8 protocol and two u64 counters, all big-endian.
    """

    def __init__(self, path: str | None = None) -> None:
        self.path = path
        self.rows: list[tuple] = []
        self.index = {c: {} for c in PSEUDONYM_COLUMNS}
        self._lock = threading.Lock()
        self._fh = None
        if path is not None:
            if os.path.exists(path):
                self._load(path)
            else:
                with open(path, "wb") as fh:
                    fh.write(STORE_MAGIC)
            self._fh = open(path, "ab")

    def _load(self, path: str) -> None:
        with open(path, "rb") as fh:
            data = fh.read()
        if not data.startswith(STORE_MAGIC):
            raise ValueError(f"{path} is not a flow store")
        body = data[len(STORE_MAGIC):]
        usable = len(body) - len(body) % ROW.size
        for off in range(0, usable, ROW.size):
            self._index_row(ROW.unpack_from(body, off))

    def _index_row(self, row: tuple) -> None:
        rid = len(self.rows)
        self.rows.append(row)
        self.index["src_addr"].setdefault(row[2], []).append(rid)
        self.index["dst_addr"].setdefault(row[3], []).append(rid)

    def append(self, flows: Sequence[FlowRecord]) -> int:
        packed = [(f.ts_start, f.ts_end, f.src.to_bytes(), f.dst.to_bytes(), f.src_port,
                   f.dst_port, f.proto, f.packets, f.bytes) for f in flows]
        with self._lock:
            if self._fh is not None:
                self._fh.write(b"".join(ROW.pack(*row) for row in packed))
                self._fh.flush()
            for row in packed:
                self._index_row(row)
        return len(packed)

    def __len__(self) -> int:
        return len(self.rows)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# -- query language -----------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(?P<num>\d+)|(?P<arg>:[A-Za-z_]\w*)|(?P<word>[A-Za-z_]\w*)"
                    r"|(?P<op><=|>=|!=|=|<|>)|(?P<punct>[(),*]))")
_OPS = {"=": lambda a, b: a == b, "!=": lambda a, b: a != b, "<": lambda a, b: a < b,
        "<=": lambda a, b: a <= b, ">": lambda a, b: a > b, ">=": lambda a, b: a >= b}


@dataclass(frozen=True)
class Term:
    column: str
    op: str
    kind: str  # "column", "arg" or "literal"
    value: object


@dataclass(frozen=True)
class Query:
    """``select <cols> | count [where <col> <op> <operand> [and ...]] [order by <col>]``.

    Pseudonym columns may only be selected, counted, or compared for equality
    with another pseudonym (column or ``:arg``); anything else is refused.
    """

    projection: tuple[str, ...]
    count: bool
    where: tuple[Term, ...]
    order_by: str | None = None
    descending: bool = False

    @property
    def output_columns(self) -> tuple[str, ...]:
        return ("count",) if self.count else self.projection

    @property
    def args(self) -> set[str]:
        return {t.value for t in self.where if t.kind == "arg"}


def _tokens(text: str) -> list[tuple[str, str]]:
    out, pos = [], 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise QuerySyntaxError(f"unexpected input at {text[pos:pos + 12]!r}")
        kind = m.lastgroup
        value = m.group(kind)
        out.append((kind, value.lower() if kind == "word" else value))
        pos = m.end()
    return out


def _column(name: str) -> str:
    if name not in COLUMNS:
        raise QuerySyntaxError(f"unknown column {name!r}")
    return name


def parse_query(text: str) -> Query:
    toks = _tokens(text)
    pos = 0

    def peek(k=0):
        return toks[pos + k] if pos + k < len(toks) else (None, None)

    def take(kind=None, value=None):
        nonlocal pos
        tok = peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            raise QuerySyntaxError(f"expected {value or kind}, got {tok[1]!r}")
        pos += 1
        return tok[1]

    take("word", "select")
    projection: list[str] = []
    count = False
    if peek() == ("word", "count"):
        take()
        count = True
        if peek() == ("punct", "("):
            take()
            if peek() == ("punct", "*"):
                take()
            else:
                _column(take("word"))
            take("punct", ")")
    elif peek() == ("punct", "*"):
        take()
        projection = list(COLUMNS)
    else:
        projection.append(_column(take("word")))
        while peek() == ("punct", ","):
            take()
            projection.append(_column(take("word")))
    where: list[Term] = []
    if peek() == ("word", "where"):
        take()
        while True:
            col = _column(take("word"))
            op = take("op")
            kind, value = peek()
            if kind == "num":
                where.append(Term(col, op, "literal", int(take())))
            elif kind == "arg":
                where.append(Term(col, op, "arg", take()[1:]))
            elif kind == "word":
                where.append(Term(col, op, "column", _column(take())))
            else:
                raise QuerySyntaxError("missing operand")
            if peek() != ("word", "and"):
                break
            take()
    order_by, descending = None, False
    if peek() == ("word", "order"):
        take()
        take("word", "by")
        order_by = _column(take("word"))
        if peek()[1] in ("asc", "desc"):
            descending = take() == "desc"
    if pos != len(toks):
        raise QuerySyntaxError(f"unexpected {peek()[1]!r}")
    q = Query(tuple(projection), count, tuple(where), order_by, descending)
    check_whitelist(q)
    return q


def check_whitelist(q: Query) -> None:
    """Refuse every use of a pseudonym that is not select, count or equality."""
    for t in q.where:
        pseudo_left = t.column in PSEUDONYM_COLUMNS
        pseudo_right = t.kind == "arg" or (t.kind == "column" and t.value in PSEUDONYM_COLUMNS)
        if pseudo_left or pseudo_right:
            if t.op != "=":
                raise WhitelistViolation(f"operator {t.op} is not admissible on pseudonyms")
            if not (pseudo_left and pseudo_right):
                raise WhitelistViolation(
                    f"{t.column} compares a pseudonym with a plain value")
    if q.order_by in PSEUDONYM_COLUMNS:
        raise WhitelistViolation(f"ordering by pseudonym column {q.order_by}")


def run_query(store: FlowStore, q: Query, args: Mapping[str, GroupElement]) -> list[tuple]:
    """Evaluate ``q``; pseudonym values come back as 32-byte encodings."""
    missing = q.args - set(args)
    if missing:
        raise QuerySyntaxError(f"missing arguments: {', '.join(sorted(missing))}")
    pos = {c: i for i, c in enumerate(COLUMNS)}
    encoded = {k: v.to_bytes() for k, v in args.items()}
    candidates: Iterable[int] | None = None
    for t in q.where:
        if t.kind == "arg" and t.column in PSEUDONYM_COLUMNS:
            hits = store.index[t.column].get(encoded[t.value], [])
            if candidates is None or len(hits) < len(candidates):
                candidates = hits
    rows = store.rows
    ids = range(len(rows)) if candidates is None else sorted(set(candidates))

    def matches(row) -> bool:
        for t in q.where:
            left = row[pos[t.column]]
            if t.kind == "arg":
                right = encoded[t.value]
            elif t.kind == "column":
                right = row[pos[t.value]]
            else:
                right = t.value
            if not _OPS[t.op](left, right):
                return False
        return True

    selected = [rows[i] for i in ids if matches(rows[i])]
    if q.count:
        return [(len(selected),)]
    if q.order_by:
        k = pos[q.order_by]
        selected.sort(key=lambda r: r[k], reverse=q.descending)
    idx = [pos[c] for c in q.projection]
    return [tuple(r[i] for i in idx) for r in selected]


# -- metering process ---------------------------------------------------------------------

class Party:
    """An enrolled party: a transcryptor client plus its own encryption key."""

    def __init__(self, identity: bytes, client: TranscryptorClient, key: Scalar) -> None:
        self.identity = identity
        self.client = client
        self.key = key
        self.public = GroupElement.base_mul(key)

    def encrypt_for_self(self, point: GroupElement) -> Cyphertext:
        return encrypt(point, self.public)

    def decrypt(self, c: Cyphertext) -> GroupElement:
        if c.target != self.public:
            raise ValueError("cyphertext is not encrypted for this party")
        return decrypt(c, self.key)


class LRUCache:
    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self.hits = self.misses = 0

    def get(self, key):
        try:
            value = self._data[key]
        except KeyError:
            self.misses += 1
            return None
        self._data.move_to_end(key)
        self.hits += 1
        return value

    def put(self, key, value) -> None:
        self._data[key] = value
        self._data.move_to_end(key)
        while len(self._data) > self.capacity:
            self._data.popitem(last=False)

    def __len__(self) -> int:
        return len(self._data)


class MeteringProcess(Party):
    """Turns plaintext flows into flows carrying the storage facility's encrypted pseudonyms."""

    def __init__(self, identity: bytes, client: TranscryptorClient, key: Scalar,
                 storage_id: bytes, permit: Permit, cache_size: int = 1 << 18,
                 batch_size: int = 512, storage_public: GroupElement | None = None) -> None:
        super().__init__(identity, client, key)
        self.storage_id = storage_id
        self.storage_public = storage_public
        self.permit = permit
        self.cache = LRUCache(cache_size)
        self.batch_size = batch_size
        self.unique_sent = 0

    def pseudonymise_addresses(self, addresses: Iterable[str]) -> dict[str, Cyphertext]:
        out: dict[str, Cyphertext] = {}
        todo: list[str] = []
        for a in dict.fromkeys(addresses):
            hit = self.cache.get(a)
            if hit is None:
                todo.append(a)
            else:
                out[a] = hit
        for i in range(0, len(todo), self.batch_size):
            chunk = todo[i:i + self.batch_size]
            cs = [self.encrypt_for_self(encode_ip(a)) for a in chunk]
            results = self.client.transcrypt(Mode.PSEUDONYMISE, self.identity, self.storage_id,
                                             cs, self.permit, target_out=self.storage_public)
            self.unique_sent += len(chunk)
            for a, c in zip(chunk, results):
                self.cache.put(a, c)
                out[a] = c
        return out

    def pseudonymise(self, flows: Sequence[FlowRecord]) -> list[FlowRecord]:
        table = self.pseudonymise_addresses(a for f in flows for a in (f.src, f.dst))
        return [f.with_addresses(table[f.src], table[f.dst]) for f in flows]

    def send(self, transport: Transport, flows: Sequence[FlowRecord], service: str = "SF",
             chunk: int = 2048) -> int:
        stored = 0
        for i in range(0, len(flows), chunk):
            w = Writer().items(flows[i:i + chunk], _put_encrypted_flow)
            data = expect(transport.request(service, frame(Tag.SF_INGEST, w.getvalue())),
                          Tag.SF_INGEST_OK)
            r = Reader(data)
            stored += r.u32()
            r.done()
        return stored


# -- storage facility ----------------------------------------------------------------------

class StorageFacility(Party):
    """Stores flows under its own pseudonyms and answers whitelisted queries.

    ``writers`` may ingest; ``readers`` may query.
    """

    def __init__(self, identity: bytes, client: TranscryptorClient | None, key: Scalar,
                 store: FlowStore, writers: Iterable[bytes] = (),
                 readers: Iterable[bytes] = ()) -> None:
        super().__init__(identity, client, key)
        self.store = store
        self.writers = set(writers)
        self.readers = set(readers)
        # metering processes resend cached cyphertexts for recurring addresses
        self._seen = LRUCache(1 << 16)

    def _pseudonym(self, c: Cyphertext) -> GroupElement:
        enc = c.to_bytes()
        point = self._seen.get(enc)
        if point is None:
            point = self.decrypt(c)
            self._seen.put(enc, point)
        return point

    def ingest(self, flows: Sequence[FlowRecord]) -> int:
        plain = [f.with_addresses(self._pseudonym(f.src), self._pseudonym(f.dst)) for f in flows]
        return self.store.append(plain)

    def query(self, text: str, args: Mapping[str, Cyphertext]
              ) -> tuple[tuple[str, ...], list[tuple]]:
        """Evaluate a query whose ``:args`` are encrypted for this facility.

        Pseudonym columns of the result are freshly encrypted under our key.
        """
        q = parse_query(text)
        points = {k: self.decrypt(c) for k, c in args.items()}
        rows = run_query(self.store, q, points)
        cols = q.output_columns
        pseudo = [c in PSEUDONYM_COLUMNS for c in cols]
        out = [tuple(encrypt(GroupElement._trusted(v), self.public) if p else v
                     for v, p in zip(row, pseudo)) for row in rows]
        return cols, out

    def handle(self, data: bytes, sender: bytes) -> bytes:
        try:
            tag, payload = unframe(data)
            r = Reader(payload)
            if tag == Tag.SF_INGEST:
                if sender not in self.writers:
                    raise ProtocolError(ErrorCode.UNKNOWN_PARTY, "not allowed to ingest")
                flows = r.items(_get_encrypted_flow)
                r.done()
                try:
                    n = self.ingest(flows)
                except ValueError as exc:
                    raise WireFormatError(str(exc)) from None
                return frame(Tag.SF_INGEST_OK, Writer().u32(n).getvalue())
            if tag == Tag.SF_QUERY:
                if sender not in self.readers:
                    raise ProtocolError(ErrorCode.UNKNOWN_PARTY, "not allowed to query")
                text = r.var().decode()
                args = dict(r.items(lambda rr: (rr.var().decode(), rr.cyphertext())))
                r.done()
                try:
                    cols, rows = self.query(text, args)
                except ValueError as exc:
                    raise WireFormatError(str(exc)) from None
                return frame(Tag.SF_QUERY_OK, encode_result(cols, rows))
            raise WireFormatError(f"unsupported tag {tag:#x}")
        except ProtocolError as exc:
            return error_frame(exc.code, exc.message)


def encode_result(cols: Sequence[str], rows: Sequence[tuple]) -> bytes:
    w = Writer().items(cols, lambda w_, c: w_.var(c.encode())).u32(len(rows))
    for row in rows:
        for c, v in zip(cols, row):
            if c in PSEUDONYM_COLUMNS:
                w.cyphertext(v)
            else:
                w.u64(v)
    return w.getvalue()


def decode_result(data: bytes) -> tuple[tuple[str, ...], list[tuple]]:
    r = Reader(data)
    cols = tuple(r.items(lambda rr: rr.var().decode()))
    rows = []
    for _ in range(r.u32()):
        rows.append(tuple(r.cyphertext() if c in PSEUDONYM_COLUMNS else r.u64() for c in cols))
    r.done()
    return cols, rows


# -- researchers and investigators ---------------------------------------------------------

class Researcher(Party):
    """Queries the storage facility in terms of its own pseudonyms."""

    def __init__(self, identity: bytes, client: TranscryptorClient, key: Scalar,
                 storage_id: bytes, permit: Permit, transport: Transport,
                 service: str = "SF", storage_public: GroupElement | None = None) -> None:
        super().__init__(identity, client, key)
        self.storage_id = storage_id
        self.storage_public = storage_public
        self.permit = permit
        self.transport = transport
        self.service = service

    def retrieve(self, text: str, args: Mapping[str, GroupElement] | None = None
                 ) -> list[dict[str, object]]:
        parse_query(text)  # refuse locally before spending any transcryption
        args = dict(args or {})
        names = list(args)
        translated: list[Cyphertext] = []
        if names:
            mine = [self.encrypt_for_self(args[k]) for k in names]
            translated = self.client.transcrypt(Mode.TRANSLATE, self.identity, self.storage_id,
                                                mine, self.permit,
                                                target_out=self.storage_public)
        w = Writer().var(text.encode())
        w.items(zip(names, translated), lambda w_, kv: w_.var(kv[0].encode()).cyphertext(kv[1]))
        data = expect(self.transport.request(self.service, frame(Tag.SF_QUERY, w.getvalue())),
                      Tag.SF_QUERY_OK)
        cols, rows = decode_result(data)
        pseudo = [i for i, c in enumerate(cols) if c in PSEUDONYM_COLUMNS]
        encrypted = [row[i] for row in rows for i in pseudo]
        if encrypted:
            back = self.client.transcrypt(Mode.TRANSLATE, self.storage_id, self.identity,
                                          encrypted, self.permit, target_out=self.public)
            points = iter(self.decrypt(c) for c in back)
        out = []
        for row in rows:
            out.append({c: next(points) if c in PSEUDONYM_COLUMNS else v
                        for c, v in zip(cols, row)})
        return out


class Investigator(Party):
    """Recovers the address behind one encrypted pseudonym named in a warrant."""

    def depseudonymise(self, c: Cyphertext, from_party: bytes, warrant: Permit,
                       active: str | None = None) -> str:
        out = self.client.depseudonymise(c, from_party, self.identity, warrant, active)
        return decode_ip(self.decrypt(out))

