"""Moving frames between parties and services.

Two transports carry identical bytes: :class:`InProcessTransport` calls the
service object directly (tests, single-process runs), :class:`TcpTransport`
talks to :func:`serve` over sockets.  Sockets authenticate the client with a
signed challenge from a static key, standing in for TLS client certificates.
"""
from __future__ import annotations

import logging
import os
import socket
import socketserver
import threading
from typing import Mapping, Protocol

from pep3.group import GroupElement, Scalar
from pep3.proofs import Signature, sign, verify_signature
from pep3.wire import (
    ErrorCode, Reader, Tag, Writer, error_frame, expect, frame, read_frame, unframe,
    write_frame,
)

log = logging.getLogger(__name__)

AUTH_CONTEXT = b"pep3-auth"


class Service(Protocol):
    def handle(self, data: bytes, sender: bytes) -> bytes: ...


class Transport(Protocol):
    identity: bytes

    def request(self, service: str, data: bytes) -> bytes: ...


class ServiceUnavailable(ConnectionError):
    def __init__(self, service: str, reason: str = "unreachable") -> None:
        super().__init__(f"{service}: {reason}")
        self.service = service


class InProcessTransport:
    """Deliver frames to in-memory services, tagging them with our identity."""

    def __init__(self, services: Mapping[str, Service], identity: bytes) -> None:
        self.services = services
        self.identity = identity

    def request(self, service: str, data: bytes) -> bytes:
        try:
            target = self.services[service]
        except KeyError:
            raise ServiceUnavailable(service) from None
        if target is None:
            raise ServiceUnavailable(service, "down")
        return target.handle(data, self.identity)


def _auth_message(nonce: bytes, service: str, identity: bytes) -> bytes:
    return Writer().raw(AUTH_CONTEXT).raw(nonce).var(service.encode()).var(identity).getvalue()


class TcpTransport:
    """One persistent authenticated connection per service, created lazily."""

    def __init__(self, endpoints: Mapping[str, tuple[str, int]], identity: bytes,
                 secret: Scalar, timeout: float = 30.0) -> None:
        self.endpoints = dict(endpoints)
        self.identity = identity
        self._secret = secret
        self._public = GroupElement.base_mul(secret)
        self._timeout = timeout
        self._conns: dict[str, socket.socket] = {}
        self._locks = {name: threading.Lock() for name in self.endpoints}

    def _connect(self, service: str) -> socket.socket:
        try:
            sock = socket.create_connection(self.endpoints[service], timeout=self._timeout)
        except (OSError, KeyError) as exc:
            raise ServiceUnavailable(service, str(exc)) from None
        nonce = expect(read_frame(sock), Tag.AUTH_CHALLENGE)
        sig = sign(self._secret, _auth_message(nonce, service, self.identity), self._public)
        write_frame(sock, frame(Tag.AUTH, Writer().var(self.identity).raw(sig.to_bytes())
                                .getvalue()))
        expect(read_frame(sock), Tag.AUTH_OK)
        return sock

    def request(self, service: str, data: bytes) -> bytes:
        if service not in self._locks:
            raise ServiceUnavailable(service, "no endpoint configured")
        with self._locks[service]:
            for attempt in range(2):
                sock = self._conns.get(service)
                try:
                    if sock is None:
                        sock = self._conns[service] = self._connect(service)
                    write_frame(sock, data)
                    return read_frame(sock)
                except (OSError, ConnectionError) as exc:
                    self._conns.pop(service, None)
                    if sock is not None:
                        sock.close()
                    if attempt or isinstance(exc, ServiceUnavailable):
                        raise ServiceUnavailable(service, str(exc)) from None
            raise AssertionError("unreachable")

    def close(self) -> None:
        for sock in self._conns.values():
            sock.close()
        self._conns.clear()


class _Handler(socketserver.BaseRequestHandler):
    server: _Server

    def handle(self) -> None:
        sock = self.request
        nonce = os.urandom(32)
        try:
            write_frame(sock, frame(Tag.AUTH_CHALLENGE, nonce))
            tag, payload = unframe(read_frame(sock))
            r = Reader(payload)
            identity = r.var()
            sig = Signature.from_bytes(r.raw(64))
            r.done()
            key = self.server.clients.get(identity)
            msg = _auth_message(nonce, self.server.name, identity)
            if tag != Tag.AUTH or key is None or not verify_signature(key, msg, sig):
                write_frame(sock, error_frame(ErrorCode.UNKNOWN_PARTY, "authentication failed"))
                return
            write_frame(sock, frame(Tag.AUTH_OK, b""))
            while True:
                data = read_frame(sock)
                write_frame(sock, self.server.service.handle(data, identity))
        except (ConnectionError, OSError):
            return
        except Exception as exc:
            log.debug("closing connection: %s", exc)


class _Server(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, name: str, service: Service,
                 clients: Mapping[bytes, GroupElement]) -> None:
        self.name = name
        self.service = service
        self.clients = clients
        super().__init__(address, _Handler)


def serve(name: str, service: Service, address: tuple[str, int],
          clients: Mapping[bytes, GroupElement]) -> _Server:
    """Start serving ``service`` on a background thread and return the server.

    ``clients`` maps identities to static public keys; call ``shutdown()`` to stop.
    """
    server = _Server(address, name, service, clients)
    threading.Thread(target=server.serve_forever, name=f"serve-{name}", daemon=True).start()
    return server
