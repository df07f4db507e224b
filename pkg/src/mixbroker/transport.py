"""Plain-TCP and TLS listeners that tag every connection with its security level."""

from __future__ import annotations

import asyncio
import datetime
import logging
import socket
import ssl
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Awaitable, Callable

from .security import SecurityLevel

log = logging.getLogger(__name__)

DEFAULT_PLAIN_PORT = 1883
DEFAULT_TLS_PORT = 8883
# ECDHE key exchange only, AEAD ciphers first. Applies to TLS 1.2; TLS 1.3
# suites are configured separately by OpenSSL and are all ECDHE/AEAD.
DEFAULT_TLS12_CIPHERS = "ECDHE+AESGCM:ECDHE+CHACHA20:!aNULL:!eNULL"

_TLS_VERSIONS = {
    "TLSv1.2": ssl.TLSVersion.TLSv1_2,
    "TLSv1.3": ssl.TLSVersion.TLSv1_3,
}


class ListenerKind(Enum):
    PLAIN = "plain"
    TLS = "tls"


@dataclass(frozen=True)
class ListenerConfig:
    kind: ListenerKind
    host: str = "127.0.0.1"
    port: int | None = None
    certfile: str | None = None
    keyfile: str | None = None
    min_tls_version: str = "TLSv1.2"
    ciphers: str | None = None
    # Mutual TLS; client certificate identity is not mapped to client ids.
    client_cafile: str | None = None

    def __post_init__(self) -> None:
        if self.port is None:
            default = DEFAULT_TLS_PORT if self.kind is ListenerKind.TLS else DEFAULT_PLAIN_PORT
            object.__setattr__(self, "port", default)
        if self.kind is ListenerKind.TLS:
            if not (self.certfile and self.keyfile):
                raise ValueError("TLS listener requires certfile and keyfile")
            if self.min_tls_version not in _TLS_VERSIONS:
                raise ValueError(f"unsupported minimum TLS version {self.min_tls_version!r}")


@dataclass(frozen=True)
class ConnectionInfo:
    security_level: SecurityLevel
    peer: tuple
    listener: ListenerKind
    accepted_at: float
    tls_version: str | None = None
    cipher: str | None = None


def classify(kind: ListenerKind, handshake_ok: bool | None = None) -> SecurityLevel:
    """Map a listener kind to the level of connections accepted on it."""
    if kind is ListenerKind.PLAIN:
        return SecurityLevel.NON_SECURED
    if not handshake_ok:
        raise ValueError("a TLS connection without a completed handshake has no security level")
    return SecurityLevel.SECURED


def server_ssl_context(cfg: ListenerConfig) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = _TLS_VERSIONS[cfg.min_tls_version]
    ctx.set_ciphers(cfg.ciphers or DEFAULT_TLS12_CIPHERS)
    ctx.options |= ssl.OP_NO_TICKET  # no session resumption: every connection is a full handshake
    ctx.load_cert_chain(cfg.certfile, cfg.keyfile)
    if cfg.client_cafile:
        ctx.verify_mode = ssl.CERT_REQUIRED
        ctx.load_verify_locations(cfg.client_cafile)
    return ctx


ConnectionHandler = Callable[
    [asyncio.StreamReader, asyncio.StreamWriter, ConnectionInfo], Awaitable[None]
]


class Listener:
    """One bound socket with its own accept loop.

    For TLS listeners the handshake finishes before ``handler`` sees the
    connection; failed handshakes are counted and dropped.
    """

    def __init__(self, cfg: ListenerConfig, handler: ConnectionHandler, *,
                 handshake_timeout: float = 10.0) -> None:
        self.config = cfg
        self._handler = handler
        self._ssl = server_ssl_context(cfg) if cfg.kind is ListenerKind.TLS else None
        self._handshake_timeout = handshake_timeout
        self._sock: socket.socket | None = None
        self._accept_task: asyncio.Task | None = None
        self._tasks: set[asyncio.Task] = set()
        self.handshake_failures = 0
        self.accepted = 0

    @property
    def port(self) -> int:
        assert self._sock is not None, "listener not started"
        return self._sock.getsockname()[1]

    async def start(self) -> None:
        sock = socket.socket(socket.AF_INET6 if ":" in self.config.host else socket.AF_INET)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.config.host, self.config.port))
        except OSError:
            sock.close()
            raise
        sock.listen(128)
        sock.setblocking(False)
        self._sock = sock
        self._accept_task = asyncio.get_running_loop().create_task(self._accept_loop())
        log.info("%s listener on %s:%d", self.config.kind.value, self.config.host, self.port)

    async def _accept_loop(self) -> None:
        loop = asyncio.get_running_loop()
        while True:
            conn, peer = await loop.sock_accept(self._sock)
            accepted_at = time.time()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            task = loop.create_task(self._setup(conn, peer, accepted_at))
            self._tasks.add(task)
            task.add_done_callback(self._tasks.discard)

    async def _setup(self, conn: socket.socket, peer: tuple, accepted_at: float) -> None:
        loop = asyncio.get_running_loop()
        reader = asyncio.StreamReader(limit=2**20)
        protocol = asyncio.StreamReaderProtocol(reader)
        try:
            if self._ssl is not None:
                transport, _ = await loop.connect_accepted_socket(
                    lambda: protocol, conn, ssl=self._ssl,
                    ssl_handshake_timeout=self._handshake_timeout,
                )
            else:
                transport, _ = await loop.connect_accepted_socket(lambda: protocol, conn)
        except (OSError, ssl.SSLError, asyncio.TimeoutError, ConnectionError) as exc:
            self.handshake_failures += 1
            log.info("handshake with %s failed: %s", peer, exc)
            conn.close()
            return
        self.accepted += 1
        tls_version = cipher = None
        ssl_obj = transport.get_extra_info("ssl_object")
        if ssl_obj is not None:
            tls_version = ssl_obj.version()
            cipher = ssl_obj.cipher()[0]
        info = ConnectionInfo(
            security_level=classify(self.config.kind, ssl_obj is not None),
            peer=peer,
            listener=self.config.kind,
            accepted_at=accepted_at,
            tls_version=tls_version,
            cipher=cipher,
        )
        writer = asyncio.StreamWriter(transport, protocol, reader, loop)
        try:
            await self._handler(reader, writer, info)
        finally:
            writer.close()

    async def close(self) -> None:
        if self._accept_task is not None:
            self._accept_task.cancel()
            try:
                await self._accept_task
            except asyncio.CancelledError:
                pass
        if self._sock is not None:
            self._sock.close()
        for task in list(self._tasks):
            task.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)


async def start_listeners(
    configs: list[ListenerConfig], handler: ConnectionHandler
) -> list[Listener]:
    """Bind and start every listener; on any bind failure, close the rest and raise."""
    ports = [c.port for c in configs if c.port]
    if len(ports) != len(set(ports)):
        raise ValueError("listener ports must be distinct")
    started: list[Listener] = []
    try:
        for cfg in configs:
            listener = Listener(cfg, handler)
            await listener.start()
            started.append(listener)
    except BaseException:
        for listener in started:
            await listener.close()
        raise
    return started


def generate_self_signed_cert(
    directory: str | Path, common_name: str = "localhost", days: int = 30
) -> tuple[Path, Path]:
    """Write a self-signed ECDSA P-256 certificate and key for tests and demos.

    Returns ``(certfile, keyfile)``.
    """
    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import ec
    from cryptography.x509.oid import NameOID
    import ipaddress

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=days))
        .add_extension(
            x509.SubjectAlternativeName([
                x509.DNSName(common_name),
                x509.IPAddress(ipaddress.ip_address("127.0.0.1")),
            ]),
            critical=False,
        )
        .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
        .sign(key, hashes.SHA256())
    )
    certfile = directory / "server.crt"
    keyfile = directory / "server.key"
    certfile.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    keyfile.write_bytes(
        key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
    )
    return certfile, keyfile
