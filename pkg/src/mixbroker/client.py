"""Minimal blocking MQTT client used by the CLI tools, benchmarks and tests."""

from __future__ import annotations

import collections
import socket
import ssl
import time
from typing import Iterator

from . import codec
from .codec import (
    MQTT_5,
    Connack,
    Connect,
    Disconnect,
    IncompleteError,
    Pingreq,
    Pingresp,
    Property,
    Puback,
    Publish,
    Suback,
    Subscribe,
    SubscribeRequest,
    Unsuback,
    Unsubscribe,
)
from .security import EnforcementFlag, security_property


class ClientError(Exception):
    pass


class ConnectionRefused(ClientError):
    def __init__(self, reason_code: int) -> None:
        super().__init__(f"CONNACK reason code {reason_code:#04x}")
        self.reason_code = reason_code


class ConnectionClosed(ClientError):
    pass


def client_ssl_context(cafile: str | None = None, *, insecure: bool = False) -> ssl.SSLContext:
    ctx = ssl.create_default_context(cafile=cafile)
    ctx.options |= ssl.OP_NO_TICKET
    if insecure:
        ctx.check_hostname = False
        ctx.verify_mode = ssl.CERT_NONE
    return ctx


class MQTTClient:
    """One blocking connection to a broker.

    Packets that arrive while waiting for an acknowledgement (usually
    forwarded PUBLISHes) are queued and returned by :meth:`recv`.
    """

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 1883,
        *,
        client_id: str = "",
        protocol_version: int = MQTT_5,
        ssl_context: ssl.SSLContext | None = None,
        server_hostname: str | None = None,
        keep_alive_s: int = 60,
        timeout: float = 10.0,
    ) -> None:
        self.host = host
        self.port = port
        self.client_id = client_id
        self.protocol_version = protocol_version
        self.ssl_context = ssl_context
        self.server_hostname = server_hostname or host
        self.keep_alive_s = keep_alive_s
        self.timeout = timeout
        self.sock: socket.socket | None = None
        self.connack: Connack | None = None
        self._buf = bytearray()
        self._queue: collections.deque[codec.Packet] = collections.deque()
        self._next_id = 0

    # -- connection -----------------------------------------------------

    def open(self) -> None:
        """TCP connect plus TLS handshake if configured; no MQTT yet."""
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        if self.ssl_context is not None:
            try:
                sock = self.ssl_context.wrap_socket(sock, server_hostname=self.server_hostname)
            except BaseException:
                sock.close()
                raise
        self.sock = sock

    def connect(
        self,
        flag: EnforcementFlag | None = None,
        properties: list[Property] | None = None,
        *,
        username: str | None = None,
        password: bytes | None = None,
    ) -> Connack:
        if self.sock is None:
            self.open()
        props = list(properties or [])
        if flag is not None:
            props.append(security_property(flag))
        self._send(Connect(
            client_id=self.client_id,
            protocol_version=self.protocol_version,
            keep_alive_s=self.keep_alive_s,
            properties=props,
            username=username,
            password=password,
        ))
        connack = self._expect(Connack)
        self.connack = connack
        if connack.reason_code:
            self.close()
            raise ConnectionRefused(connack.reason_code)
        return connack

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None

    def disconnect(self) -> None:
        if self.sock is not None:
            try:
                self._send(Disconnect())
            except OSError:
                pass
            self.close()

    def __enter__(self) -> MQTTClient:
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.disconnect()

    # -- operations -----------------------------------------------------

    def publish(
        self,
        topic: str,
        payload: bytes,
        qos: int = 0,
        *,
        flag: EnforcementFlag | None = None,
        properties: list[Property] | None = None,
    ) -> Puback | None:
        props = list(properties or [])
        if flag is not None:
            props.append(security_property(flag))
        pkt = Publish(topic, payload, qos, self._packet_id() if qos else None, props)
        self._send(pkt)
        if qos:
            return self._expect(Puback, pkt.packet_id)
        return None

    def subscribe(
        self,
        filters: str | list[str] | list[tuple[str, int]],
        qos: int = 0,
        *,
        flag: EnforcementFlag | None = None,
    ) -> Suback:
        if isinstance(filters, str):
            filters = [filters]
        requests = [
            SubscribeRequest(f, qos) if isinstance(f, str) else SubscribeRequest(*f) for f in filters
        ]
        props = [security_property(flag)] if flag is not None else []
        pkt = Subscribe(self._packet_id(), requests, props)
        self._send(pkt)
        return self._expect(Suback, pkt.packet_id)

    def unsubscribe(self, filters: list[str]) -> Unsuback:
        pkt = Unsubscribe(self._packet_id(), filters)
        self._send(pkt)
        return self._expect(Unsuback, pkt.packet_id)

    def ping(self) -> Pingresp:
        self._send(Pingreq())
        return self._expect(Pingresp)

    def recv(self, timeout: float | None = None) -> codec.Packet | None:
        """Next queued or incoming packet, or ``None`` on timeout."""
        if self._queue:
            return self._queue.popleft()
        return self._read_packet(self.timeout if timeout is None else timeout)

    def messages(self, timeout: float) -> Iterator[Publish]:
        """Yield PUBLISHes until none arrives for ``timeout`` seconds.

        QoS 1 deliveries are acknowledged.
        """
        while True:
            pkt = self.recv(timeout)
            if pkt is None:
                return
            if isinstance(pkt, Publish):
                if pkt.qos:
                    self._send(Puback(pkt.packet_id))
                yield pkt

    # -- plumbing -------------------------------------------------------

    def _packet_id(self) -> int:
        self._next_id = self._next_id % 0xFFFF + 1
        return self._next_id

    def _send(self, pkt: codec.Packet) -> None:
        if self.sock is None:
            raise ConnectionClosed("not connected")
        self.sock.sendall(codec.encode_packet(pkt, self.protocol_version))

    def _read_packet(self, timeout: float) -> codec.Packet | None:
        if self.sock is None:
            raise ConnectionClosed("not connected")
        deadline = time.monotonic() + timeout
        while True:
            try:
                pkt, used = codec.decode_packet(self._buf, self.protocol_version)
                del self._buf[:used]
                return pkt
            except IncompleteError:
                pass
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            self.sock.settimeout(remaining)
            try:
                data = self.sock.recv(65536)
            except (socket.timeout, TimeoutError):
                return None
            finally:
                if self.sock is not None:
                    self.sock.settimeout(self.timeout)
            if not data:
                raise ConnectionClosed("broker closed the connection")
            self._buf += data

    def _expect(self, kind: type, packet_id: int | None = None):
        deadline = time.monotonic() + self.timeout
        while True:
            pkt = self._read_packet(max(0.0, deadline - time.monotonic()))
            if pkt is None:
                raise ClientError(f"timed out waiting for {kind.__name__}")
            if isinstance(pkt, kind) and (packet_id is None or pkt.packet_id == packet_id):
                return pkt
            if isinstance(pkt, Disconnect):
                raise ConnectionClosed(f"broker sent DISCONNECT {pkt.reason_code:#04x}")
            self._queue.append(pkt)
