"""Session lifecycle and PUBLISH dispatch with security-level enforcement.

The ``handle_*`` methods are synchronous and touch only in-memory state plus
each session's outbound handle, so the whole dispatch path can be driven
without sockets. :meth:`Broker.serve_connection` is the asyncio glue that
frames bytes from a real connection into those calls.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Protocol

from . import codec
from .audit import AuditEvent, AuditLog
from .codec import (
    MQTT_5,
    Connack,
    Connect,
    Disconnect,
    IncompleteError,
    MalformedError,
    Pingreq,
    Pingresp,
    Puback,
    Publish,
    PropertyId,
    Suback,
    Subscribe,
    Unsuback,
    Unsubscribe,
    UnsupportedProtocolError,
)
from .security import (
    DELIVER,
    ClientSecurityProfile,
    DenyReason,
    EnforcementFlag,
    FlagSource,
    LegacyPolicy,
    SecurityLevel,
    SecurityPropertyError,
    decide_delivery,
    derive_profile,
    parse_security_property,
)
from .topics import Subscription, SubscriptionTable, TopicError, validate_topic_filter, validate_topic_name
from .transport import ConnectionInfo, Listener, ListenerConfig, ListenerKind, start_listeners

log = logging.getLogger(__name__)

KEEPALIVE_GRACE = 1.5

# MQTT v5 reason codes used by the broker.
RC_SUCCESS = 0x00
RC_NO_SUBSCRIPTION_EXISTED = 0x11
RC_UNSPECIFIED = 0x80
RC_PROTOCOL_ERROR = 0x82
RC_IMPLEMENTATION_SPECIFIC = 0x83
RC_CLIENT_ID_NOT_VALID = 0x85
RC_SERVER_UNAVAILABLE = 0x88
RC_KEEP_ALIVE_TIMEOUT = 0x8D
RC_SESSION_TAKEN_OVER = 0x8E
RC_TOPIC_FILTER_INVALID = 0x8F
RC_TOPIC_NAME_INVALID = 0x90
RC_QUOTA_EXCEEDED = 0x97
RC_QOS_NOT_SUPPORTED = 0x9B
RC_SHARED_SUBS_NOT_SUPPORTED = 0x9E

# MQTT 3.1.1 CONNACK return codes.
V4_UNACCEPTABLE_VERSION = 0x01
V4_IDENTIFIER_REJECTED = 0x02
V4_SERVER_UNAVAILABLE = 0x03

# Not forwarded: they are scoped to the publisher's connection.
_CONNECTION_SCOPED_PROPERTIES = {PropertyId.TOPIC_ALIAS, PropertyId.SUBSCRIPTION_IDENTIFIER}


class ProtocolViolation(Exception):
    """The client broke the protocol; its connection must close."""

    def __init__(self, message: str, reason_code: int = RC_PROTOCOL_ERROR) -> None:
        super().__init__(message)
        self.reason_code = reason_code


@dataclass
class BrokerConfig:
    listeners: list[ListenerConfig]
    legacy_policy: LegacyPolicy = LegacyPolicy.INFER_FROM_TRANSPORT
    max_qos: int = 1
    audit_log_path: str | None = None
    audit_deliveries: bool = False
    session_limit: int = 10_000
    # Off gives plain MQTT forwarding, used as the benchmark baseline.
    enforcement: bool = True
    # Records PUBLISH-receipt to forwarded-write latency in Broker.forward_samples.
    measure_forwarding: bool = False
    outbound_buffer_limit: int = 4 * 2**20
    connect_timeout_s: float = 10.0

    def __post_init__(self) -> None:
        if not self.listeners:
            raise ValueError("at least one listener is required")
        ports = [c.port for c in self.listeners if c.port]
        if len(ports) != len(set(ports)):
            raise ValueError("listener ports must be distinct")
        if self.max_qos not in (0, 1):
            raise ValueError("max_qos must be 0 or 1")
        if self.session_limit < 1:
            raise ValueError("session_limit must be positive")


class Outbound(Protocol):
    """Where a session's outgoing bytes go."""

    def write(self, data: bytes) -> None: ...

    def close(self) -> None: ...

    def buffered(self) -> int: ...


class StreamOutbound:
    def __init__(self, writer: asyncio.StreamWriter) -> None:
        self._writer = writer

    def write(self, data: bytes) -> None:
        self._writer.write(data)

    def close(self) -> None:
        self._writer.close()

    def buffered(self) -> int:
        return self._writer.transport.get_write_buffer_size()


@dataclass(eq=False)
class ClientSession:
    client_id: str
    protocol_version: int
    profile: ClientSecurityProfile
    keep_alive_s: int
    info: ConnectionInfo
    outbound: Outbound
    connected_at: float = field(default_factory=time.time)
    closed: bool = False
    _packet_ids: itertools.cycle = field(default_factory=lambda: itertools.cycle(range(1, 0x10000)))

    def next_packet_id(self) -> int:
        return next(self._packet_ids)


@dataclass
class DispatchResult:
    delivered: list[str] = field(default_factory=list)
    denied: list[tuple[str, DenyReason]] = field(default_factory=list)
    puback: Puback | None = None


Tap = Callable[[ClientSession, bytes], None]


class Broker:
    def __init__(self, config: BrokerConfig, *, tap: Tap | None = None) -> None:
        self.config = config
        self.sessions: dict[str, ClientSession] = {}
        self.subscriptions = SubscriptionTable()
        self.audit = AuditLog(config.audit_log_path)
        self.tap = tap
        self.forward_samples: list[float] = []
        self.listeners: list[Listener] = []
        self.delivered_count = 0
        self.denied_count = 0

    # ------------------------------------------------------------------
    # Outbound
    # ------------------------------------------------------------------

    def send(self, session: ClientSession, packet: codec.Packet) -> None:
        if session.closed:
            return
        data = codec.encode_packet(packet, session.protocol_version)
        session.outbound.write(data)
        if self.tap is not None:
            self.tap(session, data)
        if session.outbound.buffered() > self.config.outbound_buffer_limit:
            log.warning("disconnecting slow consumer %s", session.client_id)
            self.drop_session(session)

    def drop_session(self, session: ClientSession, reason_code: int | None = None) -> None:
        """Close a session and forget its subscriptions (clean-session semantics)."""
        if session.closed:
            return
        if reason_code is not None and session.protocol_version == MQTT_5:
            self.send(session, Disconnect(reason_code))
        session.closed = True
        session.outbound.close()
        if self.sessions.get(session.client_id) is session:
            del self.sessions[session.client_id]
            self.subscriptions.remove_client(session.client_id)

    # ------------------------------------------------------------------
    # Packet handlers
    # ------------------------------------------------------------------

    def handle_connect(
        self, info: ConnectionInfo, pkt: Connect, outbound: Outbound
    ) -> tuple[Connack, ClientSession | None]:
        """Create a session for ``pkt`` and send the CONNACK.

        Returns the CONNACK and the new session, or ``None`` when the
        connection was refused (the caller closes it).
        """
        v5 = pkt.protocol_version == MQTT_5

        def refuse(v5_code: int, v4_code: int) -> tuple[Connack, None]:
            connack = Connack(v5_code if v5 else v4_code)
            outbound.write(codec.encode_packet(connack, pkt.protocol_version))
            return connack, None

        client_id = pkt.client_id
        props: list[codec.Property] = []
        if not client_id:
            if not pkt.clean_start and not v5:
                return refuse(RC_CLIENT_ID_NOT_VALID, V4_IDENTIFIER_REJECTED)
            client_id = f"auto-{uuid.uuid4().hex}"
            if v5:
                props.append((PropertyId.ASSIGNED_CLIENT_IDENTIFIER, client_id))

        old = self.sessions.get(client_id)
        if old is None and len(self.sessions) >= self.config.session_limit:
            return refuse(RC_QUOTA_EXCEEDED, V4_SERVER_UNAVAILABLE)

        explicit = None
        if self.config.enforcement:
            try:
                explicit = parse_security_property(pkt.properties)
            except SecurityPropertyError as exc:
                log.info("refusing %s: %s", client_id, exc)
                return refuse(RC_PROTOCOL_ERROR, V4_SERVER_UNAVAILABLE)
        profile = derive_profile(info.security_level, explicit, self.config.legacy_policy)
        if (profile.flag is EnforcementFlag.ENFORCE
                and profile.transport_level == SecurityLevel.NON_SECURED):
            log.warning("client %s enforces over a non-secured connection; this has no effect", client_id)

        if old is not None:
            log.info("session takeover for %s", client_id)
            self.drop_session(old, RC_SESSION_TAKEN_OVER)

        session = ClientSession(
            client_id=client_id,
            protocol_version=pkt.protocol_version,
            profile=profile,
            keep_alive_s=pkt.keep_alive_s,
            info=info,
            outbound=outbound,
        )
        self.sessions[client_id] = session
        if v5:
            props += [
                (PropertyId.MAXIMUM_QOS, self.config.max_qos),
                (PropertyId.RETAIN_AVAILABLE, 0),
                (PropertyId.SHARED_SUBSCRIPTION_AVAILABLE, 0),
                (PropertyId.SUBSCRIPTION_IDENTIFIER_AVAILABLE, 0),
            ]
        connack = Connack(RC_SUCCESS, False, props)
        self.send(session, connack)
        log.debug("connected %s %s", client_id, profile)
        return connack, session

    def handle_subscribe(self, session: ClientSession, pkt: Subscribe) -> Suback:
        v5 = session.protocol_version == MQTT_5
        try:
            override = parse_security_property(pkt.properties) if self.config.enforcement else None
        except SecurityPropertyError:
            suback = Suback(pkt.packet_id, [RC_IMPLEMENTATION_SPECIFIC] * len(pkt.requests))
            self.send(session, suback)
            return suback
        codes = []
        for req in pkt.requests:
            try:
                validate_topic_filter(req.filter)
            except TopicError:
                codes.append(RC_TOPIC_FILTER_INVALID if v5 else RC_UNSPECIFIED)
                continue
            if req.filter.startswith("$share/"):
                codes.append(RC_SHARED_SUBS_NOT_SUPPORTED if v5 else RC_UNSPECIFIED)
                continue
            granted = min(req.qos, self.config.max_qos)
            self.subscriptions.subscribe(Subscription(session.client_id, req.filter, granted, override))
            codes.append(granted)
        suback = Suback(pkt.packet_id, codes)
        self.send(session, suback)
        return suback

    def handle_unsubscribe(self, session: ClientSession, pkt: Unsubscribe) -> Unsuback:
        codes = [
            RC_SUCCESS if self.subscriptions.unsubscribe(session.client_id, f) else RC_NO_SUBSCRIPTION_EXISTED
            for f in pkt.filters
        ]
        unsuback = Unsuback(pkt.packet_id, codes if session.protocol_version == MQTT_5 else [])
        self.send(session, unsuback)
        return unsuback

    def handle_publish(
        self, session: ClientSession, pkt: Publish, received_ns: int | None = None
    ) -> DispatchResult:
        if received_ns is None:
            received_ns = time.perf_counter_ns()
        try:
            validate_topic_name(pkt.topic)
        except TopicError as exc:
            raise ProtocolViolation(str(exc), RC_TOPIC_NAME_INVALID) from exc
        if pkt.qos > self.config.max_qos:
            raise ProtocolViolation(f"qos {pkt.qos} above maximum", RC_QOS_NOT_SUPPORTED)

        result = DispatchResult()
        publisher = session.profile
        if self.config.enforcement:
            try:
                flag = parse_security_property(pkt.properties)
            except SecurityPropertyError as exc:
                log.info("refusing publish from %s: %s", session.client_id, exc)
                if pkt.qos:
                    result.puback = Puback(pkt.packet_id, RC_IMPLEMENTATION_SPECIFIC)
                    self.send(session, result.puback)
                return result
            if flag is not None:
                publisher = publisher.with_flag(flag, FlagSource.EXPLICIT_MESSAGE)

        forwarded_props = [p for p in pkt.properties if p[0] not in _CONNECTION_SCOPED_PROPERTIES]
        measure = self.config.measure_forwarding
        for sub in self.subscriptions.match_subscribers(pkt.topic):
            target = self.sessions.get(sub.client_id)
            if target is None or target.closed:
                continue
            if self.config.enforcement:
                subscriber = target.profile
                if sub.override_flag is not None:
                    subscriber = subscriber.with_flag(sub.override_flag, FlagSource.EXPLICIT_MESSAGE)
                decision = decide_delivery(publisher, subscriber)
                if not decision.delivered:
                    self.denied_count += 1
                    result.denied.append((target.client_id, decision.deny_reason))
                    self.audit.write(AuditEvent(
                        session.client_id, target.client_id, pkt.topic, decision, publisher, subscriber,
                    ))
                    continue
                if self.config.audit_deliveries:
                    self.audit.write(AuditEvent(
                        session.client_id, target.client_id, pkt.topic, DELIVER, publisher, subscriber,
                    ))
            qos = min(pkt.qos, sub.granted_qos)
            self.send(target, Publish(
                topic=pkt.topic,
                payload=pkt.payload,
                qos=qos,
                packet_id=target.next_packet_id() if qos else None,
                properties=forwarded_props if target.protocol_version == MQTT_5 else [],
            ))
            if measure:
                self.forward_samples.append((time.perf_counter_ns() - received_ns) / 1e6)
            self.delivered_count += 1
            result.delivered.append(target.client_id)

        if pkt.qos:
            result.puback = Puback(pkt.packet_id, RC_SUCCESS)
            self.send(session, result.puback)
        return result

    def handle_disconnect(self, session: ClientSession) -> None:
        self.drop_session(session)

    def handle_packet(
        self, session: ClientSession, pkt: codec.Packet, received_ns: int | None = None
    ) -> None:
        """Route one packet from an established session."""
        if isinstance(pkt, Publish):
            self.handle_publish(session, pkt, received_ns)
        elif isinstance(pkt, Puback):
            pass  # no redelivery state is kept for QoS 1 deliveries
        elif isinstance(pkt, Subscribe):
            self.handle_subscribe(session, pkt)
        elif isinstance(pkt, Unsubscribe):
            self.handle_unsubscribe(session, pkt)
        elif isinstance(pkt, Pingreq):
            self.send(session, Pingresp())
        elif isinstance(pkt, Disconnect):
            self.handle_disconnect(session)
        elif isinstance(pkt, Connect):
            raise ProtocolViolation("second CONNECT on one connection")
        else:
            raise ProtocolViolation(f"unexpected {type(pkt).__name__} from client")

    # ------------------------------------------------------------------
    # Network glue
    # ------------------------------------------------------------------

    async def serve_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, info: ConnectionInfo
    ) -> None:
        outbound = StreamOutbound(writer)
        session: ClientSession | None = None
        buf = bytearray()
        try:
            while session is None or not session.closed:
                if session is None:
                    timeout = self.config.connect_timeout_s
                elif session.keep_alive_s:
                    timeout = session.keep_alive_s * KEEPALIVE_GRACE
                else:
                    timeout = None
                try:
                    data = await asyncio.wait_for(reader.read(65536), timeout)
                except asyncio.TimeoutError:
                    if session is not None:
                        log.info("keepalive expired for %s", session.client_id)
                        self.drop_session(session, RC_KEEP_ALIVE_TIMEOUT)
                    return
                received_ns = time.perf_counter_ns()
                if not data:
                    return
                buf += data
                while buf and (session is None or not session.closed):
                    version = session.protocol_version if session else MQTT_5
                    try:
                        pkt, used = codec.decode_packet(buf, version)
                    except IncompleteError:
                        break
                    except UnsupportedProtocolError as exc:
                        if session is None:
                            code = V4_UNACCEPTABLE_VERSION if exc.protocol_version < MQTT_5 else exc.reason_code
                            writer.write(codec.encode_packet(Connack(code), MQTT_5 if code > 0x7F else 4))
                        return
                    except MalformedError as exc:
                        log.info("malformed packet from %s: %s", info.peer, exc)
                        if session is not None:
                            self.drop_session(session, exc.reason_code)
                        return
                    del buf[:used]
                    if session is None:
                        if not isinstance(pkt, Connect):
                            log.info("first packet from %s is not CONNECT", info.peer)
                            return
                        _, session = self.handle_connect(info, pkt, outbound)
                        if session is None:
                            return
                        continue
                    try:
                        self.handle_packet(session, pkt, received_ns)
                    except ProtocolViolation as exc:
                        log.info("protocol violation by %s: %s", session.client_id, exc)
                        self.drop_session(session, exc.reason_code)
                        return
                await writer.drain()
        except (ConnectionError, OSError) as exc:
            log.debug("connection error from %s: %s", info.peer, exc)
        finally:
            if session is not None:
                self.drop_session(session)
            writer.close()

    async def start(self) -> None:
        self.listeners = await start_listeners(self.config.listeners, self.serve_connection)

    async def stop(self) -> None:
        for session in list(self.sessions.values()):
            self.drop_session(session)
        for listener in self.listeners:
            await listener.close()
        self.listeners = []
        self.audit.close()

    def port(self, kind: ListenerKind) -> int:
        for listener in self.listeners:
            if listener.config.kind is kind:
                return listener.port
        raise KeyError(kind)

    @property
    def handshake_failures(self) -> int:
        return sum(listener.handshake_failures for listener in self.listeners)
