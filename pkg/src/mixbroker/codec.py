"""Encoder and decoder for the MQTT v5 / v3.1.1 packet subset used by the broker.

All functions are pure: they take bytes or packet values and return new
values. Decoding distinguishes two failure classes:

* :class:`IncompleteError` - more bytes are needed; a framer should buffer
  and retry.
* :class:`MalformedError` - a protocol violation; the connection must close.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Union

MAX_VARINT = 268_435_455
MAX_STRING = 65_535

PROTOCOL_NAME = "MQTT"
MQTT_311 = 4
MQTT_5 = 5


class CodecError(Exception):
    """Base class for codec failures."""


class IncompleteError(CodecError):
    """The buffer ends before the packet does."""


class MalformedError(CodecError):
    """The bytes violate the protocol.

    ``reason_code`` is the MQTT v5 reason code a broker should report.
    """

    def __init__(self, message: str, reason_code: int = 0x81) -> None:
        super().__init__(message)
        self.reason_code = reason_code


class UnsupportedProtocolError(MalformedError):
    """CONNECT names a protocol or level the broker does not speak."""

    def __init__(self, name: str, version: int) -> None:
        super().__init__(f"unsupported protocol {name!r} level {version}", 0x84)
        self.protocol_name = name
        self.protocol_version = version


class PacketValidationError(CodecError, ValueError):
    """A packet value cannot be encoded (e.g. QoS 1 without a packet id)."""


class PacketType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    UNSUBSCRIBE = 10
    UNSUBACK = 11
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14
    AUTH = 15


class PropertyId(IntEnum):
    PAYLOAD_FORMAT_INDICATOR = 0x01
    MESSAGE_EXPIRY_INTERVAL = 0x02
    CONTENT_TYPE = 0x03
    RESPONSE_TOPIC = 0x08
    CORRELATION_DATA = 0x09
    SUBSCRIPTION_IDENTIFIER = 0x0B
    SESSION_EXPIRY_INTERVAL = 0x11
    ASSIGNED_CLIENT_IDENTIFIER = 0x12
    SERVER_KEEP_ALIVE = 0x13
    AUTHENTICATION_METHOD = 0x15
    AUTHENTICATION_DATA = 0x16
    REQUEST_PROBLEM_INFORMATION = 0x17
    WILL_DELAY_INTERVAL = 0x18
    REQUEST_RESPONSE_INFORMATION = 0x19
    RESPONSE_INFORMATION = 0x1A
    SERVER_REFERENCE = 0x1C
    REASON_STRING = 0x1F
    RECEIVE_MAXIMUM = 0x21
    TOPIC_ALIAS_MAXIMUM = 0x22
    TOPIC_ALIAS = 0x23
    MAXIMUM_QOS = 0x24
    RETAIN_AVAILABLE = 0x25
    USER_PROPERTY = 0x26
    MAXIMUM_PACKET_SIZE = 0x27
    WILDCARD_SUBSCRIPTION_AVAILABLE = 0x28
    SUBSCRIPTION_IDENTIFIER_AVAILABLE = 0x29
    SHARED_SUBSCRIPTION_AVAILABLE = 0x2A


class UserProperty(NamedTuple):
    key: str
    value: str


PropertyValue = Union[int, str, bytes, UserProperty]
Property = tuple[int, PropertyValue]

# Wire type of every property defined by MQTT v5. The broker ignores most of
# them, but they must be decodable to find the next property's offset.
_BYTE, _U16, _U32, _VARINT, _STRING, _BINARY, _PAIR = range(7)

PROPERTY_TYPES: dict[int, int] = {
    PropertyId.PAYLOAD_FORMAT_INDICATOR: _BYTE,
    PropertyId.MESSAGE_EXPIRY_INTERVAL: _U32,
    PropertyId.CONTENT_TYPE: _STRING,
    PropertyId.RESPONSE_TOPIC: _STRING,
    PropertyId.CORRELATION_DATA: _BINARY,
    PropertyId.SUBSCRIPTION_IDENTIFIER: _VARINT,
    PropertyId.SESSION_EXPIRY_INTERVAL: _U32,
    PropertyId.ASSIGNED_CLIENT_IDENTIFIER: _STRING,
    PropertyId.SERVER_KEEP_ALIVE: _U16,
    PropertyId.AUTHENTICATION_METHOD: _STRING,
    PropertyId.AUTHENTICATION_DATA: _BINARY,
    PropertyId.REQUEST_PROBLEM_INFORMATION: _BYTE,
    PropertyId.WILL_DELAY_INTERVAL: _U32,
    PropertyId.REQUEST_RESPONSE_INFORMATION: _BYTE,
    PropertyId.RESPONSE_INFORMATION: _STRING,
    PropertyId.SERVER_REFERENCE: _STRING,
    PropertyId.REASON_STRING: _STRING,
    PropertyId.RECEIVE_MAXIMUM: _U16,
    PropertyId.TOPIC_ALIAS_MAXIMUM: _U16,
    PropertyId.TOPIC_ALIAS: _U16,
    PropertyId.MAXIMUM_QOS: _BYTE,
    PropertyId.RETAIN_AVAILABLE: _BYTE,
    PropertyId.USER_PROPERTY: _PAIR,
    PropertyId.MAXIMUM_PACKET_SIZE: _U32,
    PropertyId.WILDCARD_SUBSCRIPTION_AVAILABLE: _BYTE,
    PropertyId.SUBSCRIPTION_IDENTIFIER_AVAILABLE: _BYTE,
    PropertyId.SHARED_SUBSCRIPTION_AVAILABLE: _BYTE,
}


# --------------------------------------------------------------------------
# Packet values
# --------------------------------------------------------------------------


@dataclass
class Will:
    topic: str
    payload: bytes
    qos: int = 0
    retain: bool = False
    properties: list[Property] = field(default_factory=list)


@dataclass
class Connect:
    client_id: str
    protocol_version: int = MQTT_5
    clean_start: bool = True
    keep_alive_s: int = 60
    properties: list[Property] = field(default_factory=list)
    username: str | None = None
    password: bytes | None = None
    will: Will | None = None


@dataclass
class Connack:
    reason_code: int = 0
    session_present: bool = False
    properties: list[Property] = field(default_factory=list)


@dataclass
class Publish:
    topic: str
    payload: bytes = b""
    qos: int = 0
    packet_id: int | None = None
    properties: list[Property] = field(default_factory=list)
    retain: bool = False
    dup: bool = False


@dataclass
class Puback:
    packet_id: int
    reason_code: int = 0
    properties: list[Property] = field(default_factory=list)


class SubscribeRequest(NamedTuple):
    """One topic filter entry of a SUBSCRIBE.

    ``options`` holds the v5 subscription option bits above the QoS field
    (no-local, retain-as-published, retain handling), already shifted into
    place; the broker ignores them.
    """

    filter: str
    qos: int
    options: int = 0


@dataclass
class Subscribe:
    packet_id: int
    requests: list[SubscribeRequest]
    properties: list[Property] = field(default_factory=list)


@dataclass
class Suback:
    packet_id: int
    reason_codes: list[int]
    properties: list[Property] = field(default_factory=list)


@dataclass
class Unsubscribe:
    packet_id: int
    filters: list[str]
    properties: list[Property] = field(default_factory=list)


@dataclass
class Unsuback:
    packet_id: int
    reason_codes: list[int] = field(default_factory=list)
    properties: list[Property] = field(default_factory=list)


@dataclass
class Pingreq:
    pass


@dataclass
class Pingresp:
    pass


@dataclass
class Disconnect:
    reason_code: int = 0
    properties: list[Property] = field(default_factory=list)


Packet = Union[
    Connect, Connack, Publish, Puback, Subscribe, Suback,
    Unsubscribe, Unsuback, Pingreq, Pingresp, Disconnect,
]


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


def encode_varint(value: int) -> bytes:
    """Encode ``value`` as an MQTT variable byte integer (1-4 bytes)."""
    if not 0 <= value <= MAX_VARINT:
        raise ValueError(f"variable byte integer out of range: {value}")
    out = bytearray()
    while True:
        digit = value & 0x7F
        value >>= 7
        if value:
            out.append(digit | 0x80)
        else:
            out.append(digit)
            return bytes(out)


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Decode a variable byte integer starting at ``offset``.

    Returns ``(value, bytes_consumed)``. Raises :class:`IncompleteError` if
    the buffer ends mid-integer and :class:`MalformedError` if a fourth byte
    still carries the continuation bit.
    """
    value = 0
    for i in range(4):
        if offset + i >= len(data):
            raise IncompleteError("truncated variable byte integer")
        byte = data[offset + i]
        value |= (byte & 0x7F) << (7 * i)
        if not byte & 0x80:
            return value, i + 1
    raise MalformedError("variable byte integer longer than 4 bytes")


def _check_string(s: str) -> bytes:
    if "\x00" in s:
        raise PacketValidationError("string contains U+0000")
    try:
        raw = s.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise PacketValidationError("string is not valid UTF-8") from exc
    if len(raw) > MAX_STRING:
        raise PacketValidationError(f"string too long: {len(raw)} bytes")
    return raw


def encode_string(s: str) -> bytes:
    raw = _check_string(s)
    return len(raw).to_bytes(2, "big") + raw


def encode_binary(b: bytes) -> bytes:
    if len(b) > MAX_STRING:
        raise PacketValidationError(f"binary data too long: {len(b)} bytes")
    return len(b).to_bytes(2, "big") + bytes(b)


def encode_user_property(prop: UserProperty | tuple[str, str]) -> bytes:
    """Encode a user property: id 0x26 followed by two length-prefixed strings."""
    key, value = prop
    try:
        return bytes([PropertyId.USER_PROPERTY]) + encode_string(key) + encode_string(value)
    except PacketValidationError as exc:
        raise ValueError(str(exc)) from exc


class _Reader:
    """Cursor over one packet body. Running off the end is malformed, since
    the fixed header already promised this many bytes."""

    __slots__ = ("data", "pos", "end")

    def __init__(self, data: bytes, pos: int, end: int) -> None:
        self.data = data
        self.pos = pos
        self.end = end

    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise MalformedError("field runs past the end of the packet")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return bytes(chunk)

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def varint(self) -> int:
        try:
            value, used = decode_varint(self.data[:self.end], self.pos)
        except IncompleteError as exc:
            raise MalformedError("variable byte integer runs past the packet") from exc
        self.pos += used
        return value

    def string(self) -> str:
        raw = self.take(self.u16())
        try:
            s = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedError("invalid UTF-8 string") from exc
        if "\x00" in s:
            raise MalformedError("string contains U+0000")
        return s

    def binary(self) -> bytes:
        return self.take(self.u16())


# --------------------------------------------------------------------------
# Properties
# --------------------------------------------------------------------------


def _property_types(security_level_property: int | None) -> dict[int, int]:
    if security_level_property is None:
        return PROPERTY_TYPES
    if security_level_property in PROPERTY_TYPES:
        raise ValueError(f"property id {security_level_property:#x} is already assigned")
    return {**PROPERTY_TYPES, security_level_property: _BYTE}


def encode_properties(
    properties: list[Property], *, security_level_property: int | None = None
) -> bytes:
    """Encode a property list including its varint length prefix."""
    types = _property_types(security_level_property)
    body = bytearray()
    for pid, value in properties:
        kind = types.get(pid)
        if kind is None:
            raise PacketValidationError(f"unknown property id {pid:#x}")
        body += encode_varint(pid)
        try:
            if kind == _BYTE:
                body += int(value).to_bytes(1, "big")
            elif kind == _U16:
                body += int(value).to_bytes(2, "big")
            elif kind == _U32:
                body += int(value).to_bytes(4, "big")
            elif kind == _VARINT:
                body += encode_varint(int(value))
            elif kind == _STRING:
                body += encode_string(value)
            elif kind == _BINARY:
                body += encode_binary(value)
            else:
                key, val = value
                body += encode_string(key) + encode_string(val)
        except (OverflowError, TypeError, ValueError) as exc:
            if isinstance(exc, PacketValidationError):
                raise
            raise PacketValidationError(f"bad value for property {pid:#x}: {value!r}") from exc
    return encode_varint(len(body)) + bytes(body)


def _decode_properties(r: _Reader, types: dict[int, int]) -> list[Property]:
    length = r.varint()
    if length > r.remaining():
        raise MalformedError("property length exceeds packet")
    end = r.pos + length
    props: list[Property] = []
    while r.pos < end:
        pid = r.varint()
        kind = types.get(pid)
        if kind is None:
            raise MalformedError(f"unknown property id {pid:#x}")
        value: PropertyValue
        if kind == _BYTE:
            value = r.u8()
        elif kind == _U16:
            value = r.u16()
        elif kind == _U32:
            value = r.u32()
        elif kind == _VARINT:
            value = r.varint()
        elif kind == _STRING:
            value = r.string()
        elif kind == _BINARY:
            value = r.binary()
        else:
            value = UserProperty(r.string(), r.string())
        props.append((pid, value))
    if r.pos != end:
        raise MalformedError("property overruns its declared length")
    return props


def user_properties(properties: list[Property]) -> list[UserProperty]:
    """Return the user properties from a property list, in order."""
    return [UserProperty(*v) for pid, v in properties if pid == PropertyId.USER_PROPERTY]


# --------------------------------------------------------------------------
# Packet encoding
# --------------------------------------------------------------------------


def _check_packet_id(packet_id: int | None) -> bytes:
    if packet_id is None or not 1 <= packet_id <= 0xFFFF:
        raise PacketValidationError(f"invalid packet id: {packet_id!r}")
    return packet_id.to_bytes(2, "big")


def _fixed(ptype: PacketType, flags: int, body: bytes) -> bytes:
    if len(body) > MAX_VARINT:
        raise PacketValidationError("packet too large")
    return bytes([(ptype << 4) | flags]) + encode_varint(len(body)) + body


def encode_packet(
    packet: Packet,
    protocol_version: int = MQTT_5,
    *,
    security_level_property: int | None = None,
) -> bytes:
    """Encode ``packet`` to wire bytes.

    ``protocol_version`` selects the v5 or v3.1.1 layout for every packet
    except CONNECT, which carries its own version. v3.1.1 packets cannot
    carry properties.
    """
    if isinstance(packet, Connect):
        protocol_version = packet.protocol_version
    if protocol_version not in (MQTT_311, MQTT_5):
        raise PacketValidationError(f"unsupported protocol version {protocol_version}")
    v5 = protocol_version == MQTT_5

    def props(p: list[Property]) -> bytes:
        if v5:
            return encode_properties(p, security_level_property=security_level_property)
        if p:
            raise PacketValidationError("MQTT 3.1.1 packets cannot carry properties")
        return b""

    if isinstance(packet, Connect):
        flags = 0
        payload = encode_string(packet.client_id)
        if packet.clean_start:
            flags |= 0x02
        if packet.will is not None:
            w = packet.will
            if w.qos not in (0, 1, 2):
                raise PacketValidationError(f"invalid will qos {w.qos}")
            flags |= 0x04 | (w.qos << 3) | (0x20 if w.retain else 0)
            payload += props(w.properties) + encode_string(w.topic) + encode_binary(w.payload)
        if packet.username is not None:
            flags |= 0x80
            payload += encode_string(packet.username)
        if packet.password is not None:
            if packet.username is None and not v5:
                raise PacketValidationError("MQTT 3.1.1 requires a username with a password")
            flags |= 0x40
            payload += encode_binary(packet.password)
        if not 0 <= packet.keep_alive_s <= 0xFFFF:
            raise PacketValidationError(f"invalid keep alive {packet.keep_alive_s}")
        body = (
            encode_string(PROTOCOL_NAME)
            + bytes([protocol_version, flags])
            + packet.keep_alive_s.to_bytes(2, "big")
            + props(packet.properties)
            + payload
        )
        return _fixed(PacketType.CONNECT, 0, body)

    if isinstance(packet, Connack):
        body = bytes([1 if packet.session_present else 0, packet.reason_code & 0xFF])
        return _fixed(PacketType.CONNACK, 0, body + props(packet.properties))

    if isinstance(packet, Publish):
        if packet.qos not in (0, 1):
            raise PacketValidationError(f"unsupported publish qos {packet.qos}")
        if packet.dup and packet.qos == 0:
            raise PacketValidationError("DUP must be 0 for QoS 0")
        body = encode_string(packet.topic)
        if packet.qos:
            body += _check_packet_id(packet.packet_id)
        elif packet.packet_id is not None:
            raise PacketValidationError("QoS 0 publish must not carry a packet id")
        body += props(packet.properties) + bytes(packet.payload)
        flags = (0x08 if packet.dup else 0) | (packet.qos << 1) | (0x01 if packet.retain else 0)
        return _fixed(PacketType.PUBLISH, flags, body)

    if isinstance(packet, Puback):
        body = _check_packet_id(packet.packet_id)
        if v5 and (packet.reason_code or packet.properties):
            body += bytes([packet.reason_code])
            if packet.properties:
                body += props(packet.properties)
        elif not v5 and packet.reason_code:
            raise PacketValidationError("MQTT 3.1.1 PUBACK has no reason code")
        return _fixed(PacketType.PUBACK, 0, body)

    if isinstance(packet, Subscribe):
        if not packet.requests:
            raise PacketValidationError("SUBSCRIBE needs at least one filter")
        body = _check_packet_id(packet.packet_id) + props(packet.properties)
        for req in packet.requests:
            if not 0 <= req.qos <= 2:
                raise PacketValidationError(f"invalid requested qos {req.qos}")
            if req.options & ~0x3C or (not v5 and req.options):
                raise PacketValidationError(f"invalid subscription options {req.options:#x}")
            body += encode_string(req.filter) + bytes([req.qos | req.options])
        return _fixed(PacketType.SUBSCRIBE, 0x02, body)

    if isinstance(packet, Suback):
        if not packet.reason_codes:
            raise PacketValidationError("SUBACK needs at least one reason code")
        body = _check_packet_id(packet.packet_id) + props(packet.properties)
        return _fixed(PacketType.SUBACK, 0, body + bytes(packet.reason_codes))

    if isinstance(packet, Unsubscribe):
        if not packet.filters:
            raise PacketValidationError("UNSUBSCRIBE needs at least one filter")
        body = _check_packet_id(packet.packet_id) + props(packet.properties)
        for f in packet.filters:
            body += encode_string(f)
        return _fixed(PacketType.UNSUBSCRIBE, 0x02, body)

    if isinstance(packet, Unsuback):
        body = _check_packet_id(packet.packet_id)
        if v5:
            if not packet.reason_codes:
                raise PacketValidationError("v5 UNSUBACK needs at least one reason code")
            body += props(packet.properties) + bytes(packet.reason_codes)
        elif packet.reason_codes:
            raise PacketValidationError("MQTT 3.1.1 UNSUBACK has no reason codes")
        return _fixed(PacketType.UNSUBACK, 0, body)

    if isinstance(packet, Pingreq):
        return _fixed(PacketType.PINGREQ, 0, b"")

    if isinstance(packet, Pingresp):
        return _fixed(PacketType.PINGRESP, 0, b"")

    if isinstance(packet, Disconnect):
        body = b""
        if v5 and (packet.reason_code or packet.properties):
            body = bytes([packet.reason_code])
            if packet.properties:
                body += props(packet.properties)
        elif not v5 and packet.reason_code:
            raise PacketValidationError("MQTT 3.1.1 DISCONNECT has no reason code")
        return _fixed(PacketType.DISCONNECT, 0, body)

    raise PacketValidationError(f"not a packet: {packet!r}")


# --------------------------------------------------------------------------
# Packet decoding
# --------------------------------------------------------------------------

_FIXED_FLAGS = {
    PacketType.CONNECT: 0,
    PacketType.CONNACK: 0,
    PacketType.PUBACK: 0,
    PacketType.SUBSCRIBE: 2,
    PacketType.SUBACK: 0,
    PacketType.UNSUBSCRIBE: 2,
    PacketType.UNSUBACK: 0,
    PacketType.PINGREQ: 0,
    PacketType.PINGRESP: 0,
    PacketType.DISCONNECT: 0,
}


def peek_packet_length(data: bytes) -> int:
    """Return the total length of the first packet in ``data``.

    Raises :class:`IncompleteError` if the fixed header itself is truncated.
    """
    if not data:
        raise IncompleteError("empty buffer")
    remaining, used = decode_varint(data, 1)
    return 1 + used + remaining


def decode_packet(
    data: bytes,
    protocol_version: int = MQTT_5,
    *,
    security_level_property: int | None = None,
) -> tuple[Packet, int]:
    """Decode the first packet in ``data``.

    Returns ``(packet, bytes_consumed)``; trailing bytes are left for the
    caller. ``protocol_version`` is the session's negotiated version and is
    ignored for CONNECT.
    """
    total = peek_packet_length(data)
    if total > len(data):
        raise IncompleteError(f"need {total} bytes, have {len(data)}")
    header = data[0]
    try:
        ptype = PacketType(header >> 4)
    except ValueError:
        raise MalformedError("reserved packet type 0") from None
    flags = header & 0x0F
    body_start = 1 + _len_width(data)
    r = _Reader(data, body_start, total)
    types = _property_types(security_level_property)

    if ptype in (PacketType.PUBREC, PacketType.PUBREL, PacketType.PUBCOMP):
        raise MalformedError(f"{ptype.name} is not supported (QoS 2)", 0x9B)
    if ptype == PacketType.AUTH:
        raise MalformedError("AUTH is not supported", 0x8C)
    if ptype != PacketType.PUBLISH and flags != _FIXED_FLAGS[ptype]:
        raise MalformedError(f"invalid fixed header flags for {ptype.name}")

    if ptype == PacketType.CONNECT:
        packet: Packet = _decode_connect(r, types)
    else:
        if protocol_version not in (MQTT_311, MQTT_5):
            raise ValueError(f"unsupported protocol version {protocol_version}")
        packet = _decode_body(ptype, flags, r, protocol_version == MQTT_5, types)

    if r.pos != total:
        raise MalformedError(f"{ptype.name} has {total - r.pos} unexpected trailing bytes")
    return packet, total


def _len_width(data: bytes) -> int:
    return decode_varint(data, 1)[1]


def _decode_connect(r: _Reader, types: dict[int, int]) -> Connect:
    name = r.string()
    version = r.u8()
    if name != PROTOCOL_NAME or version not in (MQTT_311, MQTT_5):
        raise UnsupportedProtocolError(name, version)
    v5 = version == MQTT_5
    flags = r.u8()
    if flags & 0x01:
        raise MalformedError("reserved CONNECT flag set")
    keep_alive = r.u16()
    properties = _decode_properties(r, types) if v5 else []
    client_id = r.string()
    will = None
    if flags & 0x04:
        will_qos = (flags >> 3) & 0x03
        if will_qos == 3:
            raise MalformedError("will qos 3")
        will_props = _decode_properties(r, types) if v5 else []
        will = Will(r.string(), r.binary(), will_qos, bool(flags & 0x20), will_props)
    elif flags & 0x38:
        raise MalformedError("will qos/retain set without will flag")
    username = r.string() if flags & 0x80 else None
    if flags & 0x40:
        if not v5 and username is None:
            raise MalformedError("password without username")
        password = r.binary()
    else:
        password = None
    return Connect(
        client_id=client_id,
        protocol_version=version,
        clean_start=bool(flags & 0x02),
        keep_alive_s=keep_alive,
        properties=properties,
        username=username,
        password=password,
        will=will,
    )


def _decode_body(
    ptype: PacketType, flags: int, r: _Reader, v5: bool, types: dict[int, int]
) -> Packet:
    def props() -> list[Property]:
        return _decode_properties(r, types) if v5 else []

    def packet_id() -> int:
        pid = r.u16()
        if pid == 0:
            raise MalformedError("packet id 0")
        return pid

    if ptype == PacketType.CONNACK:
        ack_flags = r.u8()
        if ack_flags & 0xFE:
            raise MalformedError("reserved CONNACK flags set")
        reason = r.u8()
        return Connack(reason, bool(ack_flags & 1), props())

    if ptype == PacketType.PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos == 3:
            raise MalformedError("publish qos 3")
        if qos == 2:
            raise MalformedError("QoS 2 is not supported", 0x9B)
        dup = bool(flags & 0x08)
        if dup and qos == 0:
            raise MalformedError("DUP set on QoS 0 publish")
        topic = r.string()
        pid = packet_id() if qos else None
        properties = props()
        return Publish(topic, r.take(r.remaining()), qos, pid, properties, bool(flags & 1), dup)

    if ptype == PacketType.PUBACK:
        pid = packet_id()
        reason, properties = 0, []
        if v5 and r.remaining():
            reason = r.u8()
            if r.remaining():
                properties = props()
        return Puback(pid, reason, properties)

    if ptype == PacketType.SUBSCRIBE:
        pid = packet_id()
        properties = props()
        requests = []
        while r.remaining():
            topic_filter = r.string()
            opts = r.u8()
            if opts & 0xC0 or (not v5 and opts & 0xFC):
                raise MalformedError("reserved subscription option bits set")
            if opts & 0x03 == 3:
                raise MalformedError("requested qos 3")
            if (opts >> 4) & 0x03 == 3:
                raise MalformedError("retain handling 3")
            requests.append(SubscribeRequest(topic_filter, opts & 0x03, opts & 0x3C))
        if not requests:
            raise MalformedError("SUBSCRIBE without filters")
        return Subscribe(pid, requests, properties)

    if ptype == PacketType.SUBACK:
        pid = packet_id()
        properties = props()
        codes = list(r.take(r.remaining()))
        if not codes:
            raise MalformedError("SUBACK without reason codes")
        return Suback(pid, codes, properties)

    if ptype == PacketType.UNSUBSCRIBE:
        pid = packet_id()
        properties = props()
        filters = []
        while r.remaining():
            filters.append(r.string())
        if not filters:
            raise MalformedError("UNSUBSCRIBE without filters")
        return Unsubscribe(pid, filters, properties)

    if ptype == PacketType.UNSUBACK:
        pid = packet_id()
        if not v5:
            return Unsuback(pid)
        properties = props()
        codes = list(r.take(r.remaining()))
        if not codes:
            raise MalformedError("UNSUBACK without reason codes")
        return Unsuback(pid, codes, properties)

    if ptype == PacketType.PINGREQ:
        return Pingreq()

    if ptype == PacketType.PINGRESP:
        return Pingresp()

    # DISCONNECT
    reason, properties = 0, []
    if v5 and r.remaining():
        reason = r.u8()
        if r.remaining():
            properties = props()
    return Disconnect(reason, properties)


def iter_packets(
    data: bytes, protocol_version: int = MQTT_5
) -> tuple[list[Packet], bytes]:
    """Split ``data`` into complete packets; return them and the unconsumed tail."""
    packets = []
    pos = 0
    view = memoryview(data)
    while pos < len(data):
        try:
            packet, used = decode_packet(view[pos:], protocol_version)
        except IncompleteError:
            break
        packets.append(packet)
        pos += used
    return packets, bytes(data[pos:])
