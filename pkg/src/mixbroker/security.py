"""Security levels, enforcement intent and the forwarding decision.

A client's connection gives it a :class:`SecurityLevel`. Its
:class:`EnforcementFlag` says whether it wants the broker to hold every
counterparty to that level (``ENFORCE``) or waive it (``RELAX``). The broker
forwards a message only when each side's connection meets what the other
side requires.

The decision engine only ever compares levels, so new levels can be slotted
into :class:`SecurityLevel` without touching :func:`decide_delivery`.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from enum import Enum, IntEnum

from .codec import Property, PropertyId, UserProperty

SECURITY_PROPERTY_KEY = "s"
ENFORCE_VALUE = "1"
RELAX_VALUE = "0"


class SecurityLevel(IntEnum):
    NON_SECURED = 0
    SECURED = 1


class EnforcementFlag(Enum):
    ENFORCE = "enforce"
    RELAX = "relax"


class FlagSource(Enum):
    EXPLICIT_CONNECT = "explicit-connect"
    EXPLICIT_MESSAGE = "explicit-message"
    INFERRED_LEGACY = "inferred-legacy"


class LegacyPolicy(Enum):
    """How to pick a flag for clients that never send one."""

    INFER_FROM_TRANSPORT = "infer-from-transport"
    ALWAYS_RELAXED = "always-relaxed"


class DenyReason(Enum):
    PUBLISHER_ENFORCES = "publisher-enforces"
    SUBSCRIBER_ENFORCES = "subscriber-enforces"


class SecurityPropertyError(ValueError):
    """The security user property carries a value other than "0" or "1"."""


@dataclass(frozen=True)
class ClientSecurityProfile:
    transport_level: SecurityLevel
    flag: EnforcementFlag
    flag_source: FlagSource
    required_level: SecurityLevel = field(init=False)

    def __post_init__(self) -> None:
        required = self.transport_level if self.flag is EnforcementFlag.ENFORCE else SecurityLevel.NON_SECURED
        object.__setattr__(self, "required_level", required)

    def with_flag(self, flag: EnforcementFlag, source: FlagSource) -> ClientSecurityProfile:
        """Override the flag; the transport level is a physical fact and stays."""
        return _interned_profile(self.transport_level, flag, source)


# Profiles are immutable and few; dispatch reuses them instead of building one
# per message.
@functools.lru_cache(maxsize=None)
def _interned_profile(
    level: SecurityLevel, flag: EnforcementFlag, source: FlagSource
) -> ClientSecurityProfile:
    return ClientSecurityProfile(level, flag, source)


@dataclass(frozen=True)
class DeliveryDecision:
    deny_reason: DenyReason | None = None

    @property
    def delivered(self) -> bool:
        return self.deny_reason is None

    def __str__(self) -> str:
        return "deliver" if self.delivered else f"deny:{self.deny_reason.value}"


DELIVER = DeliveryDecision()
DENY_PUBLISHER = DeliveryDecision(DenyReason.PUBLISHER_ENFORCES)
DENY_SUBSCRIBER = DeliveryDecision(DenyReason.SUBSCRIBER_ENFORCES)


def security_property(flag: EnforcementFlag) -> Property:
    """The user property a client sends to announce ``flag``."""
    value = ENFORCE_VALUE if flag is EnforcementFlag.ENFORCE else RELAX_VALUE
    return (PropertyId.USER_PROPERTY, UserProperty(SECURITY_PROPERTY_KEY, value))


def parse_security_property(properties: list[Property]) -> EnforcementFlag | None:
    """Find the first ``("s", ...)`` user property and map it to a flag.

    Other properties are skipped. Returns ``None`` when no such property is
    present.
    """
    for pid, value in properties:
        if pid != PropertyId.USER_PROPERTY or value[0] != SECURITY_PROPERTY_KEY:
            continue
        if value[1] == ENFORCE_VALUE:
            return EnforcementFlag.ENFORCE
        if value[1] == RELAX_VALUE:
            return EnforcementFlag.RELAX
        raise SecurityPropertyError(f"invalid security property value {value[1]!r}")
    return None


def derive_profile(
    transport_level: SecurityLevel,
    explicit: EnforcementFlag | None,
    policy: LegacyPolicy,
    *,
    source: FlagSource = FlagSource.EXPLICIT_CONNECT,
) -> ClientSecurityProfile:
    """Build a client's profile from its connection and optional declared flag."""
    if explicit is not None:
        return ClientSecurityProfile(transport_level, explicit, source)
    if policy is LegacyPolicy.INFER_FROM_TRANSPORT and transport_level > SecurityLevel.NON_SECURED:
        flag = EnforcementFlag.ENFORCE
    else:
        flag = EnforcementFlag.RELAX
    return ClientSecurityProfile(transport_level, flag, FlagSource.INFERRED_LEGACY)


def decide_delivery(
    publisher: ClientSecurityProfile, subscriber: ClientSecurityProfile
) -> DeliveryDecision:
    """Deliver iff each side's transport meets the other side's requirement.

    The publisher's requirement is checked first, so it is the reported
    reason when both are violated.
    """
    if subscriber.transport_level < publisher.required_level:
        return DENY_PUBLISHER
    if publisher.transport_level < subscriber.required_level:
        return DENY_SUBSCRIBER
    return DELIVER


@dataclass(frozen=True)
class TruthTableRow:
    publisher_level: SecurityLevel
    publisher_flag: EnforcementFlag
    subscriber_level: SecurityLevel
    subscriber_flag: EnforcementFlag
    decision: DeliveryDecision


def decision_truth_table() -> list[TruthTableRow]:
    """Every (level, flag) combination for both roles with its decision."""
    rows = []
    for pl, pf, sl, sf in itertools.product(SecurityLevel, EnforcementFlag, SecurityLevel, EnforcementFlag):
        pub = ClientSecurityProfile(pl, pf, FlagSource.EXPLICIT_CONNECT)
        sub = ClientSecurityProfile(sl, sf, FlagSource.EXPLICIT_CONNECT)
        rows.append(TruthTableRow(pl, pf, sl, sf, decide_delivery(pub, sub)))
    return rows
