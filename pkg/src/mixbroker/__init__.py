"""Mixed-mode MQTT broker that enforces client security levels beyond the broker."""

from .broker import Broker, BrokerConfig, ClientSession, DispatchResult
from .runner import BrokerThread
from .security import (
    ClientSecurityProfile,
    DeliveryDecision,
    DenyReason,
    EnforcementFlag,
    FlagSource,
    LegacyPolicy,
    SecurityLevel,
    decide_delivery,
    derive_profile,
    parse_security_property,
)
from .transport import ConnectionInfo, ListenerConfig, ListenerKind

__version__ = "0.1.0"

__all__ = [
    "Broker", "BrokerConfig", "BrokerThread", "ClientSecurityProfile", "ClientSession",
    "ConnectionInfo", "DeliveryDecision", "DenyReason", "DispatchResult", "EnforcementFlag",
    "FlagSource", "LegacyPolicy", "ListenerConfig", "ListenerKind", "SecurityLevel",
    "decide_delivery", "derive_profile", "parse_security_property",
]
