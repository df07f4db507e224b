"""INI-style broker configuration file.

Example::

    [broker]
    legacy_policy = infer-from-transport   ; or always-relaxed
    max_qos = 1
    audit_log = audit.jsonl                ; omit to disable auditing
    audit_deliveries = false
    session_limit = 10000
    enforcement = true
    measure_forwarding = false

    [listener:plain]
    kind = plain
    host = 0.0.0.0
    port = 1883

    [listener:tls]
    kind = tls
    host = 0.0.0.0
    port = 8883
    certfile = server.crt
    keyfile = server.key
    min_tls_version = TLSv1.2
    ; ciphers = ECDHE+AESGCM
    ; client_cafile = clients-ca.pem

Every ``[listener:NAME]`` section adds one listener. Relative paths resolve
against the config file's directory.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .broker import BrokerConfig
from .security import LegacyPolicy
from .transport import ListenerConfig, ListenerKind


class ConfigError(ValueError):
    pass


_BROKER_KEYS = {
    "legacy_policy", "max_qos", "audit_log", "audit_deliveries",
    "session_limit", "enforcement", "measure_forwarding", "outbound_buffer_limit",
}
_LISTENER_KEYS = {"kind", "host", "port", "certfile", "keyfile", "min_tls_version", "ciphers", "client_cafile"}


def _resolve(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def parse_config(text: str, base_dir: str | Path = ".") -> BrokerConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    base = Path(base_dir)

    listeners = []
    for name in parser.sections():
        if not name.startswith("listener:"):
            if name != "broker":
                raise ConfigError(f"unknown section [{name}]")
            continue
        sec = parser[name]
        unknown = set(sec) - _LISTENER_KEYS
        if unknown:
            raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
        try:
            kind = ListenerKind(sec.get("kind", "plain"))
            listeners.append(ListenerConfig(
                kind=kind,
                host=sec.get("host", "127.0.0.1"),
                port=sec.getint("port", fallback=None),
                certfile=_resolve(base, sec.get("certfile")),
                keyfile=_resolve(base, sec.get("keyfile")),
                min_tls_version=sec.get("min_tls_version", "TLSv1.2"),
                ciphers=sec.get("ciphers"),
                client_cafile=_resolve(base, sec.get("client_cafile")),
            ))
        except ValueError as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc

    if not parser.has_section("broker"):
        parser.add_section("broker")
    b = parser["broker"]
    unknown = set(b) - _BROKER_KEYS
    if unknown:
        raise ConfigError(f"[broker]: unknown keys {sorted(unknown)}")
    try:
        return BrokerConfig(
            listeners=listeners,
            legacy_policy=LegacyPolicy(b.get("legacy_policy", LegacyPolicy.INFER_FROM_TRANSPORT.value)),
            max_qos=b.getint("max_qos", 1),
            audit_log_path=_resolve(base, b.get("audit_log")),
            audit_deliveries=b.getboolean("audit_deliveries", False),
            session_limit=b.getint("session_limit", 10_000),
            enforcement=b.getboolean("enforcement", True),
            measure_forwarding=b.getboolean("measure_forwarding", False),
            outbound_buffer_limit=b.getint("outbound_buffer_limit", 4 * 2**20),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> BrokerConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)
