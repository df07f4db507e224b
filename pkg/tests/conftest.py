import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mixbroker import codec
from mixbroker.broker import Broker, BrokerConfig
from mixbroker.client import MQTTClient, client_ssl_context
from mixbroker.runner import BrokerThread
from mixbroker.security import SecurityLevel
from mixbroker.transport import ConnectionInfo, ListenerConfig, ListenerKind, generate_self_signed_cert


class MemoryOutbound:
    """Collects bytes a broker writes to one client."""

    def __init__(self):
        self.data = bytearray()
        self.closed = False

    def write(self, data):
        self.data += data

    def close(self):
        self.closed = True

    def buffered(self):
        return 0

    def packets(self, version=5):
        packets, rest = codec.iter_packets(bytes(self.data), version)
        assert not rest
        return packets

    def publishes(self, version=5):
        return [p for p in self.packets(version) if isinstance(p, codec.Publish)]

    def clear(self):
        self.data.clear()


def conn_info(level: SecurityLevel) -> ConnectionInfo:
    kind = ListenerKind.TLS if level == SecurityLevel.SECURED else ListenerKind.PLAIN
    return ConnectionInfo(level, ("127.0.0.1", 0), kind, 0.0,
                          "TLSv1.3" if kind is ListenerKind.TLS else None)


def connect(broker: Broker, client_id: str, level: SecurityLevel, flag=None, version=5):
    """Attach an in-memory client; returns (session, outbound)."""
    from mixbroker.security import security_property

    out = MemoryOutbound()
    props = [security_property(flag)] if flag is not None else []
    _, session = broker.handle_connect(conn_info(level), codec.Connect(client_id, version, properties=props), out)
    assert session is not None
    out.clear()
    return session, out


@pytest.fixture(scope="session")
def certs(tmp_path_factory):
    cert, key = generate_self_signed_cert(tmp_path_factory.mktemp("certs"))
    return str(cert), str(key)


@pytest.fixture
def make_broker(certs, tmp_path):
    """Start a real broker with plain and TLS listeners on ephemeral ports."""
    started = []

    def factory(**kwargs):
        cert, key = certs
        kwargs.setdefault("audit_log_path", str(tmp_path / "audit.jsonl"))
        config = BrokerConfig(
            [ListenerConfig(ListenerKind.PLAIN, port=0),
             ListenerConfig(ListenerKind.TLS, port=0, certfile=cert, keyfile=key)],
            **kwargs,
        )
        bt = BrokerThread(config).start()
        started.append(bt)
        return bt

    yield factory
    for bt in started:
        bt.stop()


@pytest.fixture
def client_factory(certs):
    clients = []

    def factory(bt, client_id, *, tls, version=5, keep_alive_s=60):
        cert, _ = certs
        kind = ListenerKind.TLS if tls else ListenerKind.PLAIN
        c = MQTTClient(port=bt.port(kind), client_id=client_id, protocol_version=version,
                       ssl_context=client_ssl_context(cert) if tls else None,
                       keep_alive_s=keep_alive_s, timeout=5.0)
        clients.append(c)
        return c

    yield factory
    for c in clients:
        c.close()
