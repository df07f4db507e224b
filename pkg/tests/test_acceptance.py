"""Acceptance gate.

Each test checks one criterion at its stated tolerance and prints a single
``[PASS]`` or ``[FAIL]`` line to the terminal, whatever pytest's capture mode.
"""

import contextlib
import itertools
import random
import time

import pytest

from mixbroker import codec
from mixbroker.audit import read_audit_log
from mixbroker.bench import compare_forwarding, comparison_table, run_connect_benchmark
from mixbroker.broker import Broker, BrokerConfig
from mixbroker.client import MQTTClient, client_ssl_context
from mixbroker.codec import Connect, Publish, Subscribe, SubscribeRequest, UserProperty
from mixbroker.security import (
    EnforcementFlag, LegacyPolicy, SecurityLevel, decision_truth_table, derive_profile,
)
from mixbroker.topics import SubscriptionTable, matches
from mixbroker.transport import ListenerConfig, ListenerKind

from conftest import MemoryOutbound, conn_info
from oracles import (
    decision_oracle, filter_is_valid_oracle, linear_scan_subscribers, match_oracle, random_packet,
    random_table, small_strings,
)

S, N = SecurityLevel.SECURED, SecurityLevel.NON_SECURED
E, R = EnforcementFlag.ENFORCE, EnforcementFlag.RELAX


@pytest.fixture
def criterion(capsys):
    """``with criterion("AC1 ...") as note:`` prints one verdict line; ``note`` adds detail."""

    @contextlib.contextmanager
    def run(name):
        details = []
        start = time.perf_counter()
        try:
            yield details.append
        except BaseException as exc:
            reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            verdict = f"[FAIL] {name} ({time.perf_counter() - start:.1f}s): {reason}"
            raise
        else:
            verdict = f"[PASS] {name} ({time.perf_counter() - start:.1f}s)"
        finally:
            with capsys.disabled():
                print("\n" + verdict + "".join(f"\n       {d}" for d in details))

    return run


def drain(client, idle=0.5):
    return [(m.topic, m.payload) for m in client.messages(idle)]


# ---------------------------------------------------------------------------


def test_ac1_decision_table(criterion):
    with criterion("AC1 decision table vs brute-force oracle, exactly 3 Deny, < 1 s") as note:
        start = time.perf_counter()
        rows = decision_truth_table()
        combos = set()
        for r in rows:
            key = (r.publisher_level, r.publisher_flag, r.subscriber_level, r.subscriber_flag)
            combos.add(key)
            expected = decision_oracle(key[0] == S, key[1] is E, key[2] == S, key[3] is E)
            assert str(r.decision).removeprefix("deny:") == expected, key
        assert combos == set(itertools.product(SecurityLevel, EnforcementFlag, SecurityLevel, EnforcementFlag))
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0
        denied = sorted((pl.name, pf.value, sl.name, sf.value) for pl, pf, sl, sf in
                        ((r.publisher_level, r.publisher_flag, r.subscriber_level, r.subscriber_flag)
                         for r in rows if not r.decision.delivered))
        note(f"oracle agreement: 16/16; deny rows: {len(denied)}")
        for d in denied:
            note(f"  deny {d}")
        assert len(denied) == 3, f"expected exactly 3 Deny combinations, got {len(denied)}"


def test_ac2_scenarios(criterion, make_broker, client_factory, tmp_path):
    with criterion("AC2 four end-to-end scenarios over TCP/TLS with audit, < 30 s"):
        start = time.perf_counter()
        bt = make_broker()
        scenarios = [
            # topic, (pub tls, pub flag), (sub tls, sub flag), delivered
            ("s1", (True, E), (True, R), True),
            ("s2", (True, E), (False, None), False),
            ("s3", (False, None), (True, E), False),
            ("s4", (True, R), (False, None), True),
        ]
        for topic, (ptls, pflag), (stls, sflag), delivered in scenarios:
            sub = client_factory(bt, f"{topic}-sub", tls=stls)
            pub = client_factory(bt, f"{topic}-pub", tls=ptls)
            sub.connect(sflag)
            pub.connect(pflag)
            sub.subscribe(f"{topic}/#", 1)
            assert pub.publish(f"{topic}/data", b"payload-" + topic.encode(), 1).reason_code == 0
            got = drain(sub, 1.0)
            want = [(f"{topic}/data", b"payload-" + topic.encode())] if delivered else []
            assert got == want, topic
        bt.call(bt.broker.audit.close)
        records = read_audit_log(tmp_path / "audit.jsonl")
        assert [(r["topic"], r["decision"], r["reason"]) for r in records] == [
            ("s2/data", "deny", "publisher-enforces"),
            ("s3/data", "deny", "subscriber-enforces"),
        ]
        assert records[0]["publisher_level"] == "secured" and records[0]["subscriber_level"] == "non-secured"
        assert time.perf_counter() - start < 30


def test_ac3_overhead(criterion):
    with criterion("AC3 ('s','1') adds exactly 7 bytes to PUBLISH, CONNECT, SUBSCRIBE") as note:
        prop = (0x26, UserProperty("s", "1"))
        cases = {
            "PUBLISH": lambda p: Publish("home/livingroom/temperature", b"21.5", 1, 17, p),
            "CONNECT": lambda p: Connect("sensor-7", keep_alive_s=30, properties=p),
            "SUBSCRIBE": lambda p: Subscribe(3, [SubscribeRequest("home/#", 1)], p),
        }
        for name, build in cases.items():
            without = len(codec.encode_packet(build([])))
            with_flag = len(codec.encode_packet(build([prop])))
            note(f"{name}: {without} -> {with_flag} bytes")
            assert with_flag - without == 7, name


def test_ac4_forwarding_overhead(criterion):
    with criterion("AC4 forwarding median with enforcement <= 1.10x without, n=500, < 2 min") as note:
        start = time.perf_counter()
        off, on, ratio = compare_forwarding(500)
        elapsed = time.perf_counter() - start
        for line in comparison_table(off, on).splitlines():
            note(line)
        note(f"ratio of medians on/off: {ratio:.3f}")
        assert off.runs == on.runs == 500 and off.failures == 0
        assert ratio <= 1.10
        assert elapsed < 120


def test_ac5_connect_benchmark(criterion, certs):
    with criterion("AC5 connection establishment n=500: TLS average > plain average, < 3 min") as note:
        start = time.perf_counter()
        plain, tls = run_connect_benchmark(500, *certs)
        elapsed = time.perf_counter() - start
        for line in comparison_table(plain, tls).splitlines():
            note(line)
        assert plain.runs == tls.runs == 500, (plain.notes[:3], tls.notes[:3])
        for report in (plain, tls):
            s = report.summary
            assert s.minimum <= s.average <= s.maximum and s.stddev >= 0
        assert tls.summary.average > plain.summary.average
        assert elapsed < 180


def test_ac6_codec_properties(criterion):
    with criterion("AC6 codec: 10k round trips, framing, 10k random byte strings, < 30 s") as note:
        start = time.perf_counter()
        rng = random.Random(2024)
        packets = []
        for i in range(10_000):
            version = 5 if i % 2 else 4
            pkt = random_packet(rng, version)
            data = codec.encode_packet(pkt, version)
            assert codec.decode_packet(data, version) == (pkt, len(data))
            packets.append((version, pkt, data))

        for _ in range(500):
            version = rng.choice((4, 5))
            chosen = [(p, d) for v, p, d in rng.sample(packets, 20) if v == version]
            stream = b"".join(d for _, d in chosen)
            decoded, tail = codec.iter_packets(stream, version)
            assert decoded == [p for p, _ in chosen] and tail == b""
            if stream:
                cut = rng.randrange(len(stream))
                decoded, tail = codec.iter_packets(stream[:cut], version)
                assert len(decoded) < len(chosen) or not tail

        outcomes = {"decoded": 0, "incomplete": 0, "malformed": 0}
        for _ in range(10_000):
            data = rng.randbytes(rng.randint(0, 64))
            if rng.random() < 0.5 and data:
                # Plausible header so the body parsers get exercised too.
                data = bytes([rng.choice([0x10, 0x20, 0x30, 0x32, 0x40, 0x82, 0x90, 0xA2, 0xB0, 0xE0]),
                              len(data) - 1 if len(data) - 1 < 128 else 0]) + data[1:]
            try:
                _, used = codec.decode_packet(data, rng.choice((4, 5)))
                assert 0 < used <= len(data)
                outcomes["decoded"] += 1
            except codec.IncompleteError:
                outcomes["incomplete"] += 1
            except codec.MalformedError:
                outcomes["malformed"] += 1
        note(f"random inputs: {outcomes}")
        assert time.perf_counter() - start < 30


def test_ac7_topic_matching(criterion):
    with criterion("AC7 topic matching: exhaustive <= 4 levels, 1000 random tables, < 30 s") as note:
        start = time.perf_counter()
        filters = [f for f in small_strings() if filter_is_valid_oracle(f)]
        topics = [t for t in small_strings("ab$") if t and "$" not in t[1:]]
        for f in filters:
            for t in topics:
                assert matches(f, t) == match_oracle(f, t), (f, t)
        note(f"exhaustive pairs: {len(filters) * len(topics)}")

        rng = random.Random(99)
        for _ in range(1000):
            subs = random_table(rng)
            table = SubscriptionTable()
            for s in subs:
                table.subscribe(s)
            for topic in rng.sample(topics, 8):
                got = {s.client_id: (s.granted_qos, None if s.override_flag is None else s.override_flag.value)
                       for s in table.match_subscribers(topic)}
                assert got == linear_scan_subscribers(subs, topic), topic
        assert time.perf_counter() - start < 30


@pytest.mark.parametrize("policy", list(LegacyPolicy), ids=lambda p: p.value)
def test_ac8_legacy_clients(criterion, make_broker, certs, policy):
    with criterion(f"AC8 v3.1.1 clients over plain and TLS under {policy.value}") as note:
        bt = make_broker(legacy_policy=policy)
        cert = certs[0]

        def client(cid, tls, version):
            kind = ListenerKind.TLS if tls else ListenerKind.PLAIN
            return MQTTClient(port=bt.port(kind), client_id=cid, protocol_version=version,
                              ssl_context=client_ssl_context(cert) if tls else None, timeout=5)

        legacy = {"L-plain": (False, None), "L-tls": (True, None)}
        modern = {f"M-{'tls' if tls else 'plain'}-{flag.value}": (tls, flag)
                  for tls in (False, True) for flag in EnforcementFlag}
        clients = {}
        try:
            for cid, (tls, flag) in {**legacy, **modern}.items():
                c = client(cid, tls, 4 if cid.startswith("L") else 5)
                c.connect(flag)
                c.subscribe(f"in/{cid}")
                clients[cid] = c

            flows = [(a, b) for a in legacy for b in modern] + [(b, a) for a in legacy for b in modern]
            for pub, sub in flows:
                clients[pub].publish(f"in/{sub}", pub.encode())
            received = {cid: {p.decode() for _, p in drain(c, 1.0)} for cid, c in clients.items()}
        finally:
            for c in clients.values():
                c.disconnect()

        def expected(pub, sub):
            (ptls, pflag), (stls, sflag) = {**legacy, **modern}[pub], {**legacy, **modern}[sub]
            if policy is LegacyPolicy.ALWAYS_RELAXED:
                # Legacy side is relaxed; only an effective counterparty requirement blocks.
                counter = pub if pub.startswith("M") else sub
                ctls, cflag = modern[counter]
                crosses = ptls != stls
                if crosses and ctls and cflag is E:
                    return False
                return True
            pp = derive_profile(S if ptls else N, pflag, policy)
            sp = derive_profile(S if stls else N, sflag, policy)
            return decision_oracle(pp.transport_level == S, pp.flag is E,
                                   sp.transport_level == S, sp.flag is E) == "deliver"

        wrong = [(p, s) for p, s in flows if (p in received[s]) != expected(p, s)]
        delivered = sum(p in received[s] for p, s in flows)
        note(f"{len(flows)} flows, {delivered} delivered, {len(flows) - delivered} withheld")
        assert not wrong, wrong


def test_ac9_no_leak(criterion):
    with criterion("AC9 no Enforce/Secured payload on any non-secured stream, 10k messages") as note:
        rng = random.Random(4242)
        secret_payloads: set[bytes] = set()
        leaks = []
        tapped = [0]

        def tap(session, data):
            if session.info.security_level != N:
                return
            tapped[0] += len(data)
            if data[0] >> 4 == codec.PacketType.PUBLISH:
                for pkt in codec.iter_packets(data, session.protocol_version)[0]:
                    if isinstance(pkt, Publish) and pkt.payload in secret_payloads:
                        leaks.append((session.client_id, pkt.payload))

        broker = Broker(BrokerConfig([ListenerConfig(ListenerKind.PLAIN, port=0)]), tap=tap)
        sessions = []
        for i in range(24):
            level = rng.choice([S, N])
            version = rng.choice([4, 5, 5])
            flag = rng.choice([None, E, R]) if version == 5 else None
            props = [(0x26, UserProperty("s", "1" if flag is E else "0"))] if flag else []
            _, s = broker.handle_connect(conn_info(level), Connect(f"c{i}", version, properties=props),
                                         MemoryOutbound())
            sessions.append(s)
            for _ in range(rng.randint(1, 3)):
                f = rng.choice(["#", "a/#", "a/+", "+/b", "a/b", "b"])
                sflag = rng.choice([None, None, E, R]) if version == 5 else None
                sprops = [(0x26, UserProperty("s", "1" if sflag is E else "0"))] if sflag else []
                broker.handle_subscribe(s, Subscribe(1, [SubscribeRequest(f, rng.randint(0, 1))], sprops))

        counts = {"secret": 0, "deliveries": 0}
        for i in range(10_000):
            pub = rng.choice(sessions)
            flag = rng.choice([None, E, R]) if pub.protocol_version == 5 else None
            effective = flag or pub.profile.flag
            payload = f"m{i}".encode()
            if pub.profile.transport_level == S and effective is E:
                secret_payloads.add(payload)
                counts["secret"] += 1
            props = [(0x26, UserProperty("s", "1" if flag is E else "0"))] if flag else []
            result = broker.handle_publish(pub, Publish(rng.choice(["a/b", "a/c", "b", "x/b"]), payload,
                                                         0, None, props))
            counts["deliveries"] += len(result.delivered)
        note(f"{counts['secret']} Enforce/Secured messages, {counts['deliveries']} deliveries, "
             f"{tapped[0]} bytes tapped on non-secured streams")
        assert counts["secret"] > 1000 and tapped[0] > 0
        assert not leaks, leaks[:5]
