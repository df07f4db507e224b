"""Command-line entry points: ``mixbroker {serve,pub,sub,bench,gen-cert}``."""

from __future__ import annotations

import argparse
import asyncio
import datetime
import logging
import ssl
import sys
import tempfile
from pathlib import Path

from .bench import bench_connect, compare_forwarding, comparison_table, run_connect_benchmark
from .broker import Broker, BrokerConfig
from .client import ClientError, MQTTClient, client_ssl_context
from .config import ConfigError, load_config
from .security import EnforcementFlag, LegacyPolicy
from .transport import DEFAULT_PLAIN_PORT, DEFAULT_TLS_PORT, ListenerConfig, ListenerKind, generate_self_signed_cert


def _add_connection_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, help="default 1883 plain, 8883 TLS")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--tls", action="store_true", help="connect over TLS")
    mode.add_argument("--plain", action="store_true", help="connect over plain TCP (default)")
    p.add_argument("--cafile", help="CA bundle used to verify the broker certificate")
    p.add_argument("--insecure", action="store_true", help="skip broker certificate verification")
    p.add_argument("--client-id", default="")
    p.add_argument("--mqtt-version", type=int, choices=(4, 5), default=5)
    flag = p.add_mutually_exclusive_group()
    flag.add_argument("--enforce", action="store_true", help='send ("s","1")')
    flag.add_argument("--relax", action="store_true", help='send ("s","0")')
    p.add_argument("--flag-on", choices=("connect", "message"), default="message",
                   help="put the security property on CONNECT or on each PUBLISH/SUBSCRIBE")


def _flag(args: argparse.Namespace) -> EnforcementFlag | None:
    if args.enforce:
        return EnforcementFlag.ENFORCE
    if args.relax:
        return EnforcementFlag.RELAX
    return None


def _connect(args: argparse.Namespace) -> tuple[MQTTClient, EnforcementFlag | None]:
    flag = _flag(args)
    if flag is not None and args.mqtt_version != 5:
        raise ClientError("security properties need MQTT 5")
    ctx = client_ssl_context(args.cafile, insecure=args.insecure) if args.tls else None
    port = args.port or (DEFAULT_TLS_PORT if args.tls else DEFAULT_PLAIN_PORT)
    client = MQTTClient(args.host, port, client_id=args.client_id,
                        protocol_version=args.mqtt_version, ssl_context=ctx)
    client.connect(flag if args.flag_on == "connect" else None)
    return client, flag if args.flag_on == "message" else None


def pub_main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="mixbroker pub", description="Publish one message.")
    _add_connection_args(p)
    p.add_argument("--topic", required=True)
    p.add_argument("--payload", default="")
    p.add_argument("--qos", type=int, choices=(0, 1), default=0)
    args = p.parse_args(argv)
    try:
        client, flag = _connect(args)
        with client:
            ack = client.publish(args.topic, args.payload.encode(), args.qos, flag=flag)
            if ack is not None and ack.reason_code >= 0x80:
                print(f"publish refused: reason code {ack.reason_code:#04x}", file=sys.stderr)
                return 1
    except (ClientError, OSError, ssl.SSLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def sub_main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="mixbroker sub", description="Subscribe and print messages.")
    _add_connection_args(p)
    p.add_argument("--filter", action="append", required=True, dest="filters")
    p.add_argument("--qos", type=int, choices=(0, 1), default=0)
    p.add_argument("--count", type=int, help="exit after this many messages")
    p.add_argument("--timeout", type=float, help="exit after this many idle seconds")
    args = p.parse_args(argv)
    try:
        client, flag = _connect(args)
        with client:
            suback = client.subscribe(args.filters, args.qos, flag=flag)
            for f, code in zip(args.filters, suback.reason_codes):
                if code >= 0x80:
                    print(f"subscription to {f!r} refused: reason code {code:#04x}", file=sys.stderr)
            received = 0
            for msg in client.messages(args.timeout if args.timeout else 1e9):
                stamp = datetime.datetime.now().isoformat(timespec="milliseconds")
                payload = msg.payload.decode("utf-8", errors="backslashreplace")
                print(f"{stamp}\t{msg.topic}\t{payload}", flush=True)
                received += 1
                if args.count and received >= args.count:
                    break
    except (ClientError, OSError, ssl.SSLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        pass
    return 0


def serve_main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="mixbroker serve", description="Run the broker.")
    p.add_argument("--config", help="INI config file; flags below override it")
    p.add_argument("--host")
    p.add_argument("--plain-port", type=int)
    p.add_argument("--tls-port", type=int)
    p.add_argument("--cert")
    p.add_argument("--key")
    p.add_argument("--legacy-policy", choices=[x.value for x in LegacyPolicy])
    p.add_argument("--audit-log")
    p.add_argument("--max-qos", type=int, choices=(0, 1))
    p.add_argument("--no-enforcement", action="store_true", help="plain MQTT forwarding")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = _serve_config(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    async def run() -> None:
        broker = Broker(config)
        await broker.start()
        try:
            await asyncio.Event().wait()
        finally:
            await broker.stop()

    try:
        asyncio.run(run())
    except KeyboardInterrupt:
        pass
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _serve_config(args: argparse.Namespace) -> BrokerConfig:
    if args.config:
        config = load_config(args.config)
    else:
        listeners = [ListenerConfig(ListenerKind.PLAIN, port=DEFAULT_PLAIN_PORT)]
        if args.cert and args.key:
            listeners.append(ListenerConfig(ListenerKind.TLS, port=DEFAULT_TLS_PORT,
                                            certfile=args.cert, keyfile=args.key))
        config = BrokerConfig(listeners)
    listeners = []
    for lc in config.listeners:
        changes = {}
        if args.host:
            changes["host"] = args.host
        if lc.kind is ListenerKind.PLAIN and args.plain_port is not None:
            changes["port"] = args.plain_port
        if lc.kind is ListenerKind.TLS:
            if args.tls_port is not None:
                changes["port"] = args.tls_port
            if args.cert:
                changes["certfile"] = args.cert
            if args.key:
                changes["keyfile"] = args.key
        listeners.append(ListenerConfig(**{**lc.__dict__, **changes}))
    config.listeners = listeners
    if args.legacy_policy:
        config.legacy_policy = LegacyPolicy(args.legacy_policy)
    if args.audit_log:
        config.audit_log_path = args.audit_log
    if args.max_qos is not None:
        config.max_qos = args.max_qos
    if args.no_enforcement:
        config.enforcement = False
    config.__post_init__()
    return config


def bench_main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="mixbroker bench", description="Run a benchmark.")
    sub = p.add_subparsers(dest="kind", required=True)
    c = sub.add_parser("connect", help="time from socket connect to CONNACK")
    c.add_argument("-n", type=int, default=500)
    c.add_argument("--mode", choices=("plain", "tls", "both"), default="both")
    c.add_argument("--host", help="benchmark an external broker instead of a local one")
    c.add_argument("--plain-port", type=int, default=DEFAULT_PLAIN_PORT)
    c.add_argument("--tls-port", type=int, default=DEFAULT_TLS_PORT)
    c.add_argument("--cafile")
    c.add_argument("--insecure", action="store_true")
    c.add_argument("--csv", help="write samples to this CSV file")
    f = sub.add_parser("forward", help="broker-side forwarding latency, enforcement off vs on")
    f.add_argument("-n", type=int, default=500)
    f.add_argument("--csv")
    args = p.parse_args(argv)

    if args.kind == "forward":
        off, on, ratio = compare_forwarding(args.n)
        reports = [off, on]
        print(comparison_table(off, on))
        print(f"ratio of medians (on/off): {ratio:.3f}")
    else:
        if args.host is None:
            with tempfile.TemporaryDirectory() as tmp:
                cert, key = generate_self_signed_cert(tmp)
                plain, tls = run_connect_benchmark(args.n, str(cert), str(key))
            reports = [r for r, m in ((plain, "plain"), (tls, "tls")) if args.mode in (m, "both")]
        else:
            reports = []
            if args.mode in ("plain", "both"):
                reports.append(bench_connect(args.n, "plain", args.host, args.plain_port))
            if args.mode in ("tls", "both"):
                reports.append(bench_connect(args.n, "tls", args.host, args.tls_port,
                                             cafile=args.cafile, insecure=args.insecure))
        if len(reports) == 2:
            print(comparison_table(*reports))
        else:
            print(reports[0].text())
    for r in reports:
        for note in r.notes:
            print(f"{r.scenario}: {note}")
    if args.csv:
        for i, r in enumerate(reports):
            r.write_csv(args.csv, append=i > 0)
    return 0


def gen_cert_main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="mixbroker gen-cert", description="Write a self-signed certificate.")
    p.add_argument("directory")
    p.add_argument("--cn", default="localhost")
    args = p.parse_args(argv)
    cert, key = generate_self_signed_cert(Path(args.directory), args.cn)
    print(f"{cert}\n{key}")
    return 0


COMMANDS = {
    "serve": serve_main,
    "pub": pub_main,
    "sub": sub_main,
    "bench": bench_main,
    "gen-cert": gen_cert_main,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] not in COMMANDS:
        print(f"usage: mixbroker {{{','.join(COMMANDS)}}} ...", file=sys.stderr)
        return 2
    return COMMANDS[argv[0]](argv[1:])


if __name__ == "__main__":
    sys.exit(main())
