"""Connection-establishment and forwarding-latency benchmarks.

Both write CSV (``scenario,run,duration_ms``) and a human summary. Standard
deviation is the population standard deviation.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from .broker import BrokerConfig
from .client import MQTTClient, client_ssl_context
from .codec import Publish
from .runner import BrokerThread
from .security import EnforcementFlag
from .transport import ListenerConfig, ListenerKind

CSV_HEADER = ("scenario", "run", "duration_ms")


class Summary(NamedTuple):
    average: float
    stddev: float
    minimum: float
    maximum: float
    median: float


def summary_stats(samples: list[float]) -> Summary:
    if not samples:
        raise ValueError("summary of an empty sample list")
    return Summary(
        statistics.fmean(samples),
        statistics.pstdev(samples),
        min(samples),
        max(samples),
        statistics.median(samples),
    )


@dataclass
class BenchReport:
    scenario: str
    requested: int
    samples: list[float] = field(default_factory=list)
    failures: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def runs(self) -> int:
        return len(self.samples)

    @property
    def summary(self) -> Summary | None:
        return summary_stats(self.samples) if self.samples else None

    def write_csv(self, path: str | Path, *, append: bool = False) -> None:
        path = Path(path)
        new = not append or not path.exists() or path.stat().st_size == 0
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(CSV_HEADER)
            for i, sample in enumerate(self.samples, 1):
                w.writerow([self.scenario, i, repr(sample)])

    def text(self) -> str:
        lines = [f"scenario {self.scenario}: {self.runs}/{self.requested} runs, {self.failures} failed"]
        s = self.summary
        if s is None:
            lines.append("  no samples")
        else:
            lines += [
                f"  average   {s.average:10.3f} ms",
                f"  stddev    {s.stddev:10.3f} ms  (population)",
                f"  minimum   {s.minimum:10.3f} ms",
                f"  maximum   {s.maximum:10.3f} ms",
                f"  median    {s.median:10.3f} ms",
            ]
        lines += [f"  note: {n}" for n in self.notes]
        return "\n".join(lines)


def read_csv(path: str | Path) -> dict[str, list[float]]:
    """Samples per scenario, in file order."""
    out: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader)) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header")
        for scenario, _run, duration in reader:
            out.setdefault(scenario, []).append(float(duration))
    return out


def comparison_table(left: BenchReport, right: BenchReport) -> str:
    """Two reports side by side in the average/stddev/min/max layout."""
    ls, rs = left.summary, right.summary
    rows = [("", left.scenario, right.scenario)]
    for label, attr in [("Average Time", "average"), ("Standard Deviation", "stddev"),
                        ("Minimum Time", "minimum"), ("Maximum Time", "maximum"),
                        ("Median Time", "median")]:
        rows.append((
            label,
            f"{getattr(ls, attr):.3f} ms" if ls else "-",
            f"{getattr(rs, attr):.3f} ms" if rs else "-",
        ))
    rows.append(("Runs", f"{left.runs}/{left.requested}", f"{right.runs}/{right.requested}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
    if ls and rs and ls.average > 0:
        text += f"\nratio of averages ({right.scenario}/{left.scenario}): {rs.average / ls.average:.2f}x"
    return text


def bench_connect(
    n: int,
    mode: str,
    host: str,
    port: int,
    *,
    cafile: str | None = None,
    insecure: bool = False,
    protocol_version: int = 5,
) -> BenchReport:
    """Time ``n`` fresh connections from socket connect to CONNACK.

    ``mode`` is ``"plain"`` or ``"tls"``. Every TLS run is a full handshake.
    """
    if mode not in ("plain", "tls"):
        raise ValueError(f"mode must be 'plain' or 'tls', not {mode!r}")
    ctx = client_ssl_context(cafile, insecure=insecure) if mode == "tls" else None
    report = BenchReport(f"connect-{mode}", n)
    for i in range(n):
        client = MQTTClient(host, port, client_id=f"bench-{mode}-{i}",
                            protocol_version=protocol_version, ssl_context=ctx)
        try:
            start = time.perf_counter()
            client.connect()
            report.samples.append((time.perf_counter() - start) * 1e3)
        except Exception as exc:  # one failed run must not end the campaign
            report.failures += 1
            report.notes.append(f"run {i + 1} failed: {exc}")
        finally:
            client.disconnect()
    return report


def run_connect_benchmark(
    n: int, certfile: str, keyfile: str
) -> tuple[BenchReport, BenchReport]:
    """Start a local broker with both listeners and benchmark both modes."""
    config = BrokerConfig([
        ListenerConfig(ListenerKind.PLAIN, port=0),
        ListenerConfig(ListenerKind.TLS, port=0, certfile=certfile, keyfile=keyfile),
    ])
    with BrokerThread(config) as bt:
        plain = bench_connect(n, "plain", "127.0.0.1", bt.port(ListenerKind.PLAIN))
        tls = bench_connect(n, "tls", "127.0.0.1", bt.port(ListenerKind.TLS), cafile=certfile)
    return plain, tls


def _forward_run(
    bt: BrokerThread,
    modes: list[bool],
    *,
    subscribers: int,
    payload: bytes,
) -> dict[bool, list[float]]:
    """Publish one message per entry of ``modes`` with enforcement set to it.

    Returns the forwarding samples per mode. Failed receipts are counted
    under the ``None`` key as a one-element list.
    """
    port = bt.port(ListenerKind.PLAIN)
    broker = bt.broker
    out: dict = {True: [], False: [], None: [0]}
    subs = []
    for i in range(subscribers):
        c = MQTTClient(port=port, client_id=f"bench-sub-{i}")
        c.connect()
        c.subscribe("bench/#")
        subs.append(c)
    pub = MQTTClient(port=port, client_id="bench-pub")
    pub.connect()

    def set_mode(enforce: bool) -> None:
        broker.config.enforcement = enforce
        broker.forward_samples.clear()

    try:
        current = None
        for enforce in modes:
            if enforce != current:
                if current is not None:
                    out[current] += bt.call(lambda: list(broker.forward_samples))
                bt.call(lambda: set_mode(enforce))
                current = enforce
            pub.publish("bench/topic", payload, flag=EnforcementFlag.RELAX)
            if not subs:
                pub.ping()
            for c in subs:
                if not isinstance(c.recv(5.0), Publish):
                    out[None][0] += 1
        pub.ping()
        if current is not None:
            out[current] += bt.call(lambda: list(broker.forward_samples))
    finally:
        pub.disconnect()
        for c in subs:
            c.disconnect()
    return out


def _forward_broker() -> BrokerThread:
    return BrokerThread(BrokerConfig(
        [ListenerConfig(ListenerKind.PLAIN, port=0)], measure_forwarding=True,
    ))


def _forward_report(enforcement: bool, n: int, samples: list[float], failures: int) -> BenchReport:
    report = BenchReport(f"forward-enforcement-{'on' if enforcement else 'off'}", n, samples, failures)
    if not samples:
        report.notes.append("zero deliveries: no matching subscribers")
    return report


def bench_forward(
    n: int,
    enforcement: bool,
    *,
    subscribers: int = 1,
    warmup: int = 50,
    payload: bytes = b"21.5",
) -> BenchReport:
    """Broker-side latency from PUBLISH receipt to the forwarded write.

    Starts a private broker with measurement hooks on. The publisher tags
    every message with a relax property in both modes so the wire bytes are
    identical; only the broker's enforcement step differs.
    """
    with _forward_broker() as bt:
        _forward_run(bt, [enforcement] * warmup, subscribers=subscribers, payload=payload)
        out = _forward_run(bt, [enforcement] * n, subscribers=subscribers, payload=payload)
    return _forward_report(enforcement, n, out[enforcement], out[None][0])


def compare_forwarding(
    n: int,
    *,
    block: int = 25,
    subscribers: int = 1,
    warmup: int = 50,
    payload: bytes = b"21.5",
) -> tuple[BenchReport, BenchReport, float]:
    """Measure both modes on one broker, alternating in blocks of ``block``.

    Interleaving keeps slow drift (CPU frequency, cache state) from landing
    on one mode only. Returns the off and on reports and the ratio of
    medians, on over off.
    """
    modes: list[bool] = []
    for i in range(0, n, block):
        size = min(block, n - i)
        pair = [False] * size + [True] * size
        modes += pair if (i // block) % 2 == 0 else pair[::-1]
    with _forward_broker() as bt:
        # Warm both code paths, then discard those samples.
        _forward_run(bt, [False, True] * warmup, subscribers=subscribers, payload=payload)
        out = _forward_run(bt, modes, subscribers=subscribers, payload=payload)
    off = _forward_report(False, n, out[False], out[None][0])
    on = _forward_report(True, n, out[True], 0)
    if off.summary is None or on.summary is None:
        return off, on, float("nan")
    return off, on, on.summary.median / off.summary.median
