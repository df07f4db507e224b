"""Line-delimited JSON audit log of delivery decisions."""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

from .security import ClientSecurityProfile, DeliveryDecision, SecurityLevel

log = logging.getLogger(__name__)


def _level_name(level: SecurityLevel) -> str:
    return level.name.lower().replace("_", "-")


@dataclass(frozen=True)
class AuditEvent:
    publisher_id: str
    subscriber_id: str
    topic: str
    decision: DeliveryDecision
    publisher: ClientSecurityProfile
    subscriber: ClientSecurityProfile
    timestamp: float = field(default_factory=time.time)

    def to_record(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "publisher_id": self.publisher_id,
            "subscriber_id": self.subscriber_id,
            "topic": self.topic,
            "decision": "deliver" if self.decision.delivered else "deny",
            "reason": None if self.decision.delivered else self.decision.deny_reason.value,
            "publisher_level": _level_name(self.publisher.transport_level),
            "publisher_flag": self.publisher.flag.value,
            "subscriber_level": _level_name(self.subscriber.transport_level),
            "subscriber_flag": self.subscriber.flag.value,
        }


class AuditLog:
    """Appends one JSON object per line.

    With ``path=None`` every write is a no-op and no file is created. Write
    failures are counted in :attr:`errors` and never propagate.
    """

    def __init__(self, path: str | Path | None) -> None:
        self.path = Path(path) if path is not None else None
        self.errors = 0
        self.records = 0
        self._fh: TextIO | None = None
        self._lock = threading.Lock()

    @property
    def enabled(self) -> bool:
        return self.path is not None

    def write(self, event: AuditEvent) -> None:
        if self.path is None:
            return
        line = json.dumps(event.to_record(), separators=(",", ":")) + "\n"
        with self._lock:
            try:
                if self._fh is None:
                    self._fh = open(self.path, "a", encoding="utf-8", buffering=1)
                self._fh.write(line)
                self.records += 1
            except OSError as exc:
                self.errors += 1
                log.error("audit write failed: %s", exc)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                try:
                    self._fh.close()
                except OSError:
                    self.errors += 1
                self._fh = None


def read_audit_log(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
