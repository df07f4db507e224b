"""Topic validation, wildcard matching and the subscription table."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Iterator

from .security import EnforcementFlag


class TopicError(ValueError):
    pass


def validate_topic_name(s: str) -> str:
    if not s:
        raise TopicError("topic name is empty")
    if "+" in s or "#" in s:
        raise TopicError(f"wildcard in topic name {s!r}")
    if "\x00" in s:
        raise TopicError("topic name contains U+0000")
    return s


def validate_topic_filter(s: str) -> str:
    if not s:
        raise TopicError("topic filter is empty")
    if "\x00" in s:
        raise TopicError("topic filter contains U+0000")
    levels = s.split("/")
    for i, level in enumerate(levels):
        if "#" in level and (level != "#" or i != len(levels) - 1):
            raise TopicError(f"'#' must be the whole last level in {s!r}")
        if "+" in level and level != "+":
            raise TopicError(f"'+' must occupy a whole level in {s!r}")
    return s


def matches(topic_filter: str, topic: str) -> bool:
    """MQTT filter matching; both arguments must already be validated."""
    if topic.startswith("$") and topic_filter[:1] in ("+", "#"):
        return False
    flevels = topic_filter.split("/")
    tlevels = topic.split("/")
    for i, f in enumerate(flevels):
        if f == "#":
            return True
        if i >= len(tlevels):
            return False
        if f != "+" and f != tlevels[i]:
            return False
    return len(flevels) == len(tlevels)


@dataclass(frozen=True)
class Subscription:
    client_id: str
    filter: str
    granted_qos: int = 0
    override_flag: EnforcementFlag | None = None


# Fail-closed ordering for merging a client's overlapping subscriptions: an
# absent override inherits the session flag, which may itself be ENFORCE, so
# it ranks above an explicit RELAX.
_STRICTNESS = {EnforcementFlag.RELAX: 0, None: 1, EnforcementFlag.ENFORCE: 2}


def merge_subscriptions(subs: list[Subscription]) -> Subscription:
    """Collapse one client's matching subscriptions into a single entry.

    Highest granted QoS wins; the strictest override flag wins. The filter of
    the result is the lexicographically smallest among the highest-QoS entries.
    """
    qos = max(s.granted_qos for s in subs)
    chosen = min(s.filter for s in subs if s.granted_qos == qos)
    flag = max((s.override_flag for s in subs), key=_STRICTNESS.__getitem__)
    return Subscription(subs[0].client_id, chosen, qos, flag)


class _Node:
    __slots__ = ("children", "subscribers")

    def __init__(self) -> None:
        self.children: dict[str, _Node] = {}
        self.subscribers: dict[str, Subscription] = {}


class SubscriptionTable:
    """Trie of subscriptions keyed by topic level.

    All operations take an internal lock, so every call sees and leaves a
    consistent table even when used from several threads.
    """

    def __init__(self) -> None:
        self._root = _Node()
        self._by_client: dict[str, set[str]] = {}
        self._lock = threading.RLock()

    def subscribe(self, sub: Subscription) -> None:
        """Store ``sub``, replacing any entry with the same client and filter."""
        with self._lock:
            node = self._root
            for level in sub.filter.split("/"):
                node = node.children.setdefault(level, _Node())
            node.subscribers[sub.client_id] = sub
            self._by_client.setdefault(sub.client_id, set()).add(sub.filter)

    def unsubscribe(self, client_id: str, topic_filter: str) -> bool:
        """Remove one entry. Returns False if it did not exist."""
        with self._lock:
            path = [self._root]
            for level in topic_filter.split("/"):
                child = path[-1].children.get(level)
                if child is None:
                    return False
                path.append(child)
            if path[-1].subscribers.pop(client_id, None) is None:
                return False
            filters = self._by_client[client_id]
            filters.discard(topic_filter)
            if not filters:
                del self._by_client[client_id]
            self._prune(path, topic_filter.split("/"))
            return True

    def _prune(self, path: list[_Node], levels: list[str]) -> None:
        for depth in range(len(levels), 0, -1):
            node = path[depth]
            if node.children or node.subscribers:
                return
            del path[depth - 1].children[levels[depth - 1]]

    def remove_client(self, client_id: str) -> int:
        """Drop every subscription of ``client_id``; return how many."""
        with self._lock:
            filters = list(self._by_client.get(client_id, ()))
            for f in filters:
                self.unsubscribe(client_id, f)
            return len(filters)

    def subscriptions_of(self, client_id: str) -> list[Subscription]:
        with self._lock:
            return [self._lookup(client_id, f) for f in sorted(self._by_client.get(client_id, ()))]

    def _lookup(self, client_id: str, topic_filter: str) -> Subscription:
        node = self._root
        for level in topic_filter.split("/"):
            node = node.children[level]
        return node.subscribers[client_id]

    def match_subscribers(self, topic: str) -> list[Subscription]:
        """Every subscription matching ``topic``, one merged entry per client."""
        with self._lock:
            found: dict[str, list[Subscription]] = {}
            levels = topic.split("/")
            self._collect(self._root, levels, 0, found, topic.startswith("$"))
        return [
            subs[0] if len(subs) == 1 else merge_subscriptions(subs)
            for subs in found.values()
        ]

    def _collect(
        self,
        node: _Node,
        levels: list[str],
        depth: int,
        found: dict[str, list[Subscription]],
        dollar: bool,
    ) -> None:
        wild_ok = not (dollar and depth == 0)
        hash_node = node.children.get("#") if wild_ok else None
        if hash_node is not None:
            for sub in hash_node.subscribers.values():
                found.setdefault(sub.client_id, []).append(sub)
        if depth == len(levels):
            for sub in node.subscribers.values():
                found.setdefault(sub.client_id, []).append(sub)
            return
        exact = node.children.get(levels[depth])
        if exact is not None:
            self._collect(exact, levels, depth + 1, found, dollar)
        plus = node.children.get("+") if wild_ok else None
        if plus is not None:
            self._collect(plus, levels, depth + 1, found, dollar)

    def __iter__(self) -> Iterator[Subscription]:
        with self._lock:
            subs = [
                self._lookup(c, f) for c, filters in self._by_client.items() for f in filters
            ]
        return iter(subs)

    def __len__(self) -> int:
        with self._lock:
            return sum(len(f) for f in self._by_client.values())

    def snapshot(self) -> frozenset[Subscription]:
        return frozenset(self)
