"""Independent reference implementations used to check the package.

Nothing here imports the code under test except plain data types, so a bug in
the package cannot silently make its own oracle agree with it.
"""

from __future__ import annotations

import itertools
import random

from mixbroker import codec
from mixbroker.codec import (
    Connack, Connect, Disconnect, Pingreq, Pingresp, Puback, Publish,
    Suback, Subscribe, SubscribeRequest, Unsuback, Unsubscribe, UserProperty, Will,
)
from mixbroker.security import EnforcementFlag
from mixbroker.topics import Subscription


# ---------------------------------------------------------------------------
# Variable byte integer: literal transcription of the MQTT pseudo-code
# ---------------------------------------------------------------------------

def varint_oracle(x: int) -> bytes:
    out = []
    while True:
        encoded_byte = x % 128
        x = x // 128
        if x > 0:
            encoded_byte = encoded_byte | 128
        out.append(encoded_byte)
        if not x > 0:
            return bytes(out)


# ---------------------------------------------------------------------------
# Topic matching: naive recursion over level lists
# ---------------------------------------------------------------------------

def match_oracle(topic_filter: str, topic: str) -> bool:
    if topic.startswith("$") and topic_filter[0] in "+#":
        return False

    def rec(f: list[str], t: list[str]) -> bool:
        if not f:
            return not t
        if f[0] == "#":
            return True
        if not t:
            return False
        if f[0] == "+" or f[0] == t[0]:
            return rec(f[1:], t[1:])
        return False

    return rec(topic_filter.split("/"), topic.split("/"))


def filter_is_valid_oracle(s: str) -> bool:
    if not s:
        return False
    levels = s.split("/")
    for i, level in enumerate(levels):
        if "#" in level and not (level == "#" and i == len(levels) - 1):
            return False
        if "+" in level and level != "+":
            return False
    return True


def linear_scan_subscribers(subs, topic: str) -> dict[str, tuple[int, object]]:
    """client_id -> (max qos, strictest flag) over subscriptions matching ``topic``.

    Flags: None means "inherit"; strictness order RELAX < None < ENFORCE.
    """
    rank = {"relax": 0, None: 1, "enforce": 2}
    out: dict[str, tuple[int, object]] = {}
    for s in subs:
        if not match_oracle(s.filter, topic):
            continue
        flag = None if s.override_flag is None else s.override_flag.value
        if s.client_id in out:
            q, f = out[s.client_id]
            out[s.client_id] = (max(q, s.granted_qos), f if rank[f] >= rank[flag] else flag)
        else:
            out[s.client_id] = (s.granted_qos, flag)
    return out


# ---------------------------------------------------------------------------
# Topic and table generators
# ---------------------------------------------------------------------------

def small_strings(alphabet: str = "ab+#", max_levels: int = 4):
    """Every '/'-joined string of 1..max_levels levels, each level 0..1 symbols."""
    level_choices = [""] + list(alphabet)
    for n in range(1, max_levels + 1):
        for levels in itertools.product(level_choices, repeat=n):
            yield "/".join(levels)


def random_table(rng: random.Random) -> list[Subscription]:
    """Up to 25 subscriptions over a tiny alphabet, at most one per (client, filter)."""
    flags = [None, EnforcementFlag.ENFORCE, EnforcementFlag.RELAX]
    alphabet = ["a", "b", "+", "#", ""]
    subs = {}
    for _ in range(rng.randint(0, 25)):
        levels = [rng.choice(alphabet) for _ in range(rng.randint(1, 4))]
        if "#" in levels:
            levels = levels[:levels.index("#") + 1]
        f = "/".join(levels)
        if not f:
            continue
        client = f"c{rng.randint(0, 5)}"
        subs[(client, f)] = Subscription(client, f, rng.randint(0, 1), rng.choice(flags))
    return list(subs.values())


# ---------------------------------------------------------------------------
# Delivery decision: the three published cases, written out as prose rules
# ---------------------------------------------------------------------------

def decision_oracle(pub_secured: bool, pub_enforce: bool,
                    sub_secured: bool, sub_enforce: bool) -> str:
    """'deliver', 'publisher-enforces' or 'subscriber-enforces'.

    Case 1: a TLS publisher that asked for enforcement is not forwarded to a
    subscriber without TLS. Case 2: a plain publisher is not forwarded to a TLS
    subscriber that asked for enforcement. Otherwise: forward.
    """
    if pub_secured and pub_enforce and not sub_secured:
        return "publisher-enforces"
    if not pub_secured and sub_secured and sub_enforce:
        return "subscriber-enforces"
    return "deliver"


# ---------------------------------------------------------------------------
# Random packet generator
# ---------------------------------------------------------------------------

_ALPHABET = "abcxyz/+#$é€ 0"


def _rand_str(rng: random.Random, maxlen: int = 12, alphabet: str = _ALPHABET) -> str:
    return "".join(rng.choice(alphabet) for _ in range(rng.randint(0, maxlen)))


def _rand_props(rng: random.Random, v5: bool) -> list:
    if not v5:
        return []
    props = []
    for _ in range(rng.randint(0, 3)):
        kind = rng.randrange(6)
        if kind == 0:
            props.append((0x26, UserProperty(_rand_str(rng, 4), _rand_str(rng, 4))))
        elif kind == 1:
            props.append((0x26, UserProperty("s", rng.choice("01"))))
        elif kind == 2:
            props.append((0x01, rng.randint(0, 1)))
        elif kind == 3:
            props.append((0x02, rng.randint(0, 2**32 - 1)))
        elif kind == 4:
            props.append((0x03, _rand_str(rng)))
        else:
            props.append((0x09, rng.randbytes(rng.randint(0, 8))))
    return props


def random_packet(rng: random.Random, version: int) -> codec.Packet:
    v5 = version == 5
    pid = rng.randint(1, 0xFFFF)
    kind = rng.randrange(11)
    if kind == 0:
        will = None
        if rng.random() < 0.3:
            will = Will(_rand_str(rng), rng.randbytes(rng.randint(0, 5)), rng.randint(0, 2),
                        rng.random() < 0.5, _rand_props(rng, v5))
        username = _rand_str(rng) if rng.random() < 0.5 else None
        password = rng.randbytes(rng.randint(0, 6)) if (username is not None or v5) and rng.random() < 0.5 else None
        return Connect(_rand_str(rng), version, rng.random() < 0.5, rng.randint(0, 0xFFFF),
                       _rand_props(rng, v5), username, password, will)
    if kind == 1:
        return Connack(rng.randint(0, 255), rng.random() < 0.5, _rand_props(rng, v5))
    if kind == 2:
        qos = rng.randint(0, 1)
        return Publish(_rand_str(rng), rng.randbytes(rng.randint(0, 40)), qos,
                       pid if qos else None, _rand_props(rng, v5),
                       rng.random() < 0.5, qos == 1 and rng.random() < 0.5)
    if kind == 3:
        if v5:
            return Puback(pid, rng.choice([0, 0, 0x10, 0x80, 0x83]), _rand_props(rng, v5))
        return Puback(pid)
    if kind == 4:
        reqs = [SubscribeRequest(_rand_str(rng), rng.randint(0, 2), rng.choice([0, 0x04, 0x08, 0x10, 0x20]) if v5 else 0)
                for _ in range(rng.randint(1, 4))]
        return Subscribe(pid, reqs, _rand_props(rng, v5))
    if kind == 5:
        return Suback(pid, [rng.choice([0, 1, 0x80, 0x8F]) for _ in range(rng.randint(1, 4))], _rand_props(rng, v5))
    if kind == 6:
        return Unsubscribe(pid, [_rand_str(rng) for _ in range(rng.randint(1, 4))], _rand_props(rng, v5))
    if kind == 7:
        if v5:
            return Unsuback(pid, [rng.choice([0, 0x11]) for _ in range(rng.randint(1, 4))], _rand_props(rng, v5))
        return Unsuback(pid)
    if kind == 8:
        return Pingreq()
    if kind == 9:
        return Pingresp()
    if v5:
        return Disconnect(rng.choice([0, 0x04, 0x8E]), _rand_props(rng, v5))
    return Disconnect()
