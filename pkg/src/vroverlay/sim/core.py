"""Discrete-event core: virtual clock, event queue, and simulated links.

No wall-clock sleeps anywhere: time is a float of virtual milliseconds and
events fire in (time, insertion sequence) order, so a full run is a pure
function of the scenario and seed. Each link draws losses from its own
pseudo-random substream derived by hashing (seed, link id); adding a link
never perturbs any other link's draws.
"""
from __future__ import annotations

import hashlib
import heapq
import itertools
import random
import struct
from dataclasses import dataclass
from typing import Callable, Optional

from ..errors import LinkDown, TimeRegression
from ..model import ReflectorId, link_key


class EventLoop:
    """Single-threaded event queue over a virtual millisecond clock."""

    def __init__(self):
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()

    def schedule(self, at: float, fn: Callable[[], None]) -> None:
        if at < self.now:
            raise TimeRegression("cannot schedule at %.3f, clock is at %.3f" % (at, self.now))
        heapq.heappush(self._queue, (at, next(self._seq), fn))

    def schedule_in(self, delay: float, fn: Callable[[], None]) -> None:
        self.schedule(self.now + delay, fn)

    def run_until(self, until: float) -> int:
        """Process every event with time <= until; returns the event count."""
        if until < self.now:
            raise TimeRegression("cannot run to %.3f, clock is at %.3f" % (until, self.now))
        processed = 0
        while self._queue and self._queue[0][0] <= until:
            at, _, fn = heapq.heappop(self._queue)
            self.now = at
            fn()
            processed += 1
        self.now = until
        return processed

    def pending(self) -> int:
        return len(self._queue)


@dataclass
class SimLink:
    """One bidirectional link; parameters mutate only between events."""

    a: ReflectorId
    b: ReflectorId
    latency_ms: float = 10.0
    loss_probability: float = 0.0
    bandwidth_kbps: float = 10_000.0
    up: bool = True

    def __post_init__(self):
        self.a, self.b = link_key(self.a, self.b)
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be nonnegative")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must be in [0,1]")
        if self.bandwidth_kbps <= 0:
            raise ValueError("bandwidth_kbps must be positive")

    @property
    def key(self):
        return (self.a, self.b)


def link_stream_seed(seed: int, a: ReflectorId, b: ReflectorId) -> int:
    """Stable per-link RNG seed: sha256 over (scenario seed, ordered pair)."""
    a, b = link_key(a, b)
    digest = hashlib.sha256(struct.pack(">qII", seed, a, b)).digest()
    return int.from_bytes(digest[:8], "big")


def deliver_or_drop(
    link: SimLink, nbytes: int, rng: random.Random, now: float
) -> Optional[float]:
    """Decide one transmission's fate.

    Returns the delivery time (now + latency + serialization, where
    serialization is nbytes*8/bandwidth_kbps milliseconds) or None when the
    loss draw eats the packet. Raises LinkDown for a downed link.
    """
    if not link.up:
        raise LinkDown("link %s is down" % (link.key,))
    if link.loss_probability > 0.0 and rng.random() < link.loss_probability:
        return None
    return now + link.latency_ms + nbytes * 8.0 / link.bandwidth_kbps


@dataclass
class LinkCounters:
    sent: int = 0
    delivered: int = 0
    lost: int = 0


class SimNetwork:
    """The set of links, their RNG substreams, and transmission bookkeeping."""

    def __init__(self, loop: EventLoop, seed: int):
        self.loop = loop
        self.seed = seed
        self.links: dict = {}     # (a, b) -> SimLink
        self.counters: dict = {}  # (a, b) -> LinkCounters
        self._rngs: dict = {}     # (a, b) -> random.Random

    def add_link(self, link: SimLink) -> SimLink:
        key = link.key
        if key in self.links:
            raise ValueError("duplicate link %s" % (key,))
        self.links[key] = link
        self.counters[key] = LinkCounters()
        self._rngs[key] = random.Random(link_stream_seed(self.seed, *key))
        return link

    def link(self, a: ReflectorId, b: ReflectorId) -> SimLink:
        return self.links[link_key(a, b)]

    def has_link(self, a: ReflectorId, b: ReflectorId) -> bool:
        return link_key(a, b) in self.links

    def set_link(self, a: ReflectorId, b: ReflectorId, **params) -> SimLink:
        link = self.link(a, b)
        for name, value in params.items():
            if not hasattr(link, name):
                raise ValueError("unknown link parameter %r" % name)
            setattr(link, name, value)
        if link.latency_ms < 0 or not 0.0 <= link.loss_probability <= 1.0 or link.bandwidth_kbps <= 0:
            raise ValueError("invalid link parameters for %s" % (link.key,))
        return link

    def transmit(
        self,
        a: ReflectorId,
        b: ReflectorId,
        nbytes: int,
        on_deliver: Callable[[], None],
    ) -> Optional[float]:
        """Send nbytes from a to b; schedules on_deliver or drops.

        Returns the scheduled delivery time, or None when the loss draw
        dropped the transmission. Raises LinkDown if the link is down.
        """
        key = link_key(a, b)
        link = self.links[key]
        counters = self.counters[key]
        counters.sent += 1
        at = deliver_or_drop(link, nbytes, self._rngs[key], self.loop.now)
        if at is None:
            counters.lost += 1
            return None

        def fire():
            counters.delivered += 1
            on_deliver()

        self.loop.schedule(at, fire)
        return at
