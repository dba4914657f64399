"""Registry and control plane for the overlay.

One logical writer owns the registry: reflectors register, heartbeat,
and advertise their room membership here; the optimizer feeds back the
installed distribution tree and gateway-flow diagnostics. Entries fall out
of snapshots once silent longer than the liveness timeout (default three
heartbeat intervals), and snapshots are published to subscribers on a fixed
interval, so a freshly registered reflector becomes visible within one
publish interval.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional

from .errors import DuplicateId, EpochConflict, ProbeFailed, UnknownReflector
from .model import LinkKey, LinkStats, ReflectorId, RoomId, link_key
from .quality import QualityFactor
from .reflector import RoutingTable

DEFAULT_HEARTBEAT_INTERVAL_MS = 10_000.0
DEFAULT_LIVENESS_INTERVALS = 3
DEFAULT_PUBLISH_INTERVAL_MS = 10_000.0


@dataclass
class RegistryEntry:
    """One live reflector: where to reach it and when it last spoke."""

    reflector: ReflectorId
    control_address: str
    region: str = ""
    registered_at: float = 0.0
    last_heartbeat: float = 0.0


@dataclass(frozen=True)
class LinkRecord:
    """Latest raw stats plus smoothed quality for one overlay link."""

    stats: LinkStats
    quality: QualityFactor


@dataclass(frozen=True)
class FlowSummary:
    """Gateway-pair max-flow diagnostic embedded in snapshot exports."""

    source: ReflectorId
    sink: ReflectorId
    value: float
    edges: frozenset = frozenset()  # links carrying positive flow


@dataclass(frozen=True)
class TopologySnapshot:
    """Point-in-time view of the overlay, published to subscribers.

    tree_edges always reference two live reflectors and form a forest;
    room_members maps each room to the live reflectors hosting members.
    """

    epoch: int
    reflectors: tuple
    links: tuple
    tree_edges: frozenset
    room_members: Mapping[RoomId, frozenset]
    flow: Optional[FlowSummary] = None

    def live_ids(self) -> frozenset:
        return frozenset(e.reflector for e in self.reflectors)


@dataclass
class DeliveryReport:
    """Outcome of one routing publication."""

    epoch: int
    acks: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)  # ReflectorId -> reason string


class Registry:
    """In-process registry with heartbeat leasing and snapshot publication."""

    def __init__(
        self,
        heartbeat_interval_ms: float = DEFAULT_HEARTBEAT_INTERVAL_MS,
        liveness_intervals: int = DEFAULT_LIVENESS_INTERVALS,
        prober: Optional[Callable[[str], bool]] = None,
    ):
        self.heartbeat_interval_ms = heartbeat_interval_ms
        self.liveness_timeout_ms = heartbeat_interval_ms * liveness_intervals
        self._prober = prober
        self._entries: dict = {}          # ReflectorId -> RegistryEntry
        self._rooms_by_reflector: dict = {}  # ReflectorId -> set of RoomId
        self._links: dict = {}            # LinkKey -> LinkRecord
        self._tree_edges: frozenset = frozenset()
        self._flow: Optional[FlowSummary] = None
        self._snapshot_epoch = 0
        self._routing_epoch = 0
        self._latest: Optional[TopologySnapshot] = None
        self._subscribers: dict = {}
        self._next_sub = 1

    # --- membership of the overlay itself ---

    def register(self, entry: RegistryEntry) -> int:
        """Add a reflector after one reachability probe; returns the current epoch."""
        if entry.reflector in self._entries:
            raise DuplicateId("reflector %d already registered" % entry.reflector)
        if self._prober is not None and not self._prober(entry.control_address):
            raise ProbeFailed("control address %r did not answer" % entry.control_address)
        if entry.last_heartbeat < entry.registered_at:
            entry = replace(entry, last_heartbeat=entry.registered_at)
        self._entries[entry.reflector] = entry
        self._rooms_by_reflector.setdefault(entry.reflector, set())
        return self._snapshot_epoch

    def deregister(self, reflector: ReflectorId) -> None:
        if reflector not in self._entries:
            raise UnknownReflector("reflector %d is not registered" % reflector)
        self._drop(reflector)

    def heartbeat(self, reflector: ReflectorId, at: float) -> None:
        entry = self._entries.get(reflector)
        if entry is None:
            raise UnknownReflector("heartbeat from unregistered reflector %d" % reflector)
        entry.last_heartbeat = max(entry.last_heartbeat, at)

    def expire(self, now: float) -> list:
        """Drop entries silent for more than the liveness timeout."""
        dead = [
            rid
            for rid, e in self._entries.items()
            if now - e.last_heartbeat > self.liveness_timeout_ms
        ]
        for rid in dead:
            self._drop(rid)
        return dead

    def _drop(self, reflector: ReflectorId) -> None:
        self._entries.pop(reflector, None)
        self._rooms_by_reflector.pop(reflector, None)
        for key in [k for k in self._links if reflector in k]:
            del self._links[key]
        self._tree_edges = frozenset(e for e in self._tree_edges if reflector not in e)

    def entries(self) -> list:
        return [self._entries[rid] for rid in sorted(self._entries)]

    def is_live(self, reflector: ReflectorId) -> bool:
        return reflector in self._entries

    # --- room membership advertisement ---

    def advertise_membership(self, reflector: ReflectorId, rooms: Iterable[RoomId]) -> None:
        if reflector not in self._entries:
            raise UnknownReflector("advertisement from unregistered reflector %d" % reflector)
        self._rooms_by_reflector[reflector] = set(rooms)

    def room_members(self) -> dict:
        """Room -> set of live reflectors hosting at least one member."""
        out: dict = {}
        for rid in sorted(self._rooms_by_reflector):
            for room in self._rooms_by_reflector[rid]:
                out.setdefault(room, set()).add(rid)
        return out

    # --- link table and optimizer feedback ---

    def report_link(self, stats: LinkStats, quality: QualityFactor) -> None:
        self._links[stats.link] = LinkRecord(stats, quality)

    def drop_link(self, a: ReflectorId, b: ReflectorId) -> None:
        self._links.pop(link_key(a, b), None)

    def links(self) -> list:
        live = self._entries
        return [
            self._links[k]
            for k in sorted(self._links)
            if k[0] in live and k[1] in live
        ]

    def set_tree(self, edges: Iterable[LinkKey]) -> None:
        self._tree_edges = frozenset(edges)

    def set_flow(self, flow: Optional[FlowSummary]) -> None:
        self._flow = flow

    # --- snapshots and subscriptions ---

    def build_snapshot(self) -> TopologySnapshot:
        """Consistent view of the current state under the next epoch."""
        live = frozenset(self._entries)
        room_members = {
            room: frozenset(members)
            for room, members in sorted(self.room_members().items())
        }
        return TopologySnapshot(
            epoch=self._snapshot_epoch + 1,
            reflectors=tuple(replace(e) for e in self.entries()),
            links=tuple(self.links()),
            tree_edges=frozenset(e for e in self._tree_edges if e[0] in live and e[1] in live),
            room_members=room_members,
            flow=self._flow,
        )

    def publish_snapshot(self, now: float) -> TopologySnapshot:
        """Expire stale entries, advance the epoch, and push to subscribers."""
        self.expire(now)
        snapshot = self.build_snapshot()
        self._snapshot_epoch = snapshot.epoch
        self._latest = snapshot
        for callback in list(self._subscribers.values()):
            callback(snapshot)
        return snapshot

    @property
    def latest_snapshot(self) -> Optional[TopologySnapshot]:
        return self._latest

    def subscribe(self, callback: Callable[[TopologySnapshot], None]) -> int:
        sub_id = self._next_sub
        self._next_sub += 1
        self._subscribers[sub_id] = callback
        return sub_id

    def unsubscribe(self, sub_id: int) -> None:
        self._subscribers.pop(sub_id, None)

    # --- routing distribution ---

    @property
    def routing_epoch(self) -> int:
        return self._routing_epoch

    def publish_routing(
        self,
        tables: Mapping[ReflectorId, RoutingTable],
        transport: Callable[[ReflectorId, RoutingTable], None],
    ) -> DeliveryReport:
        """Push one epoch's tables to every live reflector that has one.

        All tables must share a single epoch newer than the last published;
        per-reflector delivery failures are reported, not raised.
        """
        if not tables:
            raise ValueError("no tables to publish")
        epochs = {t.epoch for t in tables.values()}
        if len(epochs) != 1:
            raise EpochConflict("tables span multiple epochs: %s" % sorted(epochs))
        epoch = epochs.pop()
        if epoch <= self._routing_epoch:
            raise EpochConflict(
                "epoch %d is not newer than last published %d" % (epoch, self._routing_epoch)
            )
        report = DeliveryReport(epoch=epoch)
        for rid in sorted(tables):
            if rid not in self._entries:
                report.failures[rid] = "not registered"
                continue
            try:
                transport(rid, tables[rid])
                report.acks.append(rid)
            except Exception as exc:  # delivery failure is data, not an error
                report.failures[rid] = "%s: %s" % (type(exc).__name__, exc)
        self._routing_epoch = epoch
        return report
