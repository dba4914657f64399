"""Whole-overlay simulation: every module wired over the event loop.

One OverlaySim owns the reflector engines, the registry, the quality
filters, the optimizer cycle, the supervisor, and the metric service, all
driven by the discrete-event clock. Media packets travel over simulated
links (latency, loss, serialization delay); control traffic (heartbeats,
advertisements, routing installs, probes) is delivered in-process at event
time, gated on the target being alive and un-partitioned.

Fixed ordering keeps runs bit-deterministic: periodic work fires in the
order heartbeats, monitor tick, optimizer cycle, snapshot publish,
supervision; all iteration is over sorted ids; scenario events at time t
run before the periodic work of time t. Two runs of the same (scenario,
seed) produce identical traces.

Built-in invariant checks record violations instead of raising: routing
loops (a packet revisiting a reflector), duplicate deliveries to one
client, and any end-of-run expectations the scenario declares.
"""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

from ..config import OverlayConfig, apply_overrides
from ..errors import LinkDown, NotAMember, OverlayError, RegistryUnreachable, UnknownRoom
from ..model import LinkStats, MediaPacket
from ..monitor import MetricCollector, MonitorService
from ..optimizer import (
    Reroute,
    build_graph,
    compute_room_routes,
    max_flow,
    min_spanning_tree,
    reweigh_tree,
    should_reroute,
)
from ..quality import QualityFactor, raw_quality, update_ewma
from ..reflector import (
    DeliverLocal,
    LocalClient,
    MuteAudio,
    MuteVideo,
    Peer,
    ReflectorEngine,
    SelectSpeaker,
)
from ..registry import FlowSummary, Registry, RegistryEntry
from ..supervisor import (
    MemorySink,
    NotificationEvent,
    ProbeResult,
    RestartCommand,
    Supervisor,
)
from ..wire import HEADER_SIZE
from .core import EventLoop, SimLink, SimNetwork
from .scenario import (
    InjectTraffic,
    KillReflector,
    Partition,
    RestartOutcomes,
    Scenario,
    SetLink,
)


def _synthetic_load(reflector_id: int, now: float) -> float:
    """Deterministic stand-in for a host load sampler."""
    return round(0.1 + 0.05 * ((reflector_id + int(now) // 10_000) % 5), 3)


@dataclass
class SimNode:
    id: int
    region: str
    engine: ReflectorEngine
    collector: MetricCollector
    alive: bool = True
    probe_garbage: bool = False  # scripted malformed probe replies
    restart_outcomes: deque = field(default_factory=deque)


@dataclass
class MediaCounters:
    injected: int = 0
    inject_skipped: int = 0
    delivered: int = 0
    lost_links: int = 0
    dropped_link_down: int = 0
    dropped_dead_peer: int = 0


@dataclass
class SimReport:
    scenario: str
    seed: int
    duration_ms: float
    media: MediaCounters
    transmissions_sent: int
    transmissions_delivered: int
    transmissions_lost: int
    transmissions_in_flight: int
    unknown_room_drops: int
    chair_drops: int
    routing_epochs: list
    notifications: list
    violations: list
    trace: list

    def ok(self) -> bool:
        return not self.violations

    def trace_hash(self) -> str:
        digest = hashlib.sha256()
        for event in self.trace:
            digest.update(json.dumps(event, sort_keys=True).encode())
            digest.update(b"\n")
        return digest.hexdigest()

    def summary_lines(self) -> list:
        lines = [
            "scenario: %s (seed %d, %.0f ms)" % (self.scenario, self.seed, self.duration_ms),
            "packets: injected=%d delivered=%d loss_drops=%d link_down_drops=%d dead_peer_drops=%d"
            % (
                self.media.injected,
                self.media.delivered,
                self.media.lost_links,
                self.media.dropped_link_down,
                self.media.dropped_dead_peer,
            ),
            "transmissions: sent=%d delivered=%d lost=%d in_flight=%d"
            % (
                self.transmissions_sent,
                self.transmissions_delivered,
                self.transmissions_lost,
                self.transmissions_in_flight,
            ),
            "drops: unknown_room=%d chair=%d" % (self.unknown_room_drops, self.chair_drops),
            "routing epochs installed: %s" % (self.routing_epochs or "none"),
            "notifications: %d" % len(self.notifications),
        ]
        if self.violations:
            lines.append("violations (%d):" % len(self.violations))
            lines.extend("  - %s" % v for v in self.violations)
        else:
            lines.append("violations: none")
        return lines


class OverlaySim:
    """Deterministic simulation of one scenario."""

    def __init__(self, scenario: Scenario, monitoring: bool = True):
        self.scenario = scenario
        self.config = apply_overrides(OverlayConfig(), scenario.config)
        if scenario.gateway_pair is not None and self.config.gateway_pair is None:
            self.config = apply_overrides(
                self.config, {"gateway_pair": scenario.gateway_pair}
            )
        self.monitoring = monitoring
        self.loop = EventLoop()
        self.net = SimNetwork(self.loop, scenario.seed)
        self.trace: list = []
        self.violations: list = []
        self.media = MediaCounters()
        self.isolated: set = set()
        self._partition_down: set = set()

        self.registry = Registry(
            heartbeat_interval_ms=self.config.heartbeat_interval_ms,
            liveness_intervals=self.config.liveness_intervals,
        )
        self.notification_sink = MemorySink()
        self.supervisor = Supervisor(
            k_miss=self.config.k_miss,
            sink=self.notification_sink,
            recipients=self.config.admins,
        )
        self.monitor = MonitorService(
            series_capacity=self.config.series_capacity,
            budget_bytes=self.config.budget_bytes,
        )
        self.filters: dict = {}       # link key -> QualityFactor
        self.nodes: dict = {}         # reflector id -> SimNode
        self.client_home: dict = {}   # client id -> reflector id
        self.room_clients: dict = {}  # room id -> set of client ids
        self.current_tree = None
        self.routing_epochs: list = []
        self.delivered_to: dict = {}  # packet key -> {client: count}
        self.expected_receivers: dict = {}  # packet key -> frozenset of clients
        self._seq: dict = {}          # (room, src) -> next seq
        self._last_tables: dict = {}  # reflector id -> last published RoutingTable

        for spec in scenario.reflectors:
            self._create_node(spec.id, spec.region, register_at=0.0)
        for spec in scenario.links:
            self.net.add_link(
                SimLink(
                    a=spec.a,
                    b=spec.b,
                    latency_ms=spec.latency_ms,
                    loss_probability=spec.loss,
                    bandwidth_kbps=spec.bandwidth_kbps,
                )
            )
        for spec in scenario.clients:
            self.client_home[spec.id] = spec.reflector
            self.nodes[spec.reflector].engine.attach_client(spec.id)
        for spec in scenario.rooms:
            self.room_clients[spec.id] = set(spec.members)
            for client in spec.members:
                self.nodes[self.client_home[client]].engine.join_room(client, spec.id)
        for rid in sorted(self.nodes):
            self._advertise(rid)

        # Periodic work; relative order at equal times is fixed by insertion.
        self.loop.schedule(0.0, self._heartbeat_tick)
        self.loop.schedule(0.0, self._monitor_tick)
        self.loop.schedule(0.0, self._optimizer_cycle)
        self.loop.schedule(0.0, self._publish_tick)
        self.loop.schedule(0.0, self._supervise_tick)
        for event in scenario.events:
            self.loop.schedule(event.t, lambda e=event: self._apply_event(e))

    # --- construction helpers ---

    def _create_node(self, rid: int, region: str, register_at: float) -> SimNode:
        engine = ReflectorEngine(rid, on_membership_change=lambda rooms, r=rid: self._advertise(r))
        node = SimNode(
            id=rid,
            region=region,
            engine=engine,
            collector=MetricCollector(rid, load_sampler=_synthetic_load, started_at=register_at),
        )
        self.nodes[rid] = node
        self.registry.register(
            RegistryEntry(
                reflector=rid,
                control_address="sim://%d" % rid,
                region=region,
                registered_at=register_at,
                last_heartbeat=register_at,
            )
        )
        self.supervisor.watch(rid)
        return node

    def add_reflector(self, rid: int, region: str = "", link_to=None, **link_params) -> SimNode:
        """Bring a brand-new reflector into the running overlay."""
        node = self._create_node(rid, region, register_at=self.loop.now)
        self._trace("register", reflector=rid, region=region)
        if link_to is not None:
            self.net.add_link(SimLink(a=rid, b=link_to, **link_params))
        return node

    def schedule(self, at: float, fn) -> None:
        self.loop.schedule(at, fn)

    def subscribe_topology(self, callback) -> int:
        return self.registry.subscribe(callback)

    # --- tracing ---

    def _trace(self, kind: str, **fields_) -> None:
        event = {"t": self.loop.now, "kind": kind}
        event.update(fields_)
        self.trace.append(event)

    def _violate(self, message: str) -> None:
        self.violations.append(message)
        self._trace("violation", message=message)

    # --- control-plane reachability ---

    def _reachable(self, rid: int) -> bool:
        node = self.nodes.get(rid)
        return node is not None and node.alive and rid not in self.isolated

    def _advertise(self, rid: int) -> None:
        if rid in self.nodes and self._reachable(rid) and self.registry.is_live(rid):
            self.registry.advertise_membership(rid, self.nodes[rid].engine.local_rooms())

    def _resync_routing(self, rid: int) -> None:
        """Reconnected reflectors fetch the current epoch's table."""
        table = self._last_tables.get(rid)
        node = self.nodes.get(rid)
        if table is not None and node is not None and node.engine.routing.epoch < table.epoch:
            node.engine.swap_routing_table(table)
            self._trace("resync_routing", reflector=rid, epoch=table.epoch)

    # --- periodic work ---

    def _heartbeat_tick(self) -> None:
        for rid in sorted(self.nodes):
            if self._reachable(rid) and self.registry.is_live(rid):
                self.registry.heartbeat(rid, self.loop.now)
        self.loop.schedule_in(self.config.heartbeat_interval_ms, self._heartbeat_tick)

    def _monitor_tick(self) -> None:
        now = self.loop.now
        per_node_links: dict = {rid: [] for rid in self.nodes}
        for key in sorted(self.net.links):
            link = self.net.links[key]
            a, b = key
            if not (link.up and self._reachable(a) and self._reachable(b)):
                self.registry.drop_link(a, b)
                continue
            stats = LinkStats(
                link=key,
                rtt_ms=2.0 * link.latency_ms,
                loss_fraction=link.loss_probability,
                capacity_kbps=link.bandwidth_kbps,
                sampled_at=now,
            )
            prev = self.filters.get(key, QualityFactor(link=key, alpha=self.config.alpha))
            sample = raw_quality(stats.loss_fraction, stats.rtt_ms, self.config.rtt_ref_ms)
            current = update_ewma(prev, sample, now)
            self.filters[key] = current
            self.registry.report_link(stats, current)
            per_node_links[a].append(stats)
            per_node_links[b].append(stats)
        if self.monitoring:
            for rid in sorted(self.nodes):
                node = self.nodes[rid]
                if not node.alive:
                    continue
                for sample in node.collector.collect(
                    node.engine, per_node_links[rid], self.filters, now
                ):
                    self.monitor.record(sample)
        self.loop.schedule_in(self.config.monitor_interval_ms, self._monitor_tick)

    def _optimizer_cycle(self) -> None:
        now = self.loop.now
        self.registry.expire(now)
        snapshot = self.registry.build_snapshot()
        graph = build_graph(snapshot, self.filters, self.config.q_min)
        failed = self.supervisor.failed()
        if failed:
            graph = _without_vertices(graph, failed)
        candidate = min_spanning_tree(graph)

        install = False
        if (
            self.current_tree is None
            or self.current_tree.covers != candidate.covers
            or self.current_tree.components != candidate.components
        ):
            # Topology membership changed (registration, expiry, or a split
            # component rejoining): the gate only arbitrates same-shape trees.
            install = True
        else:
            current, dead = reweigh_tree(self.current_tree, graph)
            install = should_reroute(
                current, candidate, self.config.delta, dead
            ) is Reroute.INSTALL
        if install and candidate.covers:
            self._install_tree(candidate)

        if self.config.gateway_pair is not None:
            src, dst = self.config.gateway_pair
            if src in graph.vertices and dst in graph.vertices and src != dst:
                flow = max_flow(graph, src, dst)
                self.registry.set_flow(
                    FlowSummary(
                        source=src,
                        sink=dst,
                        value=flow.value,
                        edges=flow.positive_flow_edges(),
                    )
                )
            else:
                self.registry.set_flow(None)
        self.loop.schedule_in(self.config.optimizer_period_ms, self._optimizer_cycle)

    def _install_tree(self, tree) -> None:
        epoch = self.registry.routing_epoch + 1
        members_by_room = {}
        for room, hosts in self.registry.room_members().items():
            on_tree = hosts & tree.covers
            if on_tree:
                members_by_room[room] = on_tree
        tables = compute_room_routes(tree, members_by_room, epoch)
        self._last_tables = dict(tables)
        report = self.registry.publish_routing(tables, self._install_table)
        for rid, reason in sorted(report.failures.items()):
            self.supervisor.note_unreachable(rid, self.loop.now)
            self._trace("install_failed", reflector=rid, reason=reason)
        self.registry.set_tree(tree.edges)
        self.current_tree = tree
        self.routing_epochs.append(epoch)
        self._trace(
            "routing",
            epoch=epoch,
            edges=sorted(list(e) for e in tree.edges),
            total_weight=round(tree.total_weight, 9),
            acks=len(report.acks),
            failures=len(report.failures),
        )

    def _install_table(self, rid: int, table) -> None:
        if not self._reachable(rid):
            raise RegistryUnreachable("reflector %d unreachable" % rid)
        self.nodes[rid].engine.swap_routing_table(table)

    def _publish_tick(self) -> None:
        snapshot = self.registry.publish_snapshot(self.loop.now)
        self._trace(
            "snapshot",
            epoch=snapshot.epoch,
            reflectors=sorted(e.reflector for e in snapshot.reflectors),
        )
        self.loop.schedule_in(self.config.publish_interval_ms, self._publish_tick)

    def _supervise_tick(self) -> None:
        now = self.loop.now
        results = {}
        for rid in self.supervisor.probe_targets():
            node = self.nodes.get(rid)
            ok = (
                node is not None
                and node.alive
                and rid not in self.isolated
                and not node.probe_garbage
            )
            results[rid] = ProbeResult.OK if ok else ProbeResult.NO_ANSWER
        for action in self.supervisor.supervise_tick(results, now):
            if isinstance(action, RestartCommand):
                self._run_restart(action)
            elif isinstance(action, NotificationEvent):
                self._trace(
                    "notification",
                    reflector=action.reflector,
                    reason=action.reason,
                    recipients=list(action.recipients),
                )
        self.loop.schedule_in(self.config.probe_interval_ms, self._supervise_tick)

    def _run_restart(self, command: RestartCommand) -> None:
        node = self.nodes[command.reflector]
        ok = node.restart_outcomes.popleft() if node.restart_outcomes else True
        self._trace("restart", reflector=node.id, attempt=command.attempt, ok=ok)
        if not ok:
            return
        node.alive = True
        node.probe_garbage = False
        if not self.registry.is_live(node.id):
            self.registry.register(
                RegistryEntry(
                    reflector=node.id,
                    control_address="sim://%d" % node.id,
                    region=node.region,
                    registered_at=self.loop.now,
                    last_heartbeat=self.loop.now,
                )
            )
        self._advertise(node.id)
        self._resync_routing(node.id)

    # --- scenario events ---

    def _apply_event(self, event) -> None:
        if isinstance(event, KillReflector):
            self.kill_reflector(event.reflector)
        elif isinstance(event, RestartOutcomes):
            self.nodes[event.reflector].restart_outcomes.extend(event.outcomes)
            self._trace(
                "restart_outcomes", reflector=event.reflector, outcomes=list(event.outcomes)
            )
        elif isinstance(event, SetLink):
            self.net.set_link(event.a, event.b, **dict(event.params))
            self._trace("set_link", a=event.a, b=event.b, params=sorted(event.params))
        elif isinstance(event, InjectTraffic):
            for i in range(event.count):
                at = event.t + i * event.interval_ms
                self.loop.schedule(
                    max(at, self.loop.now), lambda e=event: self._inject_one(e)
                )
        elif isinstance(event, Partition):
            self.set_partition(event.isolated)
        else:
            raise OverlayError("unknown scenario event %r" % (event,))

    def kill_reflector(self, rid: int) -> None:
        self.nodes[rid].alive = False
        self._trace("kill", reflector=rid)

    def apply_chair(self, room: int, action) -> None:
        """Validate a chair control at the target's home, replicate to hosts."""
        hosts = sorted(
            rid for rid, node in self.nodes.items() if room in node.engine.local_rooms()
        )
        if not hosts:
            raise UnknownRoom("room %d has no members anywhere" % room)
        if isinstance(action, (MuteAudio, MuteVideo, SelectSpeaker)):
            home = self.client_home.get(action.client)
            if home is None or action.client not in self.nodes[home].engine.room_members(room):
                raise NotAMember(
                    "client %d is not a member of room %d" % (action.client, room)
                )
            state = self.nodes[home].engine.apply_chair_control(room, action)
            rest = [rid for rid in hosts if rid != home]
        else:
            state = self.nodes[hosts[0]].engine.apply_chair_control(room, action)
            rest = hosts[1:]
        for rid in rest:
            self.nodes[rid].engine.install_chair_state(room, state)
        self._trace("chair", room=room, action=type(action).__name__)

    def set_partition(self, isolated) -> None:
        freed = self.isolated - set(isolated)
        for key in sorted(self._partition_down):
            if key in self.net.links:
                self.net.links[key].up = True
        self._partition_down.clear()
        self.isolated = set(isolated)
        for key in sorted(self.net.links):
            a, b = key
            if (a in self.isolated) != (b in self.isolated) and self.net.links[key].up:
                self.net.links[key].up = False
                self._partition_down.add(key)
        self._trace("partition", isolated=sorted(self.isolated))
        for rid in sorted(freed):
            if self._reachable(rid):
                self._advertise(rid)
                self._resync_routing(rid)

    # --- media plane ---

    def _inject_one(self, event: InjectTraffic) -> None:
        home = self.client_home[event.src]
        node = self.nodes[home]
        if not node.alive:
            self.media.inject_skipped += 1
            self._trace("inject_skipped", room=event.room, src=event.src, reflector=home)
            return
        key = (event.room, event.src)
        seq = self._seq.get(key, 0) + 1
        self._seq[key] = seq
        packet = MediaPacket(
            room=event.room,
            src=event.src,
            seq=seq,
            timestamp_ms=int(self.loop.now) & 0xFFFFFFFF,
            payload_type=event.payload_type,
            payload=b"\x00" * event.payload_bytes,
        )
        self.media.injected += 1
        self.delivered_to[packet.key()] = {}
        self.expected_receivers[packet.key()] = frozenset(
            self.room_clients[event.room] - {event.src}
        )
        self._trace("inject", room=event.room, src=event.src, seq=seq, reflector=home)
        self._forward_at(node, packet, LocalClient(event.src), trail=(home,))

    def inject_packet(self, packet: MediaPacket, expected=None) -> None:
        """Drive one explicit packet from its origin client (test hook)."""
        home = self.client_home[packet.src]
        self.media.injected += 1
        self.delivered_to[packet.key()] = {}
        if expected is not None:
            self.expected_receivers[packet.key()] = frozenset(expected)
        self._trace("inject", room=packet.room, src=packet.src, seq=packet.seq, reflector=home)
        self._forward_at(self.nodes[home], packet, LocalClient(packet.src), trail=(home,))

    def _forward_at(self, node: SimNode, packet: MediaPacket, ingress, trail) -> None:
        epoch = node.engine.routing.epoch
        actions = node.engine.forward(packet, ingress)
        self._trace(
            "forward",
            reflector=node.id,
            room=packet.room,
            src=packet.src,
            seq=packet.seq,
            epoch=epoch,
            fanout=len(actions),
        )
        for action in sorted(
            actions,
            key=lambda a: (0, a.client) if isinstance(a, DeliverLocal) else (1, a.reflector),
        ):
            if isinstance(action, DeliverLocal):
                self._deliver_local(node, packet, action.client)
            else:
                self._send_peer(node, packet, action.reflector, trail)

    def _deliver_local(self, node: SimNode, packet: MediaPacket, client: int) -> None:
        counts = self.delivered_to.setdefault(packet.key(), {})
        counts[client] = counts.get(client, 0) + 1
        self.media.delivered += 1
        if counts[client] > 1:
            self._violate(
                "duplicate delivery of packet %s to client %d" % (packet.key(), client)
            )
        self._trace(
            "deliver",
            client=client,
            reflector=node.id,
            room=packet.room,
            src=packet.src,
            seq=packet.seq,
        )

    def _send_peer(self, node: SimNode, packet: MediaPacket, peer: int, trail) -> None:
        nbytes = HEADER_SIZE + len(packet.payload)
        try:
            at = self.net.transmit(
                node.id,
                peer,
                nbytes,
                lambda p=packet, frm=node.id, to=peer, tr=trail: self._receive_peer(
                    to, p, frm, tr
                ),
            )
        except LinkDown:
            self.media.dropped_link_down += 1
            self._trace(
                "drop", reason="link_down", a=node.id, b=peer,
                room=packet.room, src=packet.src, seq=packet.seq,
            )
            return
        if at is None:
            self.media.lost_links += 1
            self._trace(
                "drop", reason="loss", a=node.id, b=peer,
                room=packet.room, src=packet.src, seq=packet.seq,
            )

    def _receive_peer(self, rid: int, packet: MediaPacket, from_rid: int, trail) -> None:
        node = self.nodes[rid]
        if not node.alive:
            self.media.dropped_dead_peer += 1
            self._trace(
                "drop", reason="dead_peer", a=from_rid, b=rid,
                room=packet.room, src=packet.src, seq=packet.seq,
            )
            return
        if rid in trail:
            self._violate(
                "routing loop: packet %s revisited reflector %d (trail %s)"
                % (packet.key(), rid, list(trail))
            )
            return
        self._forward_at(node, packet, Peer(from_rid), trail + (rid,))

    # --- running and reporting ---

    def run(self) -> SimReport:
        self.loop.run_until(self.scenario.duration_ms)
        self._check_expectations()
        sent = sum(c.sent for c in self.net.counters.values())
        delivered = sum(c.delivered for c in self.net.counters.values())
        lost = sum(c.lost for c in self.net.counters.values())
        return SimReport(
            scenario=self.scenario.name,
            seed=self.scenario.seed,
            duration_ms=self.scenario.duration_ms,
            media=self.media,
            transmissions_sent=sent,
            transmissions_delivered=delivered,
            transmissions_lost=lost,
            transmissions_in_flight=sent - delivered - lost,
            unknown_room_drops=sum(
                n.engine.counters.unknown_room_drops for n in self.nodes.values()
            ),
            chair_drops=sum(n.engine.counters.chair_drops for n in self.nodes.values()),
            routing_epochs=list(self.routing_epochs),
            notifications=list(self.notification_sink.events),
            violations=list(self.violations),
            trace=list(self.trace),
        )

    def _check_expectations(self) -> None:
        expect = self.scenario.expect
        if expect.get("exactly_once"):
            for key in sorted(self.delivered_to):
                counts = self.delivered_to[key]
                expected = self.expected_receivers.get(key, frozenset())
                for client in sorted(expected):
                    got = counts.get(client, 0)
                    if got != 1:
                        self._violate(
                            "packet %s delivered %d times to client %d, expected exactly once"
                            % (key, got, client)
                        )
                for client in sorted(set(counts) - set(expected)):
                    self._violate(
                        "packet %s delivered to unexpected client %d" % (key, client)
                    )
        if "notifications" in expect:
            got = len(self.notification_sink.events)
            if got != expect["notifications"]:
                self._violate(
                    "expected %d notifications, got %d" % (expect["notifications"], got)
                )
        epochs = len(self.routing_epochs)
        if "min_routing_epochs" in expect and epochs < expect["min_routing_epochs"]:
            self._violate(
                "expected at least %d routing epochs, got %d"
                % (expect["min_routing_epochs"], epochs)
            )
        if "max_routing_epochs" in expect and epochs > expect["max_routing_epochs"]:
            self._violate(
                "expected at most %d routing epochs, got %d"
                % (expect["max_routing_epochs"], epochs)
            )


def _without_vertices(graph, exclude):
    from ..optimizer import WeightedGraph

    vertices = frozenset(v for v in graph.vertices if v not in exclude)
    edges = {
        k: attrs
        for k, attrs in graph.edges.items()
        if k[0] in vertices and k[1] in vertices
    }
    return WeightedGraph(
        vertices=vertices, edges=edges, built_from_epoch=graph.built_from_epoch
    )
