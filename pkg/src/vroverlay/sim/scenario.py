"""Scenario documents: schema validation and typed loading.

A scenario is a JSON document describing the starting topology (reflectors,
links, clients, rooms), an optional gateway pair for flow diagnostics,
config overrides, optional end-of-run expectations, and a time-sorted event
script. Validation happens in two passes: the shipped JSON schema first,
then semantic checks (id references, event ordering, per-action fields)
with field-path diagnostics. Identical (scenario, seed) pairs always replay
to identical traces.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import jsonschema

from ..errors import SchemaError
from ..model import PayloadType, link_key

_PAYLOAD_TYPES = {
    "opaque": PayloadType.OPAQUE,
    "video": PayloadType.VIDEO_H261,
    "audio": PayloadType.AUDIO_G711U,
}


@dataclass(frozen=True)
class ReflectorSpec:
    id: int
    region: str = ""


@dataclass(frozen=True)
class LinkSpec:
    a: int
    b: int
    latency_ms: float = 10.0
    loss: float = 0.0
    bandwidth_kbps: float = 10_000.0


@dataclass(frozen=True)
class ClientSpec:
    id: int
    reflector: int


@dataclass(frozen=True)
class RoomSpec:
    id: int
    members: tuple


@dataclass(frozen=True)
class KillReflector:
    t: float
    reflector: int


@dataclass(frozen=True)
class RestartOutcomes:
    """Scripts the success/failure of the next restart attempts on a reflector."""

    t: float
    reflector: int
    outcomes: tuple


@dataclass(frozen=True)
class SetLink:
    t: float
    a: int
    b: int
    params: tuple  # ((name, value), ...) applied in order


@dataclass(frozen=True)
class InjectTraffic:
    t: float
    room: int
    src: int
    count: int = 1
    interval_ms: float = 100.0
    payload_bytes: int = 76
    payload_type: PayloadType = PayloadType.OPAQUE


@dataclass(frozen=True)
class Partition:
    """Isolate a set of reflectors from the rest of the overlay.

    Their links go down and they become unreachable from the control plane;
    a later partition event with a smaller (or empty) set heals the rest.
    """

    t: float
    isolated: frozenset


@dataclass
class Scenario:
    name: str
    seed: int
    duration_ms: float
    reflectors: list
    links: list
    clients: list
    rooms: list
    gateway_pair: Optional[tuple] = None
    config: dict = field(default_factory=dict)
    expect: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    def reflector_ids(self) -> set:
        return {r.id for r in self.reflectors}


def _schema() -> dict:
    text = resources.files("vroverlay.sim").joinpath("scenario.schema.json").read_text()
    return json.loads(text)


def load_scenario_file(path: str, seed_override: Optional[int] = None) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise SchemaError("cannot read scenario %s: %s" % (path, exc)) from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(
            "%s is not valid JSON: line %d column %d: %s"
            % (path, exc.lineno, exc.colno, exc.msg)
        ) from exc
    return load_scenario(doc, seed_override)


def load_scenario(doc: dict, seed_override: Optional[int] = None) -> Scenario:
    """Validate a scenario document and build the typed Scenario."""
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError("field %s: %s" % (path, exc.message)) from None

    reflectors = [ReflectorSpec(r["id"], r.get("region", "")) for r in doc["reflectors"]]
    rids = {r.id for r in reflectors}
    if len(rids) != len(reflectors):
        raise SchemaError("field reflectors: duplicate reflector ids")

    links = []
    seen_links = set()
    for i, spec in enumerate(doc.get("links", ())):
        where = "links[%d]" % i
        if spec["a"] == spec["b"]:
            raise SchemaError("field %s: endpoints must differ" % where)
        for end in ("a", "b"):
            if spec[end] not in rids:
                raise SchemaError("field %s.%s: unknown reflector %d" % (where, end, spec[end]))
        key = link_key(spec["a"], spec["b"])
        if key in seen_links:
            raise SchemaError("field %s: duplicate link %s" % (where, key))
        seen_links.add(key)
        links.append(
            LinkSpec(
                a=key[0],
                b=key[1],
                latency_ms=spec.get("latency_ms", 10.0),
                loss=spec.get("loss", 0.0),
                bandwidth_kbps=spec.get("bandwidth_kbps", 10_000.0),
            )
        )

    clients = []
    cids = set()
    for i, spec in enumerate(doc.get("clients", ())):
        where = "clients[%d]" % i
        if spec["id"] in cids:
            raise SchemaError("field %s.id: duplicate client %d" % (where, spec["id"]))
        if spec["reflector"] not in rids:
            raise SchemaError("field %s.reflector: unknown reflector %d" % (where, spec["reflector"]))
        cids.add(spec["id"])
        clients.append(ClientSpec(spec["id"], spec["reflector"]))

    rooms = []
    room_ids = set()
    room_members: dict = {}
    for i, spec in enumerate(doc.get("rooms", ())):
        where = "rooms[%d]" % i
        if spec["id"] in room_ids:
            raise SchemaError("field %s.id: duplicate room %d" % (where, spec["id"]))
        room_ids.add(spec["id"])
        for c in spec["members"]:
            if c not in cids:
                raise SchemaError("field %s.members: unknown client %d" % (where, c))
        if len(set(spec["members"])) != len(spec["members"]):
            raise SchemaError("field %s.members: duplicate client" % where)
        rooms.append(RoomSpec(spec["id"], tuple(spec["members"])))
        room_members[spec["id"]] = set(spec["members"])

    gateway = None
    if "gateway_pair" in doc:
        g = doc["gateway_pair"]
        if g[0] == g[1] or g[0] not in rids or g[1] not in rids:
            raise SchemaError("field gateway_pair: must name two distinct reflectors")
        gateway = (g[0], g[1])

    events = []
    last_t = -1.0
    for i, spec in enumerate(doc.get("events", ())):
        where = "events[%d]" % i
        t = spec["t"]
        if t < last_t:
            raise SchemaError("field %s.t: events must be sorted by time" % where)
        last_t = t
        events.append(_parse_event(spec, where, rids, cids, room_members, seen_links))

    return Scenario(
        name=doc["name"],
        seed=seed_override if seed_override is not None else doc.get("seed", 0),
        duration_ms=float(doc["duration_ms"]),
        reflectors=reflectors,
        links=links,
        clients=clients,
        rooms=rooms,
        gateway_pair=gateway,
        config=dict(doc.get("config", {})),
        expect=dict(doc.get("expect", {})),
        events=events,
    )


def _require(spec: dict, name: str, where: str):
    if name not in spec:
        raise SchemaError("field %s.%s: required for action %r" % (where, name, spec["action"]))
    return spec[name]


def _parse_event(spec, where, rids, cids, room_members, seen_links):
    t = float(spec["t"])
    action = spec["action"]
    known = {"t", "action"}
    if action == "kill_reflector":
        rid = _require(spec, "reflector", where)
        if rid not in rids:
            raise SchemaError("field %s.reflector: unknown reflector %d" % (where, rid))
        known.add("reflector")
        _reject_extras(spec, known, where)
        return KillReflector(t, rid)
    if action == "restart_outcomes":
        rid = _require(spec, "reflector", where)
        outcomes = _require(spec, "outcomes", where)
        if rid not in rids:
            raise SchemaError("field %s.reflector: unknown reflector %d" % (where, rid))
        if not isinstance(outcomes, list) or not all(isinstance(o, bool) for o in outcomes):
            raise SchemaError("field %s.outcomes: must be a list of booleans" % where)
        known.update(("reflector", "outcomes"))
        _reject_extras(spec, known, where)
        return RestartOutcomes(t, rid, tuple(outcomes))
    if action == "set_link":
        a = _require(spec, "a", where)
        b = _require(spec, "b", where)
        if a == b or link_key(a, b) not in seen_links:
            raise SchemaError("field %s: no such link (%s, %s)" % (where, a, b))
        params = []
        for name, attr in (
            ("latency_ms", "latency_ms"),
            ("loss", "loss_probability"),
            ("bandwidth_kbps", "bandwidth_kbps"),
            ("up", "up"),
        ):
            if name in spec:
                params.append((attr, spec[name]))
        if not params:
            raise SchemaError("field %s: set_link changes nothing" % where)
        known.update(("a", "b", "latency_ms", "loss", "bandwidth_kbps", "up"))
        _reject_extras(spec, known, where)
        return SetLink(t, *link_key(a, b), params=tuple(params))
    if action == "inject":
        room = _require(spec, "room", where)
        src = _require(spec, "src", where)
        if room not in room_members:
            raise SchemaError("field %s.room: unknown room %d" % (where, room))
        if src not in room_members[room]:
            raise SchemaError("field %s.src: client %d is not in room %d" % (where, src, room))
        count = spec.get("count", 1)
        if not isinstance(count, int) or count < 1:
            raise SchemaError("field %s.count: must be a positive integer" % where)
        payload_bytes = spec.get("payload_bytes", 76)
        if not isinstance(payload_bytes, int) or not 0 <= payload_bytes <= 65535:
            raise SchemaError("field %s.payload_bytes: must be in 0..65535" % where)
        ptype_name = spec.get("payload_type", "opaque")
        if ptype_name not in _PAYLOAD_TYPES:
            raise SchemaError(
                "field %s.payload_type: expected one of %s" % (where, sorted(_PAYLOAD_TYPES))
            )
        known.update(("room", "src", "count", "interval_ms", "payload_bytes", "payload_type"))
        _reject_extras(spec, known, where)
        return InjectTraffic(
            t,
            room=room,
            src=src,
            count=count,
            interval_ms=float(spec.get("interval_ms", 100.0)),
            payload_bytes=payload_bytes,
            payload_type=_PAYLOAD_TYPES[ptype_name],
        )
    if action == "partition":
        isolated = _require(spec, "isolated", where)
        if not isinstance(isolated, list):
            raise SchemaError("field %s.isolated: must be a list of reflector ids" % where)
        for rid in isolated:
            if rid not in rids:
                raise SchemaError("field %s.isolated: unknown reflector %d" % (where, rid))
        known.add("isolated")
        _reject_extras(spec, known, where)
        return Partition(t, frozenset(isolated))
    raise SchemaError("field %s.action: unknown action %r" % (where, action))


def _reject_extras(spec, known, where):
    extras = sorted(set(spec) - known)
    if extras:
        raise SchemaError("field %s.%s: unexpected field" % (where, extras[0]))
