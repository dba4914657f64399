"""Reflector engine: membership, chair controls, forwarding, routing swaps."""
import pytest

from vroverlay.errors import NotAMember, StaleEpoch, UnknownClient, UnknownRoom
from vroverlay.model import MediaPacket, PayloadType
from vroverlay.reflector import (
    ClearSpeaker,
    DeliverLocal,
    JoinResult,
    LocalClient,
    MuteAudio,
    MuteVideo,
    Peer,
    ReflectorEngine,
    RoutingTable,
    SelectSpeaker,
    SendPeer,
    UnmuteAudio,
    UnmuteVideo,
)

R = 1
ROOM = 7


def engine_with_clients(*clients):
    eng = ReflectorEngine(R)
    for c in clients:
        eng.attach_client(c)
    return eng


def packet(src, ptype=PayloadType.OPAQUE, room=ROOM, seq=1):
    return MediaPacket(room=room, src=src, seq=seq, timestamp_ms=0, payload_type=ptype)


def routed(epoch, neighbors, egress):
    return RoutingTable(
        epoch=epoch,
        tree_neighbors=frozenset(neighbors),
        room_egress={room: frozenset(peers) for room, peers in egress.items()},
    )


# --- join / leave ---

def test_join_creates_room():
    eng = engine_with_clients(1)
    assert eng.join_room(1, ROOM) is JoinResult.JOINED
    assert eng.room_members(ROOM) == frozenset({1})


def test_join_is_idempotent_with_warning():
    eng = engine_with_clients(1)
    eng.join_room(1, ROOM)
    assert eng.join_room(1, ROOM) is JoinResult.ALREADY_JOINED
    assert eng.room_members(ROOM) == frozenset({1})


def test_join_unknown_client():
    eng = engine_with_clients(1)
    with pytest.raises(UnknownClient):
        eng.join_room(9, ROOM)


def test_join_counts_cross_checked_with_metrics():
    eng = engine_with_clients(1, 2)
    eng.join_room(1, ROOM)
    eng.join_room(2, ROOM)
    assert eng.room_members(ROOM) == frozenset({1, 2})
    assert eng.client_count() == 2
    assert eng.room_count() == 1


def test_leave_removes_empty_room():
    eng = engine_with_clients(1)
    eng.join_room(1, ROOM)
    eng.leave_room(1, ROOM)
    assert eng.room_count() == 0
    assert eng.room_members(ROOM) == frozenset()


def test_leave_not_a_member():
    eng = engine_with_clients(1, 9)
    eng.join_room(1, ROOM)
    with pytest.raises(NotAMember):
        eng.leave_room(9, ROOM)


def test_leave_clears_speaker_reference():
    eng = engine_with_clients(1, 2)
    eng.join_room(1, ROOM)
    eng.join_room(2, ROOM)
    eng.apply_chair_control(ROOM, SelectSpeaker(1))
    eng.leave_room(1, ROOM)
    assert eng.chair_state(ROOM).selected_speaker is None


def test_membership_change_callback():
    seen = []
    eng = ReflectorEngine(R, on_membership_change=lambda rooms: seen.append(set(rooms)))
    eng.attach_client(1)
    eng.join_room(1, ROOM)
    eng.leave_room(1, ROOM)
    assert seen == [{ROOM}, set()]


def test_detach_client_leaves_all_rooms():
    eng = engine_with_clients(1, 2)
    eng.join_room(1, ROOM)
    eng.join_room(2, ROOM)
    eng.join_room(1, 8)
    eng.detach_client(1)
    assert eng.room_members(ROOM) == frozenset({2})
    assert eng.room_members(8) == frozenset()


# --- forwarding ---

def test_star_fanout_minus_sender():
    eng = engine_with_clients(1, 2, 3)
    for c in (1, 2, 3):
        eng.join_room(c, ROOM)
    actions = eng.forward(packet(src=1), LocalClient(1))
    assert actions == {DeliverLocal(2), DeliverLocal(3)}


def test_forward_includes_pruned_peers_and_excludes_ingress_peer():
    eng = engine_with_clients(2)
    eng.join_room(2, ROOM)
    eng.swap_routing_table(routed(1, {10, 30}, {ROOM: {10, 30}}))
    # Packet arrives from peer 10: local delivery plus peer 30 only.
    actions = eng.forward(packet(src=1), Peer(10))
    assert actions == {DeliverLocal(2), SendPeer(30)}


def test_forward_origin_client_never_receives_own_packet():
    eng = engine_with_clients(1, 2)
    eng.join_room(1, ROOM)
    eng.join_room(2, ROOM)
    eng.swap_routing_table(routed(1, {10}, {ROOM: {10}}))
    actions = eng.forward(packet(src=1), LocalClient(1))
    assert DeliverLocal(1) not in actions
    assert actions == {DeliverLocal(2), SendPeer(10)}


def test_forward_unknown_room_counted_not_raised():
    eng = engine_with_clients(1)
    actions = eng.forward(packet(src=1, room=99), LocalClient(1))
    assert actions == set()
    assert eng.counters.unknown_room_drops == 1


def test_forward_transit_without_local_members():
    eng = ReflectorEngine(R)
    eng.swap_routing_table(routed(1, {10, 30}, {ROOM: {10, 30}}))
    actions = eng.forward(packet(src=5), Peer(10))
    assert actions == {SendPeer(30)}


def test_line_overlay_path_enumeration():
    # Line R1-R2-R3, one client per reflector, all in one room. Expected
    # egress sets computed by hand-walking the tree from the origin.
    engines = {}
    for rid, client, neighbors, egress in (
        (1, 1, {2}, {2}),
        (2, 2, {1, 3}, {1, 3}),
        (3, 3, {2}, {2}),
    ):
        eng = ReflectorEngine(rid)
        eng.attach_client(client)
        eng.join_room(client, ROOM)
        eng.swap_routing_table(routed(1, neighbors, {ROOM: egress}))
        engines[rid] = eng
    p = packet(src=1)
    assert engines[1].forward(p, LocalClient(1)) == {SendPeer(2)}
    assert engines[2].forward(p, Peer(1)) == {DeliverLocal(2), SendPeer(3)}
    assert engines[3].forward(p, Peer(2)) == {DeliverLocal(3)}


# --- chair controls ---

def test_mute_audio_blocks_audio_not_video():
    eng = engine_with_clients(1, 2, 3)
    for c in (1, 2, 3):
        eng.join_room(c, ROOM)
    eng.apply_chair_control(ROOM, MuteAudio(1))
    audio = eng.forward(packet(src=1, ptype=PayloadType.AUDIO_G711U), LocalClient(1))
    video = eng.forward(packet(src=1, ptype=PayloadType.VIDEO_H261), LocalClient(1))
    assert audio == set()
    assert video == {DeliverLocal(2), DeliverLocal(3)}
    assert eng.counters.chair_drops == 1


def test_selected_speaker_filters_video_only():
    eng = engine_with_clients(1, 2, 3)
    for c in (1, 2, 3):
        eng.join_room(c, ROOM)
    eng.apply_chair_control(ROOM, SelectSpeaker(2))
    video_from_1 = eng.forward(packet(src=1, ptype=PayloadType.VIDEO_H261), LocalClient(1))
    video_from_2 = eng.forward(packet(src=2, ptype=PayloadType.VIDEO_H261), LocalClient(2))
    audio_from_1 = eng.forward(packet(src=1, ptype=PayloadType.AUDIO_G711U), LocalClient(1))
    assert video_from_1 == set()
    assert video_from_2 == {DeliverLocal(1), DeliverLocal(3)}
    assert audio_from_1 == {DeliverLocal(2), DeliverLocal(3)}


def test_mute_unmute_round_trip_restores_state():
    eng = engine_with_clients(1, 2)
    eng.join_room(1, ROOM)
    eng.join_room(2, ROOM)
    before = eng.chair_state(ROOM)
    eng.apply_chair_control(ROOM, MuteAudio(1))
    eng.apply_chair_control(ROOM, UnmuteAudio(1))
    assert eng.chair_state(ROOM) == before
    eng.apply_chair_control(ROOM, MuteVideo(1))
    eng.apply_chair_control(ROOM, UnmuteVideo(1))
    assert eng.chair_state(ROOM) == before
    eng.apply_chair_control(ROOM, SelectSpeaker(2))
    eng.apply_chair_control(ROOM, ClearSpeaker())
    assert eng.chair_state(ROOM) == before


def test_chair_requires_membership_for_select_and_mute():
    eng = engine_with_clients(1, 9)
    eng.join_room(1, ROOM)
    with pytest.raises(NotAMember):
        eng.apply_chair_control(ROOM, SelectSpeaker(9))
    with pytest.raises(NotAMember):
        eng.apply_chair_control(ROOM, MuteAudio(9))
    with pytest.raises(UnknownRoom):
        eng.apply_chair_control(55, MuteAudio(1))


def test_chair_state_is_copied_out():
    eng = engine_with_clients(1)
    eng.join_room(1, ROOM)
    state = eng.apply_chair_control(ROOM, MuteAudio(1))
    state.muted_audio.clear()
    assert eng.chair_state(ROOM).muted_audio == {1}


# --- routing swaps ---

def test_swap_accepts_newer_epoch_and_returns_old():
    eng = ReflectorEngine(R)
    assert eng.swap_routing_table(routed(1, {2}, {})) == 0
    assert eng.swap_routing_table(routed(2, {2}, {})) == 1
    assert eng.routing.epoch == 2


def test_swap_rejects_stale_epoch():
    eng = ReflectorEngine(R)
    eng.swap_routing_table(routed(2, {2}, {}))
    with pytest.raises(StaleEpoch):
        eng.swap_routing_table(routed(1, {2}, {}))
    with pytest.raises(StaleEpoch):
        eng.swap_routing_table(routed(2, {2}, {}))
    assert eng.routing.epoch == 2


def test_swap_same_content_new_epoch_keeps_behavior():
    eng = engine_with_clients(2)
    eng.join_room(2, ROOM)
    table = {ROOM: {10}}
    eng.swap_routing_table(routed(1, {10}, table))
    before = eng.forward(packet(src=1), Peer(10))
    eng.swap_routing_table(routed(2, {10}, table))
    after = eng.forward(packet(src=1), Peer(10))
    assert before == after


def test_egress_actions_distinct_across_types():
    # DeliverLocal(5) and SendPeer(5) must coexist in one action set.
    assert DeliverLocal(5) != SendPeer(5)
    assert len({DeliverLocal(5), SendPeer(5)}) == 2


def test_ingress_peer_never_in_egress_property():
    import random

    rng = random.Random(314)
    for _ in range(200):
        eng = ReflectorEngine(R)
        neighbors = frozenset(rng.sample(range(10, 30), k=rng.randrange(1, 6)))
        egress = frozenset(rng.sample(sorted(neighbors), k=rng.randrange(0, len(neighbors) + 1)))
        eng.swap_routing_table(routed(1, neighbors, {ROOM: egress}))
        ingress_peer = rng.choice(sorted(neighbors))
        actions = eng.forward(packet(src=99), Peer(ingress_peer))
        assert SendPeer(ingress_peer) not in actions
        assert actions == {SendPeer(p) for p in egress if p != ingress_peer}
