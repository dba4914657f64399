"""Virtual-room reflector overlay: relay plane, control plane, and simulator."""

__version__ = "0.1.0"

from .model import ClientId, LinkStats, MediaPacket, PayloadType, ReflectorId, RoomId
from .wire import decode_media_packet, encode_media_packet
from .reflector import ReflectorEngine, RoutingTable
from .registry import Registry, RegistryEntry, TopologySnapshot
from .monitor import MetricSample, MonitorService
from .quality import QualityFactor, classify_link, raw_quality, update_ewma
from .optimizer import build_graph, compute_room_routes, max_flow, min_spanning_tree, should_reroute
from .supervisor import Supervisor
from .config import OverlayConfig, load_config

__all__ = [
    "__version__",
    "ClientId",
    "LinkStats",
    "MediaPacket",
    "PayloadType",
    "ReflectorId",
    "RoomId",
    "decode_media_packet",
    "encode_media_packet",
    "ReflectorEngine",
    "RoutingTable",
    "Registry",
    "RegistryEntry",
    "TopologySnapshot",
    "MetricSample",
    "MonitorService",
    "QualityFactor",
    "classify_link",
    "raw_quality",
    "update_ewma",
    "build_graph",
    "compute_room_routes",
    "max_flow",
    "min_spanning_tree",
    "should_reroute",
    "Supervisor",
    "OverlayConfig",
    "load_config",
]
