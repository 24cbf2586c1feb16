"""Incremental task-driven hierarchical 3D scene graph engine.

Layers: a keyframe visual memory for query-time object formation, a
deformable traversability graph of ground tiles, and query-time semantic
regions over those tiles. Object and region granularity is resolved when a
query arrives, not when frames are mapped.
"""

from .engine import EngineConfig, SceneGraphEngine
from .frame_ingest import (
    FramePacket,
    IngestError,
    PointCloud,
    PoseUpdateEvent,
    SessionManifest,
    Submap,
    backproject,
    parse_frame_packet,
    read_session,
    write_frame_packet,
)
from .object_layer import (
    CachedObject,
    OrientedBBox,
    evaluate_objects,
    fit_oriented_bbox,
    iou_3d,
    osr_match,
)
from .places_layer import PlacesGraph, PlaceTile, plan_path
from .regions_layer import PlaceStat, PropagationParams, RegionQueryResult
from .visual_memory import QueryEmbedding, RetrievalParams, VisualMemory

__all__ = [
    "EngineConfig",
    "SceneGraphEngine",
    "FramePacket",
    "IngestError",
    "PointCloud",
    "PoseUpdateEvent",
    "SessionManifest",
    "Submap",
    "backproject",
    "parse_frame_packet",
    "read_session",
    "write_frame_packet",
    "CachedObject",
    "OrientedBBox",
    "evaluate_objects",
    "fit_oriented_bbox",
    "iou_3d",
    "osr_match",
    "PlacesGraph",
    "PlaceTile",
    "plan_path",
    "PlaceStat",
    "PropagationParams",
    "RegionQueryResult",
    "QueryEmbedding",
    "RetrievalParams",
    "VisualMemory",
]

__version__ = "0.1.0"
