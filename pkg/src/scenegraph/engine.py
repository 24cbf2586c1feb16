"""Engine composing ingestion, visual memory, objects, places, and regions.

One ingestion writer owns all mutation: submap assembly, place merging,
observation statistics, and pose updates happen under a single lock, so any
number of readers see a consistent snapshot covering whole submaps. Queries
are pure reads except for their cache insertions, which are serialized.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .frame_ingest import (
    FramePacket,
    IngestError,
    PointCloud,
    PoseUpdateEvent,
    assemble_submap,
    backproject,
)
from .object_layer import (
    CachedObject,
    DegenerateGeometry,
    ObjectCache,
    fit_oriented_bbox,
    merge_instance_candidates,
)
from .places_layer import (
    PlacesError,
    PlacesGraph,
    bin_tiles,
    build_graph,
    clearance_filter,
    fit_ground_plane,
    merge_tiles,
    plan_path,
    quadrant_filter,
)
from .regions_layer import (
    DEFAULT_OBSERVATION_RANGE,
    PlaceStat,
    PropagationParams,
    closed_vocab_partition,
    query_region,
    query_seed,
)
from .transforms import apply_transform, project_points, voxel_downsample
from .visual_memory import (
    QueryEmbedding,
    RetrievalParams,
    VisualMemory,
    retrieve_instances,
)


@dataclass
class EngineConfig:
    submap_size: int = 16
    confidence_threshold: float = 0.5
    tile_size: float = 0.35
    plane_tol: float = 0.05
    d_max: float = 1.5
    voxel_size: float = 0.05
    observation_range: float = DEFAULT_OBSERVATION_RANGE
    min_region_size: int = 4
    min_plane_points: int = 50
    retrieval: RetrievalParams = field(default_factory=RetrievalParams)
    seed: int = 0


@dataclass
class SubmapState:
    submap: object
    plane: object = None
    candidates: list = field(default_factory=list)   # creation-frame tiles
    sparse_ground: np.ndarray = None
    sparse_obstacles: np.ndarray = None


class SceneGraphEngine:
    def __init__(self, manifest, config=None):
        self.manifest = manifest
        self.config = config or EngineConfig(submap_size=manifest.submap_size)
        self.memory = VisualMemory(embedding_dim=manifest.embedding_dim)
        self.packets = {}
        self.submaps = []
        self.graph = PlacesGraph(tile_size=self.config.tile_size)
        self.stats = {}
        self.object_cache = ObjectCache()
        self.region_cache = {}
        self.oracle = None
        self.concept_provider = None
        self._seen_keyframes = set()
        self._next_tile_id = 0
        self._pending = []
        self._lock = threading.RLock()

    # ------------------------------------------------------------------ wiring

    def attach_oracle(self, oracle):
        self.oracle = oracle

    def attach_concept_provider(self, provider):
        """provider(text) -> unit query vector (e.g. a session codebook)."""
        self.concept_provider = provider

    def as_query(self, text_or_query):
        if isinstance(text_or_query, QueryEmbedding):
            return text_or_query
        if self.concept_provider is None:
            raise ValueError("no concept provider attached; pass a QueryEmbedding")
        return QueryEmbedding(
            text=text_or_query, vector=self.concept_provider(text_or_query)
        )

    # ------------------------------------------------------------------ ingest

    def ingest_packet(self, packet):
        """Buffer one packet; a full buffer commits a submap."""
        with self._lock:
            self._pending.append(packet)
            if len(self._pending) >= self.config.submap_size:
                self._commit_submap()

    def finish_ingest(self):
        with self._lock:
            if self._pending:
                self._commit_submap()

    def ingest_all(self, packets):
        for packet in packets:
            self.ingest_packet(packet)
        self.finish_ingest()

    def _commit_submap(self):
        batch = self._pending
        self._pending = []
        submap = assemble_submap(
            batch, self.config.submap_size, len(self.submaps), self._seen_keyframes
        )
        state = SubmapState(submap=submap)
        self.submaps.append(state)
        for packet in batch:
            self.packets[packet.keyframe_id] = packet
            self.memory.insert_entry(
                packet.keyframe_id, submap.submap_id, packet.embedding
            )

        thr = self.config.confidence_threshold
        ground_parts = []
        obstacle_parts = []
        for packet in batch:
            ground_parts.append(
                backproject(packet, packet.ground_mask, thr).points
            )
            obstacle_parts.append(
                backproject(packet, 1 - packet.ground_mask, thr).points
            )
        ground = (
            np.vstack([p for p in ground_parts if len(p)])
            if any(len(p) for p in ground_parts)
            else np.empty((0, 3))
        )
        obstacles = (
            np.vstack([p for p in obstacle_parts if len(p)])
            if any(len(p) for p in obstacle_parts)
            else np.empty((0, 3))
        )
        state.sparse_ground = voxel_downsample(ground, self.config.voxel_size)
        state.sparse_obstacles = voxel_downsample(obstacles, self.config.voxel_size)

        candidates = []
        if len(ground) >= self.config.min_plane_points:
            rng = np.random.default_rng(
                np.random.SeedSequence([self.config.seed, 1, submap.submap_id])
            )
            cam_positions = [p.pose[:3, 3] for p in batch]
            try:
                plane = fit_ground_plane(
                    ground,
                    cam_positions,
                    rng,
                    plane_tol=self.config.plane_tol,
                    min_points=self.config.min_plane_points,
                )
            except PlacesError:
                plane = None
            if plane is not None:
                state.plane = plane
                tiles = bin_tiles(
                    ground,
                    plane,
                    self.config.tile_size,
                    plane_tol=self.config.plane_tol,
                    submap_id=submap.submap_id,
                    id_start=self._next_tile_id,
                )
                self._next_tile_id += len(tiles)
                tiles = quadrant_filter(tiles)
                candidates = clearance_filter(
                    tiles,
                    self._effective_obstacles(),
                    plane,
                    self.config.tile_size,
                    d_max=self.config.d_max,
                    plane_tol=self.config.plane_tol,
                )
        state.candidates = candidates

        before = set(self.graph.nodes)
        merge_tiles(self.graph, candidates, plane_tol=self.config.plane_tol)
        new_tiles = sorted(set(self.graph.nodes) - before)
        for tid in new_tiles:
            self.stats[tid] = PlaceStat(
                place_id=tid, dim=self.manifest.embedding_dim
            )

        # Observation order stays ascending per tile: old keyframes reach new
        # tiles first, then this batch reaches every tile.
        batch_ids = sorted(p.keyframe_id for p in batch)
        older = sorted(k for k in self.packets if k not in set(batch_ids))
        self._attach_observations(older, new_tiles)
        self._attach_observations(batch_ids, self.graph.sorted_ids())

    def _effective_obstacles(self):
        parts = []
        for state in self.submaps:
            pts = state.sparse_obstacles
            if pts is None or len(pts) == 0:
                continue
            base = state.submap.base_transform
            parts.append(
                pts if np.allclose(base, np.eye(4)) else apply_transform(base, pts)
            )
        return np.vstack(parts) if parts else np.empty((0, 3))

    # ------------------------------------------------------------- observations

    def effective_pose(self, keyframe_id):
        packet = self.packets[keyframe_id]
        base = self.submaps[self.memory.submap_of(keyframe_id)].submap.base_transform
        if np.allclose(base, np.eye(4)):
            return packet.pose
        return base @ packet.pose

    def effective_packet(self, keyframe_id):
        packet = self.packets[keyframe_id]
        pose = self.effective_pose(keyframe_id)
        return packet if pose is packet.pose else packet.with_pose(pose)

    def _observes(self, keyframe_id, centroid):
        packet = self.packets[keyframe_id]
        pose = self.effective_pose(keyframe_id)
        u, v, z = project_points(centroid[None, :], pose, packet.intrinsics)
        if z[0] <= 0:
            return False
        h, w = packet.shape
        if not (0 <= u[0] < w and 0 <= v[0] < h):
            return False
        cam = pose[:3, 3]
        return float(np.linalg.norm(centroid - cam)) <= self.config.observation_range

    def _attach_observations(self, keyframe_ids, tile_ids):
        # Keyframes outer / tiles inner keeps each tile's additions in
        # ascending keyframe order, so incremental refits equal batch refits.
        tile_ids = sorted(tile_ids)
        if not tile_ids:
            return
        centroids = np.stack([self.graph.nodes[t].centroid for t in tile_ids])
        for kid in sorted(keyframe_ids):
            packet = self.packets[kid]
            pose = self.effective_pose(kid)
            u, v, z = project_points(centroids, pose, packet.intrinsics)
            h, w = packet.shape
            in_view = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
            dist = np.linalg.norm(centroids - pose[:3, 3], axis=1)
            observed = in_view & (dist <= self.config.observation_range)
            embedding = packet.embedding
            for idx in np.nonzero(observed)[0]:
                self.stats[tile_ids[idx]].add(embedding)

    def _rebuild_stats(self):
        self.stats = {
            tid: PlaceStat(place_id=tid, dim=self.manifest.embedding_dim)
            for tid in self.graph.sorted_ids()
        }
        self._attach_observations(sorted(self.packets), self.graph.sorted_ids())

    # ------------------------------------------------------------- pose updates

    def apply_pose_update(self, event):
        """Rigidly move one submap; re-merge tiles and refresh statistics."""
        with self._lock:
            if isinstance(event, tuple):
                event = PoseUpdateEvent(submap_id=event[0], transform=event[1])
            event.validate()
            if not (0 <= event.submap_id < len(self.submaps)):
                raise IngestError(f"unknown submap_id {event.submap_id}")
            state = self.submaps[event.submap_id]
            state.submap.base_transform = (
                event.transform @ state.submap.base_transform
            )
            self._rebuild_places()
            self._rebuild_stats()
            self._move_cached_objects(event.submap_id, event.transform)
            self.region_cache.clear()
            return {
                "submap_id": event.submap_id,
                "places": len(self.graph),
                "edges": len(self.graph.edges),
            }

    def _rebuild_places(self):
        moved = []
        for state in self.submaps:
            base = state.submap.base_transform
            identity = np.allclose(base, np.eye(4))
            for tile in state.candidates:
                moved.append(tile if identity else tile.moved(base))
        moved.sort(key=lambda t: t.tile_id)
        self.graph = build_graph(
            moved, self.config.tile_size, plane_tol=self.config.plane_tol
        )

    def _move_cached_objects(self, submap_id, transform):
        for key in self.object_cache.queries():
            for obj in self.object_cache.get(key):
                if submap_id not in obj.source_submaps:
                    continue
                sources = np.array(
                    [self.memory.submap_of(int(k)) for k in obj.points.keyframe_ids]
                )
                moved_mask = sources == submap_id
                pts = obj.points.points
                pts[moved_mask] = apply_transform(transform, pts[moved_mask])
                if set(obj.source_submaps) == {submap_id}:
                    obj.box = obj.box.transformed(transform)
                else:
                    obj.box = fit_oriented_bbox(obj.points)

    # ------------------------------------------------------------ object queries

    def query_object(self, text_or_query, params=None, oracle=None):
        """Cache-first object query; returns (objects, cache_hit)."""
        query = self.as_query(text_or_query)
        with self._lock:
            if query.text in self.object_cache:
                return self.object_cache.get(query.text), True
            oracle = oracle or self.oracle
            if oracle is None:
                raise ValueError("no mask oracle attached")
            params = params or self.config.retrieval
            thr = self.config.confidence_threshold
            built = []

            def box_builder(keyframe_id, mask):
                cloud = backproject(self.effective_packet(keyframe_id), mask, thr)
                if len(cloud) < 3:
                    return None
                try:
                    box = fit_oriented_bbox(cloud)
                except DegenerateGeometry:
                    return None
                built.append((keyframe_id, cloud, box))
                return box

            retrieve_instances(
                self.memory,
                query,
                oracle,
                params,
                packet_provider=self.effective_packet,
                box_builder=box_builder,
                prior_boxes=(),
            )
            objects = []
            for kids, cloud, box in merge_instance_candidates(built):
                objects.append(
                    CachedObject(
                        object_id=self.object_cache.allocate_id(),
                        query_text=query.text,
                        points=cloud,
                        box=box,
                        source_keyframes=sorted(set(kids)),
                        source_submaps=sorted(
                            {self.memory.submap_of(k) for k in kids}
                        ),
                    )
                )
            self.object_cache.put(query.text, objects)
            return objects, False

    # ------------------------------------------------------------ region queries

    def region_params(self):
        return PropagationParams(min_size=self.config.min_region_size)

    def query_region(self, text_or_query):
        query = self.as_query(text_or_query)
        key = query.text.strip().lower()
        with self._lock:
            if key in self.region_cache:
                return self.region_cache[key], True
            rng = np.random.default_rng(
                query_seed(self.config.seed, "region:" + key)
            )
            result = query_region(
                self.stats, self.graph, query, rng, self.region_params()
            )
            self.region_cache[key] = result
            return result, False

    def partition(self, category_texts):
        categories = [self.as_query(t) for t in category_texts]
        louvain_seed = int(
            np.random.SeedSequence([self.config.seed, 2]).generate_state(1)[0]
        )
        labels, info = closed_vocab_partition(
            self.stats,
            self.graph,
            categories,
            rng=None,
            params=self.region_params(),
            louvain_seed=louvain_seed,
        )
        named = {tid: categories[c].text for tid, c in labels.items()}
        return named, info

    # ------------------------------------------------------------------ planning

    def plan(self, start, goal):
        path = plan_path(self.graph, start, goal)
        polyline = [self.graph.nodes[t].centroid.tolist() for t in path]
        return path, polyline

    # ------------------------------------------------------------------- reports

    def summary(self):
        return {
            "keyframes": len(self.packets),
            "submaps": len(self.submaps),
            "embedding_dim": self.manifest.embedding_dim,
            "places": len(self.graph),
            "edges": len(self.graph.edges),
            "sparse_points": int(
                sum(
                    len(s.sparse_ground) + len(s.sparse_obstacles)
                    for s in self.submaps
                    if s.sparse_ground is not None
                )
            ),
            "cached_object_queries": len(self.object_cache.queries()),
            "cached_objects": sum(
                len(self.object_cache.get(k)) for k in self.object_cache.queries()
            ),
        }

    def export_places(self):
        nodes = [
            {
                "tile_id": tid,
                "submap_id": self.graph.nodes[tid].submap_id,
                "centroid": self.graph.nodes[tid].centroid.tolist(),
            }
            for tid in self.graph.sorted_ids()
        ]
        edges = [[a, b] for a, b in sorted(self.graph.edges)]
        return {"nodes": nodes, "edges": edges}

    def state_digest(self):
        """Canonical serialization of the mutable scene-graph state."""
        import json

        places = self.export_places()
        stats = [
            {
                "place_id": tid,
                "count": self.stats[tid].count,
                "kappa": self.stats[tid].kappa,
                "resultant": self.stats[tid].resultant_sum.tolist(),
            }
            for tid in self.graph.sorted_ids()
        ]
        objects = [
            {
                "object_id": obj.object_id,
                "query": obj.query_text,
                "center": obj.box.center.tolist(),
                "half_extents": obj.box.half_extents.tolist(),
                "points": len(obj.points),
                "keyframes": list(map(int, obj.source_keyframes)),
            }
            for obj in self.object_cache.all_objects()
        ]
        return json.dumps(
            {"places": places, "stats": stats, "objects": objects},
            sort_keys=True,
        )
