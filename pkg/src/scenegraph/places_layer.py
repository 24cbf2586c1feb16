"""Traversability graph over ground tiles: plane fit, binning, filters,
cross-submap merging, and Dijkstra planning.

Tiles come from binning ground-labeled points on a per-submap RANSAC plane.
A tile survives only if all four of its quadrants hold points (boundary
filter) and nothing hangs over it between tau_plane and d_max (clearance
filter). Merging prunes overlapping tiles (existing wins) and connects nodes
within 1.5 * tile_size at compatible plane heights, so stacked floors stay
disconnected.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_TILE_SIZE = 0.35
DEFAULT_PLANE_TOL = 0.05
DEFAULT_CLEARANCE = 1.5
DEFAULT_MIN_PLANE_POINTS = 50
RANSAC_ITERATIONS = 200
MIN_INLIER_RATIO = 0.3
EDGE_FACTOR = 1.5
PRUNE_FACTOR = 0.5
SNAP_FACTOR = 3.0
EDGE_EPS = 1e-9


class PlacesError(ValueError):
    pass


@dataclass
class GroundPlane:
    normal: np.ndarray  # unit 3-vector
    offset: float       # plane is {x : <normal, x> = offset}

    def distance(self, points):
        pts = np.atleast_2d(points)
        return pts @ self.normal - self.offset

    def basis(self):
        """Deterministic in-plane axes (u, v) with origin normal * offset."""
        n = self.normal
        pick = np.argmin(np.abs(n))
        e = np.zeros(3)
        e[pick] = 1.0
        u = e - (e @ n) * n
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return u, v

    def transformed(self, T):
        normal = T[:3, :3] @ self.normal
        point = T[:3, :3] @ (self.normal * self.offset) + T[:3, 3]
        return GroundPlane(normal=normal, offset=float(normal @ point))


@dataclass
class PlaceTile:
    tile_id: int
    submap_id: int
    grid_index: tuple
    centroid: np.ndarray          # 3D tile-square center lifted onto the plane
    support_count: int
    quadrant_counts: np.ndarray   # (4,) point counts per tile quadrant
    normal: np.ndarray            # plane normal of the source submap
    plane_height: float           # <normal, centroid>, used for edge gating
    local_points: np.ndarray      # (m, 2) tile-local 2D coords, for auditing

    def moved(self, T):
        centroid = T[:3, :3] @ self.centroid + T[:3, 3]
        normal = T[:3, :3] @ self.normal
        return replace(
            self,
            centroid=centroid,
            normal=normal,
            plane_height=float(normal @ centroid),
        )


@dataclass
class PlacesGraph:
    tile_size: float
    nodes: dict = field(default_factory=dict)   # tile_id -> PlaceTile
    edges: set = field(default_factory=set)     # (a, b) with a < b
    adjacency: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.nodes)

    def add_node(self, tile):
        self.nodes[tile.tile_id] = tile
        self.adjacency.setdefault(tile.tile_id, set())

    def add_edge(self, a, b):
        if a == b:
            return
        key = (min(a, b), max(a, b))
        if key in self.edges:
            return
        self.edges.add(key)
        self.adjacency[a].add(b)
        self.adjacency[b].add(a)

    def degree(self, tile_id):
        return len(self.adjacency.get(tile_id, ()))

    def sorted_ids(self):
        return sorted(self.nodes)


def fit_ground_plane(points, camera_positions, rng,
                     plane_tol=DEFAULT_PLANE_TOL,
                     min_points=DEFAULT_MIN_PLANE_POINTS,
                     iterations=RANSAC_ITERATIONS):
    """Seeded RANSAC plane with a least-squares refit over the inliers.

    The normal is oriented toward the mean camera position of the submap.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < min_points:
        raise PlacesError(f"too few points for a plane fit ({pts.shape[0]})")
    n = pts.shape[0]
    best_count = -1
    best_inliers = None
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        p0, p1, p2 = pts[idx]
        normal = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        dist = np.abs((pts - p0) @ normal)
        inliers = dist <= plane_tol
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None or best_count / n < MIN_INLIER_RATIO:
        raise PlacesError("unreliable ground (inlier ratio below 0.3)")

    inlier_pts = pts[best_inliers]
    centroid = inlier_pts.mean(axis=0)
    _, _, vt = np.linalg.svd(inlier_pts - centroid, full_matrices=False)
    normal = vt[-1]
    cam_mean = np.asarray(camera_positions, dtype=np.float64).reshape(-1, 3).mean(axis=0)
    if normal @ (cam_mean - centroid) < 0:
        normal = -normal
    return GroundPlane(normal=normal, offset=float(normal @ centroid))


def bin_tiles(points, plane, tile_size,
              plane_tol=DEFAULT_PLANE_TOL,
              submap_id=0, id_start=0):
    """Bin on-plane points into square tiles; returns tiles sorted by grid index.

    Only points within plane_tol of the plane participate. Tile (i, j) covers
    [i*n, (i+1)*n) x [j*n, (j+1)*n) in the plane frame; its centroid is the 3D
    center of the square lifted onto the plane. Quadrant counts and tile-local
    coordinates are retained so filter decisions can be re-derived.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        return []
    on_plane = np.abs(plane.distance(pts)) <= plane_tol
    pts = pts[on_plane]
    if pts.shape[0] == 0:
        return []
    u, v = plane.basis()
    origin = plane.normal * plane.offset
    rel = pts - origin
    coords = np.stack([rel @ u, rel @ v], axis=1)
    grid = np.floor(coords / tile_size).astype(np.int64)

    tiles = []
    order = np.lexsort((grid[:, 1], grid[:, 0]))
    grid_sorted = grid[order]
    coords_sorted = coords[order]
    boundaries = np.any(np.diff(grid_sorted, axis=0) != 0, axis=1)
    starts = np.concatenate(([0], np.nonzero(boundaries)[0] + 1))
    ends = np.concatenate((starts[1:], [len(grid_sorted)]))
    next_id = id_start
    for s, e in zip(starts, ends):
        i, j = int(grid_sorted[s, 0]), int(grid_sorted[s, 1])
        local = coords_sorted[s:e] - np.array([i * tile_size, j * tile_size])
        qx = (local[:, 0] >= tile_size / 2).astype(np.int64)
        qy = (local[:, 1] >= tile_size / 2).astype(np.int64)
        quad = np.bincount(qx * 2 + qy, minlength=4)
        cu = (i + 0.5) * tile_size
        cv = (j + 0.5) * tile_size
        centroid = origin + cu * u + cv * v
        tiles.append(
            PlaceTile(
                tile_id=next_id,
                submap_id=submap_id,
                grid_index=(i, j),
                centroid=centroid,
                support_count=e - s,
                quadrant_counts=quad,
                normal=plane.normal.copy(),
                plane_height=float(plane.normal @ centroid),
                local_points=local,
            )
        )
        next_id += 1
    return tiles


def quadrant_filter(tiles):
    """Keep a tile iff every quadrant holds at least one point."""
    return [t for t in tiles if np.all(t.quadrant_counts >= 1)]


def clearance_filter(tiles, scene_points, plane, tile_size,
                     d_max=DEFAULT_CLEARANCE, plane_tol=DEFAULT_PLANE_TOL):
    """Drop tiles lying under obstacle points within (plane_tol, d_max].

    Obstacle points project along the plane normal; a tile is removed when any
    such point lands inside its square at clearance-blocking height.
    """
    if d_max <= 0:
        raise PlacesError("d_max must be positive")
    if not tiles:
        return []
    pts = np.asarray(scene_points, dtype=np.float64)
    if pts.shape[0] == 0:
        return list(tiles)
    heights = plane.distance(pts)
    blocking = (heights > plane_tol) & (heights <= d_max)
    pts = pts[blocking]
    if pts.shape[0] == 0:
        return list(tiles)
    u, v = plane.basis()
    origin = plane.normal * plane.offset
    rel = pts - origin
    coords = np.stack([rel @ u, rel @ v], axis=1)
    blocked = set(
        map(tuple, np.floor(coords / tile_size).astype(np.int64))
    )
    return [t for t in tiles if t.grid_index not in blocked]


def _height_compatible(a, b, plane_tol):
    da = abs(a.normal @ (b.centroid - a.centroid))
    db = abs(b.normal @ (a.centroid - b.centroid))
    return max(da, db) <= 2.0 * plane_tol


def merge_tiles(graph, new_tiles, plane_tol=DEFAULT_PLANE_TOL):
    """Merge new tiles into the graph: overlap pruning plus 1.5n edges.

    A new tile landing within 0.5n of an existing node is dropped (existing
    wins, which keeps tile ids stable). Surviving tiles become nodes; edges
    connect any pair within 1.5n whose plane heights are compatible. Mutates
    and returns the graph.
    """
    n = graph.tile_size
    r_prune = PRUNE_FACTOR * n
    max_edge = EDGE_FACTOR * n + EDGE_EPS
    for tile in new_tiles:
        existing = list(graph.nodes.values())
        if existing:
            dists = np.linalg.norm(
                np.stack([t.centroid for t in existing]) - tile.centroid, axis=1
            )
            if np.any(dists < r_prune):
                continue
        graph.add_node(tile)
        for other in existing:
            if (
                np.linalg.norm(other.centroid - tile.centroid) <= max_edge
                and _height_compatible(tile, other, plane_tol)
            ):
                graph.add_edge(tile.tile_id, other.tile_id)
    return graph


def build_graph(candidate_tiles, tile_size, plane_tol=DEFAULT_PLANE_TOL):
    """Merge candidates (in order) into a fresh graph; used for rebuilds."""
    graph = PlacesGraph(tile_size=tile_size)
    merge_tiles(graph, candidate_tiles, plane_tol=plane_tol)
    return graph


def snap_to_node(graph, point, snap_radius):
    pts = np.asarray(point, dtype=np.float64)
    best = None
    for tile_id in graph.sorted_ids():
        d = float(np.linalg.norm(graph.nodes[tile_id].centroid - pts))
        if best is None or d < best[0] - 1e-12:
            best = (d, tile_id)
    if best is None or best[0] > snap_radius:
        raise PlacesError(f"no node within snap radius of {pts.tolist()}")
    return best[1]


def plan_path(graph, start, goal, snap_radius=None):
    """Minimum-Euclidean-length Dijkstra path between snapped endpoints.

    Ties break toward the lexicographically smaller tile-id sequence.
    Returns the list of tile ids along the path.
    """
    if len(graph) == 0:
        raise PlacesError("places graph is empty")
    if snap_radius is None:
        snap_radius = SNAP_FACTOR * graph.tile_size
    src = snap_to_node(graph, start, snap_radius)
    dst = snap_to_node(graph, goal, snap_radius)
    if src == dst:
        return [src]
    heap = [(0.0, (src,))]
    settled = set()
    while heap:
        dist, path = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled.add(node)
        if node == dst:
            return list(path)
        pos = graph.nodes[node].centroid
        for nb in sorted(graph.adjacency[node]):
            if nb in settled:
                continue
            w = float(np.linalg.norm(graph.nodes[nb].centroid - pos))
            heapq.heappush(heap, (dist + w, path + (nb,)))
    raise PlacesError(f"no path between tiles {src} and {dst}")


def path_cost(graph, path):
    cost = 0.0
    for a, b in zip(path, path[1:]):
        cost += float(
            np.linalg.norm(graph.nodes[b].centroid - graph.nodes[a].centroid)
        )
    return cost
