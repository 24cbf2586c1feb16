"""Independent test oracles: brute-force and closed-form counterparts of the
engine's algorithms. Nothing here imports the code paths it checks."""

from __future__ import annotations

import numpy as np


def backproject_loop(pose, intrinsics, depth, confidence, pixel_mask, threshold):
    """Per-pixel reference back-projection (plain Python loop)."""
    fx, fy, cx, cy = intrinsics
    h, w = depth.shape
    out = []
    for v in range(h):
        for u in range(w):
            if not pixel_mask[v, u]:
                continue
            if confidence[v, u] < threshold:
                continue
            d = float(depth[v, u])
            if d <= 0:
                continue
            cam = np.array([d * (u - cx) / fx, d * (v - cy) / fy, d, 1.0])
            world = pose @ cam
            out.append(world[:3])
    return np.array(out) if out else np.empty((0, 3))


def bellman_ford(n_nodes, edges, source):
    """Reference shortest-path distances; edges are (a, b, weight)."""
    dist = {k: np.inf for k in range(n_nodes)}
    dist[source] = 0.0
    for _ in range(n_nodes - 1):
        changed = False
        for a, b, w in edges:
            if dist[a] + w < dist[b]:
                dist[b] = dist[a] + w
                changed = True
            if dist[b] + w < dist[a]:
                dist[a] = dist[b] + w
                changed = True
        if not changed:
            break
    return dist


def bellman_ford_ids(node_ids, edges, source):
    """Same, keyed by arbitrary hashable node ids."""
    dist = {k: np.inf for k in node_ids}
    dist[source] = 0.0
    for _ in range(len(node_ids) - 1):
        changed = False
        for a, b, w in edges:
            if dist[a] + w < dist[b]:
                dist[b] = dist[a] + w
                changed = True
            if dist[b] + w < dist[a]:
                dist[a] = dist[b] + w
                changed = True
        if not changed:
            break
    return dist


def merge_bruteforce(tiles, tile_size, plane_tol):
    """Reference merge: sequential overlap prune plus all-pairs edge rule.

    tiles: list of (tile_id, centroid(3,), normal(3,)). Returns (kept ids,
    edge set of sorted id pairs).
    """
    kept = []
    for tid, centroid, normal in tiles:
        drop = False
        for _, c2, _ in kept:
            if np.linalg.norm(centroid - c2) < 0.5 * tile_size:
                drop = True
                break
        if not drop:
            kept.append((tid, centroid, normal))
    edges = set()
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            ti, ci, ni = kept[i]
            tj, cj, nj = kept[j]
            if np.linalg.norm(ci - cj) > 1.5 * tile_size + 1e-9:
                continue
            da = abs(ni @ (cj - ci))
            db = abs(nj @ (ci - cj))
            if max(da, db) <= 2.0 * plane_tol:
                edges.add((min(ti, tj), max(ti, tj)))
    return [t[0] for t in kept], edges


def propagation_linear_solve(scores, adjacency, alphas):
    """Dense solve of (I - (I - A) P) x = A s with P row-normalized."""
    n = len(scores)
    P = np.zeros((n, n))
    for i, nbrs in enumerate(adjacency):
        if len(nbrs):
            P[i, list(nbrs)] = 1.0 / len(nbrs)
    A = np.diag(alphas)
    M = np.eye(n) - (np.eye(n) - A) @ P
    return np.linalg.solve(M, A @ np.asarray(scores, dtype=np.float64))


def weighted_modularity(nodes, edges, weights, communities):
    """Q = (1/2m) sum_ij [A_ij - k_i k_j / 2m] delta(c_i, c_j)."""
    strength = {v: 0.0 for v in nodes}
    two_m = 0.0
    for (a, b), w in zip(edges, weights):
        strength[a] += w
        strength[b] += w
        two_m += 2.0 * w
    if two_m == 0:
        return 0.0
    comm = {}
    for ci, members in enumerate(communities):
        for v in members:
            comm[v] = ci
    q = 0.0
    for (a, b), w in zip(edges, weights):
        if comm[a] == comm[b]:
            q += 2.0 * w
    for v in nodes:
        for u in nodes:
            if comm[v] == comm[u]:
                q -= strength[v] * strength[u] / two_m
    return q / two_m


def best_two_cut(nodes, edges, weights):
    """Brute-force max-modularity bipartition (<= ~14 nodes)."""
    nodes = list(nodes)
    n = len(nodes)
    best_q = -np.inf
    best = None
    for mask in range(1, 2 ** (n - 1)):
        side_a = [nodes[k] for k in range(n) if mask >> k & 1]
        side_b = [nodes[k] for k in range(n) if not (mask >> k & 1)]
        q = weighted_modularity(nodes, edges, weights, [side_a, side_b])
        if q > best_q:
            best_q = q
            best = (set(side_a), set(side_b))
    return best, best_q


class UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def components(self):
        groups = {}
        for i in self.parent:
            groups.setdefault(self.find(i), set()).add(i)
        return sorted(groups.values(), key=min)


def components_union_find(node_ids, edges):
    uf = UnionFind(node_ids)
    for a, b in edges:
        uf.union(a, b)
    return uf.components()


def gmm_loglik(x, means, variances, weights):
    pdf = np.zeros(len(x))
    for mu, var, w in zip(means, variances, weights):
        pdf += w * np.exp(-((x - mu) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var)
    return float(np.log(pdf).sum())


def gmm_grid_search(x, n_mu=5, n_sigma=2, n_weight=2):
    """Coarse 100-point grid over (mu1, mu2, shared sigma, weight)."""
    lo, hi = float(x.min()), float(x.max())
    mus = np.linspace(lo, hi, n_mu)
    sigmas = np.linspace(x.std() / 2.0, x.std(), n_sigma)
    ws = np.linspace(0.3, 0.7, n_weight)
    best = -np.inf
    for m1 in mus:
        for m2 in mus:
            for s in sigmas:
                for w in ws:
                    ll = gmm_loglik(x, [m1, m2], [s * s, s * s], [w, 1 - w])
                    best = max(best, ll)
    return best


def sample_vmf(mu, kappa, count, rng):
    """Wood (1994) rejection sampler on the unit hypersphere."""
    mu = np.asarray(mu, dtype=np.float64)
    d = mu.shape[0]
    b = (d - 1) / (2.0 * kappa + np.sqrt(4.0 * kappa ** 2 + (d - 1) ** 2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (d - 1) * np.log(1.0 - x0 ** 2)
    out = np.empty((count, d))
    for i in range(count):
        while True:
            z = rng.beta((d - 1) / 2.0, (d - 1) / 2.0)
            w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
            if kappa * w + (d - 1) * np.log(1.0 - x0 * w) - c >= np.log(rng.uniform()):
                break
        v = rng.standard_normal(d)
        v -= (v @ mu) * mu
        v /= np.linalg.norm(v)
        out[i] = w * mu + np.sqrt(max(0.0, 1.0 - w * w)) * v
    return out


def ray_plane_depth(pose, intrinsics, u, v, plane_z=0.0):
    """Analytic camera-frame depth of the floor-plane hit through pixel (u, v)."""
    fx, fy, cx, cy = intrinsics
    dir_cam = np.array([(u - cx) / fx, (v - cy) / fy, 1.0])
    dir_world = pose[:3, :3] @ dir_cam
    origin = pose[:3, 3]
    if dir_world[2] == 0:
        return np.inf
    t = (plane_z - origin[2]) / dir_world[2]
    return t if t > 0 else np.inf


def cosine_ranking(ids, matrix, query):
    """Exhaustive dot-product ranking with the same tie rule (ascending id)."""
    scored = [(float(vec @ query), i) for i, vec in zip(ids, matrix)]
    scored.sort(key=lambda p: (-p[0], p[1]))
    return [(i, s) for s, i in scored]


def point_in_obb(point, center, axes, half_extents, eps=1e-9):
    local = np.abs(axes.T @ (np.asarray(point) - center))
    return bool(np.all(local <= half_extents + eps))
