"""Regions layer: per-place directional statistics, query scoring, propagation,
two-component score splitting, and region extraction.

Each place summarizes its observing keyframe embeddings as a mean direction mu
and a concentration kappa (running resultant sum makes refits incremental).
Query scores kappa * <mu, q> are smoothed over the places graph with a
confidence-aware blend, split into in/out sets by a 1D two-component Gaussian
mixture, and returned as connected components above a minimum size. A
closed-vocabulary mode produces a full per-place partition.
"""

from __future__ import annotations

import zlib
from collections import deque
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

KAPPA_MAX = 1e4
DEFAULT_MIN_REGION = 4
DEFAULT_OBSERVATION_RANGE = 7.0


class RegionsError(ValueError):
    pass


@dataclass
class PlaceStat:
    place_id: int
    dim: int
    resultant_sum: np.ndarray = None
    count: int = 0
    mu: np.ndarray = None
    kappa: float = 0.0

    def __post_init__(self):
        if self.resultant_sum is None:
            self.resultant_sum = np.zeros(self.dim)

    def add(self, embedding):
        self.resultant_sum = self.resultant_sum + embedding
        self.count += 1
        self._refit()

    def _refit(self):
        r = float(np.linalg.norm(self.resultant_sum))
        if self.count == 0 or r < 1e-15:
            self.mu = None
            self.kappa = 0.0
            return
        self.mu = self.resultant_sum / r
        if self.count <= 1:
            self.kappa = 0.0
            return
        rbar = r / self.count
        if rbar >= 1.0:
            self.kappa = KAPPA_MAX
            return
        kappa = rbar * (self.dim - rbar ** 2) / (1.0 - rbar ** 2)
        self.kappa = float(min(kappa, KAPPA_MAX))


@dataclass
class Region:
    place_ids: list
    mean_score: float
    label: str | None = None


@dataclass
class RegionQueryResult:
    regions: list
    threshold: float | None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class PropagationParams:
    lambda_: float | None = None   # None derives the median-kappa default
    max_iterations: int = 500
    tolerance: float = 1e-8
    min_size: int = DEFAULT_MIN_REGION


def derive_lambda(stats):
    """Median kappa over places with at least two observations."""
    kappas = sorted(
        s.kappa for s in stats.values() if s.count >= 2
    )
    if not kappas:
        return 1.0
    mid = len(kappas) // 2
    if len(kappas) % 2 == 1:
        median = kappas[mid]
    else:
        median = 0.5 * (kappas[mid - 1] + kappas[mid])
    return median if median > 0 else 1.0


def score_places(stats, query, place_ids):
    """Raw match scores s_i = kappa_i * <mu_i, q>; unobserved places get 0."""
    if not any(stats[p].count >= 1 for p in place_ids if p in stats):
        raise RegionsError("no observed places to score")
    scores = np.zeros(len(place_ids))
    for k, pid in enumerate(place_ids):
        stat = stats.get(pid)
        if stat is None or stat.count == 0 or stat.mu is None:
            continue
        scores[k] = stat.kappa * float(stat.mu @ query.vector)
    return scores


def blend_weights(stats, graph, place_ids, lambda_):
    """alpha_i = kappa_i / (kappa_i + lambda * deg(i)); isolated nodes get 1."""
    alphas = np.empty(len(place_ids))
    for k, pid in enumerate(place_ids):
        deg = graph.degree(pid)
        if deg == 0:
            alphas[k] = 1.0
            continue
        kappa = stats[pid].kappa if pid in stats else 0.0
        alphas[k] = kappa / (kappa + lambda_ * deg)
    return alphas


def propagate_scores(raw_scores, graph, stats, params=None):
    """Jacobi fixed point of x = alpha*s + (1-alpha)*neighbor-mean(x).

    Returns (smoothed scores, iterations, converged). The iteration starts at
    the raw scores, so every iterate stays inside [min(s), max(s)].
    """
    params = params or PropagationParams()
    place_ids = graph.sorted_ids()
    s = np.asarray(raw_scores, dtype=np.float64)
    if s.shape[0] != len(place_ids):
        raise RegionsError("score vector does not align with the graph")
    lambda_ = params.lambda_ if params.lambda_ is not None else derive_lambda(stats)
    if lambda_ <= 0:
        raise RegionsError("lambda must be positive")
    alphas = blend_weights(stats, graph, place_ids, lambda_)
    index = {pid: k for k, pid in enumerate(place_ids)}
    neighbors = [
        np.array([index[nb] for nb in sorted(graph.adjacency[pid])], dtype=np.int64)
        for pid in place_ids
    ]
    x = s.copy()
    iterations = 0
    converged = False
    for iterations in range(1, params.max_iterations + 1):
        x_new = np.empty_like(x)
        for k in range(len(place_ids)):
            nb = neighbors[k]
            if nb.size == 0:
                x_new[k] = s[k]
            else:
                x_new[k] = alphas[k] * s[k] + (1.0 - alphas[k]) * x[nb].mean()
        delta = np.max(np.abs(x_new - x)) if x.size else 0.0
        x = x_new
        if delta < params.tolerance:
            converged = True
            break
    return x, iterations, converged


def _kmeanspp_init(values, rng):
    c1 = float(values[rng.integers(len(values))])
    d2 = (values - c1) ** 2
    total = d2.sum()
    if total <= 0:
        c2 = float(values[0])
    else:
        c2 = float(values[rng.choice(len(values), p=d2 / total)])
    return min(c1, c2), max(c1, c2)


def gmm_split(scores, rng, max_iterations=100, var_floor=1e-8):
    """Two-component 1D Gaussian mixture split of the propagated scores.

    Returns (in_mask, threshold, diagnostics). Places assigned to the
    higher-mean component by responsibility form the in-set. All-identical
    scores yield an empty in-set with a diagnostic.
    """
    x = np.asarray(scores, dtype=np.float64)
    if np.unique(x).size < 2:
        return (
            np.zeros(len(x), dtype=bool),
            None,
            {"reason": "no distinguishable region (identical scores)"},
        )
    mu = np.array(_kmeanspp_init(x, rng))
    var = np.full(2, max(x.var() / 4.0, var_floor))
    w = np.array([0.5, 0.5])
    loglik_trace = []
    prev_ll = -np.inf
    for _ in range(max_iterations):
        # E step
        log_pdf = (
            np.log(w)[None, :]
            - 0.5 * np.log(2.0 * np.pi * var)[None, :]
            - (x[:, None] - mu[None, :]) ** 2 / (2.0 * var)[None, :]
        )
        m = log_pdf.max(axis=1, keepdims=True)
        log_norm = m[:, 0] + np.log(np.exp(log_pdf - m).sum(axis=1))
        ll = float(log_norm.sum())
        loglik_trace.append(ll)
        resp = np.exp(log_pdf - log_norm[:, None])
        # M step
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk
        var = np.maximum(var, var_floor)
        w = nk / len(x)
        if abs(ll - prev_ll) < 1e-10 * max(1.0, abs(ll)):
            break
        prev_ll = ll
    hi = int(np.argmax(mu))
    resp_final = resp
    in_mask = resp_final[:, hi] >= resp_final[:, 1 - hi]
    if not np.any(in_mask):
        return in_mask, None, {"reason": "empty high component", "loglik": loglik_trace}
    threshold = float(x[in_mask].min())
    diagnostics = {
        "means": mu.tolist(),
        "variances": var.tolist(),
        "weights": w.tolist(),
        "loglik": loglik_trace,
    }
    return in_mask, threshold, diagnostics


def extract_regions(in_ids, graph, min_size, smoothed=None):
    """Connected components of the in-set, size-filtered, best-scoring first."""
    in_set = set(in_ids)
    place_ids = graph.sorted_ids()
    index = {pid: k for k, pid in enumerate(place_ids)}
    seen = set()
    regions = []
    for pid in place_ids:
        if pid not in in_set or pid in seen:
            continue
        component = []
        queue = deque([pid])
        seen.add(pid)
        while queue:
            cur = queue.popleft()
            component.append(cur)
            for nb in sorted(graph.adjacency[cur]):
                if nb in in_set and nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        if len(component) >= min_size:
            component.sort()
            if smoothed is not None:
                mean_score = float(
                    np.mean([smoothed[index[c]] for c in component])
                )
            else:
                mean_score = 0.0
            regions.append(Region(place_ids=component, mean_score=mean_score))
    regions.sort(key=lambda r: (-r.mean_score, r.place_ids[0]))
    return regions


def query_region(stats, graph, query, rng, params=None):
    """score -> propagate -> split -> extract, as one composed query."""
    params = params or PropagationParams()
    if len(graph) == 0:
        raise RegionsError("no places")
    place_ids = graph.sorted_ids()
    raw = score_places(stats, query, place_ids)
    smoothed, iterations, converged = propagate_scores(raw, graph, stats, params)
    in_mask, threshold, diagnostics = gmm_split(smoothed, rng)
    in_ids = [pid for pid, keep in zip(place_ids, in_mask) if keep]
    regions = extract_regions(in_ids, graph, params.min_size, smoothed)
    diagnostics = dict(diagnostics)
    diagnostics.update({"iterations": iterations, "converged": converged})
    return RegionQueryResult(
        regions=regions, threshold=threshold, diagnostics=diagnostics
    )


def _znormalize(values):
    std = values.std()
    if std < 1e-12:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def _bfs_fill(labels, graph):
    """Multi-source BFS that copies labels onto unlabeled reachable places."""
    queue = deque(pid for pid in graph.sorted_ids() if labels.get(pid) is not None)
    while queue:
        cur = queue.popleft()
        for nb in sorted(graph.adjacency[cur]):
            if labels.get(nb) is None:
                labels[nb] = labels[cur]
                queue.append(nb)
    return labels


def louvain_partition(graph, weights, seed):
    """Louvain communities over the places graph with precomputed edge weights."""
    g = nx.Graph()
    g.add_nodes_from(graph.sorted_ids())
    for a, b in sorted(graph.edges):
        g.add_edge(a, b, weight=weights[(a, b)])
    communities = nx.community.louvain_communities(g, weight="weight", seed=seed)
    return [sorted(c) for c in sorted(communities, key=min)]


def closed_vocab_partition(stats, graph, categories, rng, params=None,
                           louvain_seed=0):
    """Assign every place one of the given categories.

    Per category: score + propagate, then z-normalize over places so no single
    dominant concept suppresses the rest. Observed places take their argmax
    category; unobserved places inherit labels by BFS. Louvain communities
    (edges weighted by score-profile similarity of adjacent places) then
    re-unify fragmented categories: each community is relabeled by its best
    mean category score, and any category that wins somewhere is guaranteed a
    community when one can be spared.
    """
    if len(categories) < 2:
        raise RegionsError("need at least 2 categories to partition")
    params = params or PropagationParams()
    if len(graph) == 0:
        raise RegionsError("no places")
    place_ids = graph.sorted_ids()
    profile = np.zeros((len(place_ids), len(categories)))
    for c, query in enumerate(categories):
        raw = score_places(stats, query, place_ids)
        smoothed, _, _ = propagate_scores(raw, graph, stats, params)
        profile[:, c] = _znormalize(smoothed)

    labels = {}
    for k, pid in enumerate(place_ids):
        stat = stats.get(pid)
        if stat is not None and stat.count >= 1:
            labels[pid] = int(np.argmax(profile[k]))
        else:
            labels[pid] = None
    labels = _bfs_fill(labels, graph)

    index = {pid: k for k, pid in enumerate(place_ids)}
    dists = {
        (a, b): float(np.linalg.norm(profile[index[a]] - profile[index[b]]))
        for a, b in sorted(graph.edges)
    }
    positive = sorted(d for d in dists.values())
    sigma = positive[len(positive) // 2] if positive else 1.0
    if sigma < 1e-9:
        sigma = 1.0
    weights = {
        key: float(np.exp(-(d ** 2) / (sigma ** 2))) for key, d in dists.items()
    }
    communities = louvain_partition(graph, weights, louvain_seed)

    community_label = []
    for members in communities:
        mean_scores = profile[[index[m] for m in members]].mean(axis=0)
        community_label.append(int(np.argmax(mean_scores)))

    # Guarantee: a category that wins argmax somewhere claims >= 1 community.
    winners = sorted({lab for lab in labels.values() if lab is not None})
    owned = {}
    for ci, lab in enumerate(community_label):
        owned.setdefault(lab, []).append(ci)
    for cat in winners:
        if cat in owned:
            continue
        candidates = [
            ci for ci, members in enumerate(communities)
            if any(labels[m] == cat for m in members)
        ]
        if not candidates:
            continue
        candidates.sort(
            key=lambda ci: -float(
                profile[[index[m] for m in communities[ci]], cat].mean()
            )
        )
        chosen = None
        for ci in candidates:
            donor = community_label[ci]
            if len(owned.get(donor, [])) >= 2 or donor not in winners:
                chosen = ci
                break
        if chosen is None:
            chosen = candidates[0]
        donor = community_label[chosen]
        if chosen in owned.get(donor, []):
            owned[donor].remove(chosen)
            if not owned[donor]:
                del owned[donor]
        community_label[chosen] = cat
        owned.setdefault(cat, []).append(chosen)

    final = {}
    for ci, members in enumerate(communities):
        for m in members:
            final[m] = community_label[ci]
    return final, {
        "communities": communities,
        "community_labels": community_label,
        "profile": profile,
        "place_ids": place_ids,
    }


def query_seed(base_seed, text):
    """Stable per-query RNG seed, independent of query history."""
    return np.random.SeedSequence([base_seed, zlib.crc32(text.encode("utf-8"))])
