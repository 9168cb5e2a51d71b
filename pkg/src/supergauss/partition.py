"""Supergaussian grouping: l0 cut pursuit on the k-NN feature graph."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .maxflow import binary_cut
from .neighborhood import eigen_descriptors, point_set_covariance
from .scene import GaussianSet, InvalidParameterError


@dataclass
class SupergaussianPartition:
    assignment: np.ndarray          # (N,) group index per Gaussian
    values: np.ndarray              # (G, D) group constant feature values
    mu: float
    energy: float
    history: list = field(default_factory=list)   # (move, energy) after each step
    truncated: bool = False
    centroids: np.ndarray | None = None
    linearity: np.ndarray | None = None
    planarity: np.ndarray | None = None
    scattering: np.ndarray | None = None
    verticality: np.ndarray | None = None

    @property
    def n_groups(self) -> int:
        return len(self.values)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_groups)

    def groups(self) -> list[np.ndarray]:
        order = np.argsort(self.assignment, kind="stable")
        return np.split(order, np.cumsum(self.sizes)[:-1])

    def summary(self) -> dict:
        return {"G": int(self.n_groups), "energy": float(self.energy), "sizes": self.sizes.tolist(),
                "mu": float(self.mu)}

    def save_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def energy(features, assignment, edges, mu: float) -> tuple[float, float]:
    """(data term, boundary term) with group values set to member means."""
    features = np.asarray(features, float).reshape(len(assignment), -1)
    g = int(assignment.max()) + 1 if len(assignment) else 0
    counts = np.bincount(assignment, minlength=g).astype(float)
    sums = np.zeros((g, features.shape[1]))
    np.add.at(sums, assignment, features)
    means = sums / np.maximum(counts, 1)[:, None]
    data = float(np.sum((features - means[assignment]) ** 2))
    edges = np.asarray(edges).reshape(-1, 2)
    cut = int(np.count_nonzero(assignment[edges[:, 0]] != assignment[edges[:, 1]])) if len(edges) else 0
    return data, mu * cut


def _components(n, edges, mask=None):
    if len(edges):
        e = edges if mask is None else edges[mask]
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    else:
        adj = coo_matrix((n, n))
    return connected_components(adj, directed=False)[1]


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel so groups are numbered by their smallest member index."""
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[np.searchsorted(np.unique(labels), labels)]


def _sse(f):
    return float(np.sum((f - f.mean(axis=0)) ** 2)) if len(f) else 0.0


def _alternate(f, local_edges, mu, c0, c1, rounds, base):
    best, labels = None, None
    for _ in range(rounds):
        cost0 = np.sum((f - c0) ** 2, axis=1)
        cost1 = np.sum((f - c1) ** 2, axis=1)
        new = binary_cut(cost0, cost1, local_edges, mu)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        if labels.all() or not labels.any():
            break
        cut = np.count_nonzero(labels[local_edges[:, 0]] != labels[local_edges[:, 1]])
        delta = _sse(f[~labels]) + _sse(f[labels]) + mu * cut - base
        if best is None or delta < best[1]:
            best = (labels.copy(), delta)
        c0, c1 = f[~labels].mean(axis=0), f[labels].mean(axis=0)
    return best


def _try_split(f, local_edges, mu, rounds):
    """Best binary split of one component; returns (labels, delta_energy) or None.

    Seeds: the farthest feature pair (ties to lower indices), then the point
    farthest from the component mean against the mean itself.
    """
    if len(f) < 2:
        return None
    d2 = np.sum((f[:, None, :] - f[None, :, :]) ** 2, axis=2)
    a, b = np.unravel_index(np.argmax(d2), d2.shape)
    if d2[a, b] == 0:
        return None
    base = _sse(f)
    mean = f.mean(axis=0)
    outlier = int(np.argmax(np.sum((f - mean) ** 2, axis=1)))
    best = None
    for c0, c1 in ((f[min(a, b)], f[max(a, b)]), (mean, f[outlier])):
        trial = _alternate(f, local_edges, mu, c0, c1, rounds, base)
        if trial is not None and (best is None or trial[1] < best[1]):
            best = trial
    return best


def cut_pursuit(features, edges, mu: float, min_group_size: int = 3, max_iters: int = 50,
                inner_rounds: int = 10, max_groups: int | None = None) -> SupergaussianPartition:
    """Piecewise-constant approximation of node features penalizing boundary edges.

    Greedy top-down splitting: every component is split in two by alternating a
    graph cut against two centroids with centroid updates, and the split is kept
    only if it strictly lowers data + mu * (#boundary edges). Groups smaller than
    ``min_group_size`` are merged into their graph-adjacent group with the
    closest mean. ``max_groups`` stops splitting early (used during mu search).
    """
    f = np.asarray(features, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    n = len(f)
    if n == 0:
        raise InvalidParameterError("cut_pursuit needs a non-empty feature array")
    if mu < 0:
        raise InvalidParameterError("mu must be non-negative")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    labels = _components(n, edges)
    data, boundary = energy(f, labels, edges, mu)
    history = [("init", data + boundary)]
    saturated = np.zeros(n, dtype=bool)
    truncated = False
    for _ in range(max_iters):
        labels, changed, truncated = _split_pass(f, labels, edges, mu, inner_rounds, saturated, history,
                                                 max_groups)
        if truncated:
            break
        refined = _refine(f, labels, edges, mu, history)
        if not np.array_equal(refined, labels):
            # groups touched by refinement become splittable again
            for g in np.unique(refined):
                members = refined == g
                old = np.unique(labels[members])
                if len(old) > 1 or np.count_nonzero(labels == old[0]) != np.count_nonzero(members):
                    saturated[members] = False
            labels = refined
            changed = True
        if not changed:
            break
    labels = _merge_small(f, labels, edges, min_group_size, mu, history)
    labels = _canonical(labels)
    g = int(labels.max()) + 1
    values = np.zeros((g, f.shape[1]))
    np.add.at(values, labels, f)
    values /= np.bincount(labels, minlength=g)[:, None]
    data, boundary = energy(f, labels, edges, mu)
    part = SupergaussianPartition(labels, values, float(mu), data + boundary, history)
    part.truncated = truncated
    return part


def _split_pass(f, labels, edges, mu, rounds, saturated, history, max_groups):
    n = len(f)
    changed = False
    next_label = int(labels.max()) + 1
    for comp in range(next_label):
        members = np.nonzero(labels == comp)[0]
        if len(members) == 0 or saturated[members[0]]:
            continue
        local = np.full(n, -1)
        local[members] = np.arange(len(members))
        inside = (labels[edges[:, 0]] == comp) & (labels[edges[:, 1]] == comp)
        local_edges = local[edges[inside]]
        split = _try_split(f[members], local_edges, mu, rounds)
        if split is None or not split[1] < 0:
            saturated[members] = True
            continue
        side = split[0]
        # each side may fall apart into several connected pieces
        keep = side[local_edges[:, 0]] == side[local_edges[:, 1]]
        pieces = _components(len(members), local_edges, keep)
        for p in range(1, int(pieces.max()) + 1):
            labels[members[pieces == p]] = next_label
            next_label += 1
        data, boundary = energy(f, labels, edges, mu)
        history.append(("split", data + boundary))
        changed = True
        if max_groups is not None and next_label > max_groups:
            return _canonical(labels), changed, True
    return _canonical(labels), changed, False


class _Groups:
    """Per-group sufficient statistics for O(degree) move deltas."""

    def __init__(self, f, labels, mu, adj):
        self.f, self.mu, self.adj = f, mu, adj
        self.sqn = np.sum(f ** 2, axis=1)
        self.reset(labels)

    def reset(self, labels):
        self.labels = labels
        g = int(labels.max()) + 2
        self.count = np.bincount(labels, minlength=g).astype(float)
        self.sums = np.zeros((g, self.f.shape[1]))
        np.add.at(self.sums, labels, self.f)

    def _sse(self, count, total_sq, vec):
        return total_sq - vec @ vec / count if count > 0 else 0.0

    def delta(self, move: list[int], dst: int) -> float:
        """Energy change when all of ``move`` (one group) relabel to ``dst``."""
        src = self.labels[move[0]]
        fm = self.f[move].sum(axis=0)
        qm = self.sqn[move].sum()
        k = len(move)
        cnt_s, cnt_d = self.count[src], self.count[dst] if dst < len(self.count) else 0.0
        sum_s = self.sums[src]
        sum_d = self.sums[dst] if dst < len(self.sums) else np.zeros_like(fm)
        sq_s = np.sum(self.sqn[self.labels == src])
        sq_d = np.sum(self.sqn[self.labels == dst])
        before = self._sse(cnt_s, sq_s, sum_s) + self._sse(cnt_d, sq_d, sum_d)
        after = self._sse(cnt_s - k, sq_s - qm, sum_s - fm) + self._sse(cnt_d + k, sq_d + qm, sum_d + fm)
        inside = set(move)
        cut = 0
        for i in move:
            for j in self.adj[i]:
                if j in inside:
                    continue
                lj = self.labels[j]
                cut += int(lj != dst) - int(lj != src)
        return after - before + self.mu * cut


def _refine(f, labels, edges, mu, history, max_sweeps=20):
    """Energy-decreasing local moves: adjacent-group merges, then node and edge-pair relabels."""
    n = len(f)
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(int(j))
        adj[j].append(int(i))
    labels = labels.copy()
    groups = _Groups(f, labels, mu, adj)
    for _ in range(max_sweeps):
        improved = False
        while True:
            la, lb = labels[edges[:, 0]], labels[edges[:, 1]]
            cross = la != lb
            if not cross.any():
                break
            pairs, counts = np.unique(np.sort(np.stack([la[cross], lb[cross]], axis=1), axis=1),
                                      axis=0, return_counts=True)
            best = None
            for (a, b), c in zip(pairs, counts):
                fa, fb = f[labels == a], f[labels == b]
                delta = _sse(np.concatenate([fa, fb])) - _sse(fa) - _sse(fb) - mu * c
                if delta < 0 and (best is None or delta < best[0]):
                    best = (delta, a, b)
            if best is None:
                break
            labels[labels == best[2]] = best[1]
            labels = _canonical(labels)
            groups.reset(labels)
            history.append(("merge", sum(energy(f, labels, edges, mu))))
            improved = True
        # shatter a group into singletons when its internal edges are cheap
        same = labels[edges[:, 0]] == labels[edges[:, 1]]
        internal = np.bincount(labels[edges[same, 0]], minlength=int(labels.max()) + 1)
        for g in range(int(labels.max()) + 1):
            members = labels == g
            if np.count_nonzero(members) > 1 and mu * internal[g] - _sse(f[members]) < -1e-12:
                trial = labels.copy()
                trial[members] = labels.max() + 1 + np.arange(np.count_nonzero(members))
                before, after = sum(energy(f, labels, edges, mu)), sum(energy(f, trial, edges, mu))
                if after < before:
                    labels = trial
                    history.append(("shatter", after))
                    improved = True
        labels = _canonical(labels)
        groups.reset(labels)
        candidates = [[i] for i in range(n)]
        candidates += [[int(i), int(j)] for i, j in edges if labels[i] == labels[j]]
        for move in candidates:
            src = labels[move[0]]
            if any(labels[i] != src for i in move):
                continue
            options = {int(labels[j]) for i in move for j in adj[i]} - {int(src)}
            if groups.count[src] > len(move):
                options.add(int(labels.max()) + 1)
            best = None
            for dst in sorted(options):
                delta = groups.delta(move, dst)
                if delta < -1e-12 and (best is None or delta < best[0]):
                    best = (delta, dst)
            if best is None:
                continue
            before = sum(energy(f, labels, edges, mu))
            trial = labels.copy()
            trial[move] = best[1]
            pieces = _components(n, edges, trial[edges[:, 0]] == trial[edges[:, 1]])
            trial = _canonical(pieces)
            after = sum(energy(f, trial, edges, mu))
            if not after < before:
                continue
            labels = trial
            groups.reset(labels)
            history.append(("move", after))
            improved = True
        if not improved:
            break
    return labels


def _merge_small(f, labels, edges, min_size, mu, history):
    labels = labels.copy()
    if min_size <= 1:
        return labels
    blocked: set[int] = set()
    while True:
        g = int(labels.max()) + 1
        sizes = np.bincount(labels, minlength=g)
        small = [c for c in np.argsort(sizes, kind="stable") if 0 < sizes[c] < min_size and c not in blocked]
        if not small:
            return labels
        c = small[0]
        la, lb = labels[edges[:, 0]], labels[edges[:, 1]]
        adjacent = np.unique(np.concatenate([lb[(la == c) & (lb != c)], la[(lb == c) & (la != c)]]))
        if len(adjacent) == 0:
            blocked.add(c)
            continue
        mean_c = f[labels == c].mean(axis=0)
        dist = [np.sum((f[labels == a].mean(axis=0) - mean_c) ** 2) for a in adjacent]
        target = adjacent[int(np.argmin(dist))]
        labels[labels == c] = target
        labels = _canonical(labels)
        blocked = set()
        data, boundary = energy(f, labels, edges, mu)
        history.append(("merge_small", data + boundary))


def group_stats(partition: SupergaussianPartition, scene: GaussianSet) -> SupergaussianPartition:
    """Group centroids and group-level shape descriptors from member positions."""
    g = partition.n_groups
    pos = scene.positions
    partition.centroids = np.zeros((g, 3))
    lin, pla, sca, ver = np.zeros(g), np.zeros(g), np.ones(g), np.zeros(g)
    for gid, members in enumerate(partition.groups()):
        pts = pos[members]
        partition.centroids[gid] = pts.mean(axis=0)
        if len(members) >= 3:
            scale = np.mean(np.sum(pts ** 2, axis=1))
            d = eigen_descriptors(point_set_covariance(pts)[None], np.array([scale]))
            lin[gid], pla[gid], sca[gid], ver[gid] = d[0][0], d[1][0], d[2][0], d[3][0]
    partition.linearity, partition.planarity = lin, pla
    partition.scattering, partition.verticality = sca, ver
    return partition


@dataclass
class MuSearch:
    mu: float
    partition: SupergaussianPartition
    in_range: bool
    evaluations: int


def tune_mu(features, edges, target_range: tuple[int, int], min_group_size: int = 3,
            max_evals: int = 20, **kwargs) -> MuSearch:
    """Bisection over log(mu) for a partition with a group count inside ``target_range``."""
    g_min, g_max = target_range
    f = np.asarray(features, dtype=float).reshape(len(features), -1)
    if g_min > g_max or g_max > len(f):
        raise InvalidParameterError(f"invalid group-count target {target_range} for {len(f)} points")
    evals = 0

    def run(mu):
        nonlocal evals
        evals += 1
        return cut_pursuit(f, edges, mu, min_group_size, max_groups=4 * g_max + 8, **kwargs)

    def gap(part):
        return max(g_min - part.n_groups, part.n_groups - g_max, 0)

    total = float(np.sum((f - f.mean(axis=0)) ** 2))
    tried = [run(total + 1.0)]
    if tried[0].n_groups < g_min:
        lo_log, hi_log = np.log(max(total, 1.0) * 1e-8), np.log(total + 1.0)
        while evals < max_evals - 1:
            mid = 0.5 * (lo_log + hi_log)
            tried.append(run(float(np.exp(mid))))
            g = tried[-1].n_groups
            if g > g_max:
                lo_log = mid
            elif g < g_min:
                hi_log = mid
            else:
                break
        if gap(tried[-1]) > 0 and tried[-1].n_groups < g_min:
            # finest setting available
            tried.append(run(0.0))
    # closest group count wins; among equals prefer the coarser (larger mu) setting
    best = min(tried, key=lambda p: (gap(p), -p.mu))
    in_range = gap(best) == 0
    if not in_range:
        warnings.warn(f"group-count target {target_range} not reached; closest G={best.n_groups}")
    if best.truncated:
        best = cut_pursuit(f, edges, best.mu, min_group_size, **kwargs)
        evals += 1
    return MuSearch(best.mu, best, in_range, evals)
