"""k-NN graph over Gaussian centers and eigenvalue-based shape descriptors."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .scene import GaussianSet, InvalidParameterError

FEATURE_BLOCKS = {"position": slice(0, 3), "color": slice(3, 6), "scale": slice(6, 9), "shape": slice(9, 13)}
FEATURE_DIM = 13


@dataclass
class NeighborGraph:
    k: int
    knn: np.ndarray      # (N, k) neighbor indices, nearest first
    edges: np.ndarray    # (E, 2) unordered pairs with i < j
    linearity: np.ndarray | None = None
    planarity: np.ndarray | None = None
    scattering: np.ndarray | None = None
    verticality: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.knn)

    def directed_edges(self) -> np.ndarray:
        """Both orientations of every edge, as (2E, 2)."""
        return np.concatenate([self.edges, self.edges[:, ::-1]])

    def neighbors(self, i: int) -> np.ndarray:
        e = self.edges
        return np.sort(np.concatenate([e[e[:, 0] == i, 1], e[e[:, 1] == i, 0]]))

    @property
    def shape_descriptors(self) -> np.ndarray:
        """(N, 4) columns ordered linearity, scattering, verticality, planarity."""
        return np.stack([self.linearity, self.scattering, self.verticality, self.planarity], axis=1)


def _exact_rows(points, rows, k):
    out = np.empty((len(rows), k), dtype=np.int64)
    idx = np.arange(len(points))
    for r, i in enumerate(rows):
        d = np.sum((points - points[i]) ** 2, axis=1)
        order = np.lexsort((idx, d))
        out[r] = order[order != i][:k]
    return out


def build_knn(points, k: int) -> NeighborGraph:
    """Exact k nearest neighbors (ties to the lower index), symmetrized by union."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    if k < 1 or n < k + 1:
        raise InvalidParameterError(f"build_knn needs k >= 1 and at least k+1 points (k={k}, n={n})")
    extra = min(n, k + 1 + 8)
    _, cand = cKDTree(points).query(points, k=extra)
    cand = np.asarray(cand).reshape(n, extra)
    d = np.sum((points[cand] - points[:, None, :]) ** 2, axis=2)
    # exclude self, then order candidates by (distance, index)
    d = np.where(cand == np.arange(n)[:, None], np.inf, d)
    order = np.lexsort((cand, d), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    knn = cand[:, :k].copy()
    if extra < n:
        # the k-th distance may tie with points the tree did not return
        dmax = np.max(np.where(np.isfinite(d), d, -np.inf), axis=1)
        unsure = np.nonzero(d[:, k - 1] >= dmax)[0]
        if len(unsure):
            knn[unsure] = _exact_rows(points, unsure, k)
    pairs = np.stack([np.repeat(np.arange(n), k), knn.ravel()], axis=1)
    pairs = np.sort(pairs, axis=1)
    edges = np.unique(pairs, axis=0)
    return NeighborGraph(k=k, knn=knn, edges=edges)


def eigen_descriptors(cov: np.ndarray, scale_hint: np.ndarray | None = None):
    """Shape descriptors from a batch of 3x3 covariance matrices.

    Returns ``(linearity, planarity, scattering, verticality, degenerate)``.
    """
    cov = np.asarray(cov, dtype=float).reshape(-1, 3, 3)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals[:, ::-1], 0.0, None)
    vecs = vecs[:, :, ::-1]
    l1, l2, l3 = vals[:, 0], vals[:, 1], vals[:, 2]
    ref = 1e-20 * (1.0 if scale_hint is None else 1.0 + scale_hint)
    degenerate = l1 <= ref
    safe = np.where(degenerate, 1.0, l1)
    lin = (l1 - l2) / safe
    pla = (l2 - l3) / safe
    sca = l3 / safe
    total = np.where(degenerate, 1.0, vals.sum(axis=1))
    w = np.einsum("nd,ncd->nc", vals / total[:, None], np.abs(vecs))
    wn = np.linalg.norm(w, axis=1)
    ver = np.abs(w[:, 2]) / np.where(wn > 0, wn, 1.0)
    lin[degenerate], pla[degenerate], sca[degenerate], ver[degenerate] = 0.0, 0.0, 1.0, 0.0
    return lin, pla, sca, np.clip(ver, 0.0, 1.0), degenerate


def point_set_covariance(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=-2, keepdims=True)
    return np.swapaxes(centered, -1, -2) @ centered / points.shape[-2]


def descriptors(points, graph: NeighborGraph) -> NeighborGraph:
    """Fill linearity/planarity/scattering/verticality on ``graph`` from {i} + kNN(i)."""
    points = np.asarray(points, dtype=float)
    hood = np.concatenate([np.arange(graph.n)[:, None], graph.knn], axis=1)
    if hood.shape[1] < 3:
        raise InvalidParameterError("descriptor neighborhoods need at least 3 points (k >= 2)")
    pts = points[hood]
    sq = np.mean(np.sum(pts ** 2, axis=2), axis=1)
    lin, pla, sca, ver, deg = eigen_descriptors(point_set_covariance(pts), sq)
    graph.linearity, graph.planarity, graph.scattering, graph.verticality = lin, pla, sca, ver
    graph.degenerate = deg
    return graph


@dataclass
class Standardizer:
    """Per-column centering with a shared scale per feature block."""

    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray

    @classmethod
    def fit(cls, f: np.ndarray, block_weights: dict | None = None, eps: float = 1e-12) -> "Standardizer":
        f = np.asarray(f, dtype=float)
        mean = f.mean(axis=0)
        scale = np.empty(f.shape[1])
        weights = np.ones(f.shape[1])
        for name, sl in FEATURE_BLOCKS.items():
            var = np.mean(f[:, sl].var(axis=0))
            scale[sl] = np.sqrt(var + eps)
            weights[sl] = (block_weights or {}).get(name, 1.0)
        return cls(mean, scale, weights)

    def __call__(self, f):
        return (np.asarray(f) - self.mean) / self.scale * self.weights

    def inverse(self, z):
        return np.asarray(z) / self.weights * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"]), np.array(d["scale"]), np.array(d["weights"]))


def raw_features(scene: GaussianSet, graph: NeighborGraph) -> np.ndarray:
    """f_i = [x(3), c(3), sigma(3), linearity, scattering, verticality, planarity]."""
    if graph.linearity is None:
        raise InvalidParameterError("descriptors have not been computed for this graph")
    return np.concatenate([scene.positions, scene.colors, scene.scales, graph.shape_descriptors], axis=1)


def grouping_features(scene: GaussianSet, graph: NeighborGraph, block_weights: dict | None = None):
    """Standardized grouping features and the fitted standardizer."""
    f = raw_features(scene, graph)
    std = Standardizer.fit(f, block_weights)
    return std(f), std


def dump_descriptors_csv(path, graph: NeighborGraph) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "linearity", "planarity", "scattering", "verticality"])
        for i in range(graph.n):
            writer.writerow([i, repr(float(graph.linearity[i])), repr(float(graph.planarity[i])),
                             repr(float(graph.scattering[i])), repr(float(graph.verticality[i]))])
