"""Dinic max-flow with real-valued capacities, used for binary graph-cut labelings."""
from __future__ import annotations

from collections import deque

import numpy as np


class FlowGraph:
    """Residual network over nodes ``0..n-1`` plus a source and a sink."""

    def __init__(self, n: int):
        self.n = n
        self.source = n
        self.sink = n + 1
        self.adj: list[list[int]] = [[] for _ in range(n + 2)]
        self.to: list[int] = []
        self.cap: list[float] = []

    def add_edge(self, u: int, v: int, cap: float, rev_cap: float = 0.0) -> None:
        self.adj[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(float(cap))
        self.adj[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(float(rev_cap))

    def add_terminal(self, u: int, cap_source: float, cap_sink: float) -> None:
        # only the excess matters for the cut; route it to one terminal
        common = min(cap_source, cap_sink)
        if cap_source - common > 0:
            self.add_edge(self.source, u, cap_source - common)
        if cap_sink - common > 0:
            self.add_edge(u, self.sink, cap_sink - common)

    def _levels(self, eps):
        level = [-1] * (self.n + 2)
        level[self.source] = 0
        queue = deque([self.source])
        adj, to, cap = self.adj, self.to, self.cap
        while queue:
            u = queue.popleft()
            for e in adj[u]:
                v = to[e]
                if level[v] < 0 and cap[e] > eps:
                    level[v] = level[u] + 1
                    queue.append(v)
        return level

    def max_flow(self, eps: float = 1e-12) -> float:
        adj, to, cap = self.adj, self.to, self.cap
        s, t = self.source, self.sink
        total = 0.0
        while True:
            level = self._levels(eps)
            if level[t] < 0:
                return total
            it = [0] * (self.n + 2)
            while True:
                # iterative DFS for one augmenting path in the level graph
                path: list[int] = []
                u = s
                while u != t:
                    advanced = False
                    while it[u] < len(adj[u]):
                        e = adj[u][it[u]]
                        v = to[e]
                        if cap[e] > eps and level[v] == level[u] + 1:
                            path.append(e)
                            u = v
                            advanced = True
                            break
                        it[u] += 1
                    if not advanced:
                        if u == s:
                            break
                        level[u] = -1
                        e = path.pop()
                        u = to[e ^ 1]
                        it[u] += 1
                if u != t:
                    break
                push = min(cap[e] for e in path)
                for e in path:
                    cap[e] -= push
                    cap[e ^ 1] += push
                total += push

    def source_side(self, eps: float = 1e-12) -> np.ndarray:
        """Boolean mask of non-terminal nodes reachable from the source in the residual graph."""
        seen = np.zeros(self.n + 2, dtype=bool)
        seen[self.source] = True
        stack = [self.source]
        adj, to, cap = self.adj, self.to, self.cap
        while stack:
            u = stack.pop()
            for e in adj[u]:
                v = to[e]
                if not seen[v] and cap[e] > eps:
                    seen[v] = True
                    stack.append(v)
        return seen[: self.n]


def binary_cut(cost0: np.ndarray, cost1: np.ndarray, edges: np.ndarray, weight: float) -> np.ndarray:
    """Minimize sum_i cost_{y_i}(i) + weight * #{(i,j) in edges : y_i != y_j} over y in {0,1}^n.

    Returns the boolean labeling ``y == 1``; nodes on the source side take label 0.
    """
    n = len(cost0)
    g = FlowGraph(n)
    for i in range(n):
        # source side (label 0) cuts the sink edge, paying cost0
        g.add_terminal(i, float(cost1[i]), float(cost0[i]))
    if weight > 0:
        for i, j in edges:
            g.add_edge(int(i), int(j), weight, weight)
    g.max_flow()
    return ~g.source_side()
