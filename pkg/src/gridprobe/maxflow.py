"""Integral max-flow by shortest augmenting paths (Edmonds-Karp)."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Hashable


@dataclass
class FlowNetwork:
    """Directed network with integer capacities between ``source`` and ``sink``."""

    source: Hashable = "n_s"
    sink: Hashable = "n_d"
    edges: dict = field(default_factory=dict)

    def add_edge(self, u, v, capacity: int) -> None:
        if int(capacity) != capacity or capacity < 0:
            raise ValueError(f"capacity must be a non-negative integer, got {capacity!r}")
        if u == v:
            raise ValueError("self-loop")
        if (u, v) in self.edges or (v, u) in self.edges:
            raise ValueError(f"duplicate or antiparallel edge {(u, v)!r}")
        self.edges[(u, v)] = int(capacity)

    def nodes(self) -> list:
        seen = {self.source: None, self.sink: None}
        for u, v in self.edges:
            seen.setdefault(u)
            seen.setdefault(v)
        return list(seen)


@dataclass(frozen=True)
class FlowResult:
    value: int
    flows: dict

    def positive(self) -> dict:
        return {e: f for e, f in self.flows.items() if f > 0}


def max_flow(network: FlowNetwork) -> FlowResult:
    residual: dict = {}
    adj: dict = {}
    for (u, v), cap in network.edges.items():
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)
        residual[(u, v)] = cap
        residual[(v, u)] = 0
    s, t = network.source, network.sink
    value = 0
    while True:
        parent = {s: None}
        queue = deque([s])
        while queue and t not in parent:
            u = queue.popleft()
            for v in adj.get(u, ()):
                if v not in parent and residual[(u, v)] > 0:
                    parent[v] = u
                    queue.append(v)
        if t not in parent:
            break
        bottleneck = None
        v = t
        while parent[v] is not None:
            u = parent[v]
            r = residual[(u, v)]
            bottleneck = r if bottleneck is None else min(bottleneck, r)
            v = u
        v = t
        while parent[v] is not None:
            u = parent[v]
            residual[(u, v)] -= bottleneck
            residual[(v, u)] += bottleneck
            v = u
        value += bottleneck
    flows = {e: cap - residual[e] for e, cap in network.edges.items()}
    return FlowResult(value, flows)
