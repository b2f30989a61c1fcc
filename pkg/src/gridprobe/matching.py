"""Maximum bipartite matching (Hopcroft-Karp)."""
from __future__ import annotations

from collections import deque
from typing import Hashable, Mapping, Sequence

_INF = float("inf")


def hopcroft_karp(adjacency: Mapping[Hashable, Sequence[Hashable]]) -> dict:
    """Maximum matching of the left vertices (keys) into right vertices.

    ``adjacency`` maps each left vertex to the right vertices it may be
    matched to. Iteration order of keys and neighbor lists is respected, so
    the result is deterministic for a given input.

    Returns a dict left -> right containing only matched left vertices.
    """
    left = list(adjacency)
    pair_l: dict = {}
    pair_r: dict = {}
    dist: dict = {}

    def bfs() -> bool:
        queue = deque()
        for u in left:
            if u in pair_l:
                dist[u] = _INF
            else:
                dist[u] = 0
                queue.append(u)
        found = False
        while queue:
            u = queue.popleft()
            for w in adjacency[u]:
                nxt = pair_r.get(w)
                if nxt is None:
                    found = True
                elif dist[nxt] == _INF:
                    dist[nxt] = dist[u] + 1
                    queue.append(nxt)
        return found

    def dfs(u) -> bool:
        # iterative DFS along the layered graph
        stack = [(u, iter(adjacency[u]))]
        path = []
        while stack:
            node, it = stack[-1]
            advanced = False
            for w in it:
                nxt = pair_r.get(w)
                if nxt is None:
                    path.append((node, w))
                    for a, b in path:
                        pair_l[a] = b
                        pair_r[b] = a
                    return True
                if dist[nxt] == dist[node] + 1:
                    path.append((node, w))
                    stack.append((nxt, iter(adjacency[nxt])))
                    advanced = True
                    break
            if not advanced:
                dist[node] = _INF
                stack.pop()
                if path:
                    path.pop()
        return False

    while bfs():
        for u in left:
            if u not in pair_l:
                dfs(u)
    return pair_l


def max_matching_size(adjacency: Mapping[Hashable, Sequence[Hashable]]) -> int:
    return len(hopcroft_karp(adjacency))
