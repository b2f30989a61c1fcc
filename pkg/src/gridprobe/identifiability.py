"""Graph tests deciding whether a probing setup is certifiably successful.

A setup is a feeder plus a split of its buses into metered (M) and
non-metered (O). With T probing slots the test asks whether O can be split
into T/2 groups, each perfectly matchable into the metered side of the
bipartite grid graph. That question is answered by one integral max-flow,
and the flow itself is decomposed into the groups and their matchings.

A negative verdict means "not certified": the graph condition is only
sufficient for identifiability.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

from .feeder import BusPartition, FeederGraph, validate_partition
from .maxflow import FlowNetwork, FlowResult, max_flow

SOURCE, SINK = "n_s", "n_d"


class Mode(str, Enum):
    PHASOR = "phasor"
    NON_PHASOR = "non_phasor"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        text = str(value).strip().lower().replace("-", "_")
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown data mode {value!r}; use 'phasor' or 'non-phasor'") from None


@dataclass(frozen=True)
class BipartiteGridGraph:
    """M-O adjacencies of the feeder; right nodes are ``(bus, is_copy)``."""

    mode: Mode
    left: tuple[int, ...]
    right: tuple[tuple[int, bool], ...]
    edges: tuple[tuple[int, tuple[int, bool]], ...]

    def neighbors(self) -> dict[int, list[tuple[int, bool]]]:
        out: dict[int, list] = {o: [] for o in self.left}
        for o, r in self.edges:
            out[o].append(r)
        return out


@dataclass(frozen=True)
class IdentifiabilityVerdict:
    success: bool
    mode: Mode
    T: int
    flow_value: int
    T_max: int
    partition: tuple[tuple[int, ...], ...] = ()
    # one dict per group: O bus -> (M bus, is_copy); two entries per bus for
    # the non-phasor single-slot test are stored as a list of pairs
    matchings: tuple[dict, ...] = ()
    single_slot: bool = False
    required_flow: int = 0

    def matched_pairs(self) -> list[tuple[int, int, bool]]:
        pairs = []
        for group in self.matchings:
            for o, target in group.items():
                targets = target if isinstance(target, list) else [target]
                for m, copy in targets:
                    pairs.append((o, m, copy))
        return sorted(pairs)

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "mode": self.mode.value,
            "T": self.T,
            "flow": self.flow_value,
            "T_max": self.T_max,
            "partition": [list(group) for group in self.partition],
            "matchings": [{"o": o, "m": m, "copy": copy} for o, m, copy in self.matched_pairs()],
            "single_slot": self.single_slot,
        }

    def describe(self) -> str:
        if self.success:
            return f"probing certified successful ({self.mode.value} data, T={self.T})"
        return (f"not certified for T<={self.T} ({self.mode.value} data); "
                "the graph test is only sufficient, so this does not prove unidentifiability")


def build_bipartite_grid_graph(feeder: FeederGraph, partition: BusPartition,
                               mode: Mode | str) -> BipartiteGridGraph:
    mode = Mode.parse(mode)
    validate_partition(feeder, partition)
    adj = feeder.neighbors()
    copies = (False, True) if mode is Mode.PHASOR else (False,)
    right = tuple((m, c) for c in copies for m in partition.M)
    edges = []
    for o in partition.O:
        for c in copies:
            for m in sorted(adj[o] & partition.metered):
                edges.append((o, (m, c)))
    return BipartiteGridGraph(mode, tuple(partition.O), right, tuple(edges))


def _even(T: int) -> int:
    T = int(T)
    if T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if T % 2:
        warnings.warn(f"odd T={T} rounded to {T + 1}", stacklevel=3)
        return T + 1
    return T


def flow_network(graph: BipartiteGridGraph, source_cap: int, right_cap: int) -> FlowNetwork:
    """Three-layer network: source -> O -> right side -> sink."""
    net = FlowNetwork(SOURCE, SINK)
    for o in graph.left:
        net.add_edge(SOURCE, ("o", o), source_cap)
    for o, (m, c) in graph.edges:
        net.add_edge(("o", o), ("m", m, c), 1)
    for m, c in graph.right:
        net.add_edge(("m", m, c), SINK, right_cap)
    return net


def _assignment(graph: BipartiteGridGraph, flow: FlowResult) -> dict[int, list[tuple[int, bool]]]:
    assigned: dict[int, list] = {o: [] for o in graph.left}
    for (u, v), f in flow.flows.items():
        if f > 0 and isinstance(u, tuple) and u[0] == "o":
            if f != 1:
                raise RuntimeError(f"non-unit flow {f} on O->M edge {(u, v)}")
            assigned[u[1]].append((v[1], v[2]))
    return assigned


def extract_partition(assignment: dict[int, tuple[int, bool] | None], T: int,
                      ) -> tuple[tuple[tuple[int, ...], ...], tuple[dict, ...]]:
    """Split an O -> right-side assignment into T/2 matchings.

    The assignment graph has left degree at most 1 and right degree at most
    T/2, so its edges can be colored with T/2 colors such that no right node
    repeats a color. Colors are handed out greedily to the currently smallest
    groups, which also keeps group sizes within one of each other. Unassigned
    O buses (failed flows) are placed in the smallest groups without a match.
    """
    K = T // 2
    if K < 1:
        raise ValueError("T must be at least 2")
    by_right: dict = {}
    unassigned = []
    for o in sorted(assignment):
        r = assignment[o]
        if r is None:
            unassigned.append(o)
        else:
            by_right.setdefault(r, []).append(o)
    groups: list[list[int]] = [[] for _ in range(K)]
    matchings: list[dict] = [{} for _ in range(K)]
    for r in sorted(by_right, key=lambda x: (-len(by_right[x]), x)):
        owners = by_right[r]
        if len(owners) > K:
            raise RuntimeError(f"right node {r} carries {len(owners)} > T/2 = {K} units of flow")
        order = sorted(range(K), key=lambda k: (len(groups[k]), k))[:len(owners)]
        for k, o in zip(order, owners):
            groups[k].append(o)
            matchings[k][o] = r
    for o in unassigned:
        k = min(range(K), key=lambda j: (len(groups[j]), j))
        groups[k].append(o)
    return tuple(tuple(sorted(g)) for g in groups), tuple(matchings)


def max_metered_degree(feeder: FeederGraph, partition: BusPartition) -> int:
    """Largest degree of a metered node in the flow graph (O neighbors + sink edge)."""
    adj = feeder.neighbors()
    return max(len(adj[m] & partition.non_metered) + 1 for m in partition.M)


def t_max(feeder: FeederGraph, partition: BusPartition, mode: Mode | str) -> int:
    """Largest even T worth testing; beyond it the max-flow cannot grow.

    Phasor data: the raw degree bound is delta_M - 1, rounded up to even
    because a metered bus and its copy jointly absorb T units. Non-phasor
    data: 2 (delta_M - 1). At least 2 in both cases.
    """
    mode = Mode.parse(mode)
    raw = max_metered_degree(feeder, partition) - 1
    if mode is Mode.PHASOR:
        bound = raw + (raw % 2)
    else:
        bound = 2 * raw
    return max(2, bound)


def test_for_T(feeder: FeederGraph, partition: BusPartition, mode: Mode | str,
               T: int) -> IdentifiabilityVerdict:
    mode = Mode.parse(mode)
    T = _even(T)
    graph = build_bipartite_grid_graph(feeder, partition, mode)
    result = max_flow(flow_network(graph, 1, T // 2))
    O = len(graph.left)
    assigned = _assignment(graph, result)
    single = {o: (r[0] if r else None) for o, r in assigned.items()}
    groups, matchings = extract_partition(single, T)
    return IdentifiabilityVerdict(result.value == O, mode, T, result.value,
                                  t_max(feeder, partition, mode), groups, matchings,
                                  required_flow=O)


test_for_T.__test__ = False  # not a pytest test despite the name


def search_min_T(feeder: FeederGraph, partition: BusPartition,
                 mode: Mode | str) -> IdentifiabilityVerdict:
    mode = Mode.parse(mode)
    bound = t_max(feeder, partition, mode)
    verdict = None
    for T in range(2, bound + 1, 2):
        verdict = test_for_T(feeder, partition, mode, T)
        if verdict.success:
            return verdict
    return verdict


def test_single_slot(feeder: FeederGraph, partition: BusPartition,
                     mode: Mode | str) -> IdentifiabilityVerdict:
    """T = 1 tests: each O bus needs one (phasor) or two (non-phasor) unique M buses."""
    mode = Mode.parse(mode)
    graph = build_bipartite_grid_graph(feeder, partition, Mode.NON_PHASOR)
    need = 1 if mode is Mode.PHASOR else 2
    result = max_flow(flow_network(graph, need, 1))
    O = len(graph.left)
    assigned = _assignment(graph, result)
    match = {o: (r[0] if need == 1 else list(r)) for o, r in assigned.items() if r}
    return IdentifiabilityVerdict(result.value == need * O, mode, 1, result.value,
                                  t_max(feeder, partition, mode), (tuple(graph.left),),
                                  (match,), single_slot=True, required_flow=need * O)


test_single_slot.__test__ = False
