"""Feeder graph, bus admittance matrix and probing-setup validation.

All electrical quantities are per-unit. The declared base (MVA, kV) in a
feeder file is carried along for bookkeeping only.
"""
from __future__ import annotations

import json
from collections import deque
from importlib import resources
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.sparse as sp


class FeederError(ValueError):
    """Raised when a feeder or partition file is malformed or inconsistent."""


class PartitionError(FeederError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    is_substation: bool = False
    shunt_admittance: complex = 0j
    name: str | None = None


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    series_admittance: complex
    shunt_from: complex = 0j
    shunt_to: complex = 0j

    @property
    def key(self) -> tuple[int, int]:
        return (min(self.from_bus, self.to_bus), max(self.from_bus, self.to_bus))


@dataclass(frozen=True)
class FeederGraph:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_mva: float = 1.0
    base_kv: float = 1.0

    def __post_init__(self):
        _validate_feeder(self)

    @property
    def n_buses(self) -> int:
        """Number of buses including the substation (N + 1)."""
        return len(self.buses)

    @property
    def substation(self) -> int:
        return 0

    def neighbors(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in self.buses]
        for line in self.lines:
            adj[line.from_bus].add(line.to_bus)
            adj[line.to_bus].add(line.from_bus)
        return adj

    def edges(self) -> list[tuple[int, int]]:
        return sorted(line.key for line in self.lines)

    def pattern(self) -> np.ndarray:
        """Boolean adjacency-plus-diagonal pattern, the sparsity of G and B."""
        n = self.n_buses
        pat = np.eye(n, dtype=bool)
        for a, b in self.edges():
            pat[a, b] = pat[b, a] = True
        return pat

    def to_dict(self) -> dict:
        buses = []
        for bus in self.buses:
            entry = {"id": bus.id, "substation": bus.is_substation,
                     "shunt": [bus.shunt_admittance.real, bus.shunt_admittance.imag]}
            if bus.name is not None:
                entry["name"] = bus.name
            buses.append(entry)
        lines = []
        for line in self.lines:
            entry = {"from": line.from_bus, "to": line.to_bus,
                     "y": [line.series_admittance.real, line.series_admittance.imag]}
            if line.shunt_from or line.shunt_to:
                entry["shunt_from"] = [line.shunt_from.real, line.shunt_from.imag]
                entry["shunt_to"] = [line.shunt_to.real, line.shunt_to.imag]
            lines.append(entry)
        return {"base": {"mva": self.base_mva, "kv": self.base_kv},
                "buses": buses, "lines": lines}


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Bus admittance Y = G + jB stored as sparse CSR matrices."""

    G: sp.csr_matrix
    B: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.G.shape[0]

    @property
    def Y(self) -> sp.csr_matrix:
        return (self.G + 1j * self.B).tocsr()

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        return self.G.toarray(), self.B.toarray()

    def pattern(self) -> np.ndarray:
        """Nonzero positions of Y (union of G and B positions)."""
        G, B = self.dense()
        return (G != 0) | (B != 0)


@dataclass(frozen=True)
class BusPartition:
    """Metered set M (always holds the substation) and non-metered set O."""

    metered: frozenset[int]
    non_metered: frozenset[int]

    def __init__(self, metered: Iterable[int], non_metered: Iterable[int]):
        object.__setattr__(self, "metered", frozenset(int(m) for m in metered))
        object.__setattr__(self, "non_metered", frozenset(int(o) for o in non_metered))

    @property
    def M(self) -> list[int]:
        return sorted(self.metered)

    @property
    def O(self) -> list[int]:  # noqa: E743
        return sorted(self.non_metered)

    def to_dict(self) -> dict:
        return {"metered": self.M, "non_metered": self.O}

    @classmethod
    def from_dict(cls, data: dict) -> "BusPartition":
        try:
            return cls(data["metered"], data["non_metered"])
        except (KeyError, TypeError) as exc:
            raise PartitionError(f"malformed partition: {exc}") from exc


def _validate_feeder(feeder: FeederGraph) -> None:
    n = len(feeder.buses)
    if n < 2:
        raise FeederError("feeder needs at least 2 buses")
    ids = [bus.id for bus in feeder.buses]
    if ids != list(range(n)):
        raise FeederError("bus ids must be contiguous 0..N in order")
    subs = [bus.id for bus in feeder.buses if bus.is_substation]
    if subs != [0]:
        raise FeederError(f"exactly one substation with id 0 required, got {subs}")
    seen = set()
    for line in feeder.lines:
        a, b = line.from_bus, line.to_bus
        if not (0 <= a < n and 0 <= b < n):
            raise FeederError(f"line ({a},{b}) references unknown bus")
        if a == b:
            raise FeederError(f"line ({a},{b}) is a self-loop")
        if line.series_admittance == 0:
            raise FeederError(f"line ({a},{b}) has zero series admittance")
        if line.key in seen:
            raise FeederError(f"duplicate line {line.key}")
        seen.add(line.key)
    adj = feeder.neighbors()
    reached = {0}
    queue = deque([0])
    while queue:
        k = queue.popleft()
        for m in adj[k]:
            if m not in reached:
                reached.add(m)
                queue.append(m)
    if len(reached) != n:
        missing = sorted(set(range(n)) - reached)
        raise FeederError(f"feeder is disconnected: buses {missing} unreachable")


def _pair(value, what: str) -> complex:
    try:
        re, im = value
        return complex(float(re), float(im))
    except (TypeError, ValueError) as exc:
        raise FeederError(f"{what} must be a [real, imag] pair, got {value!r}") from exc


def feeder_from_dict(data: dict) -> FeederGraph:
    """Build a validated feeder from the JSON schema.

    Parallel lines are merged by adding admittances; impedance-specified
    lines (``"z": [r, x]``) are converted to admittance here.
    """
    try:
        base = data["base"]
        base_mva, base_kv = float(base["mva"]), float(base["kv"])
        raw_buses = sorted(data["buses"], key=lambda b: int(b["id"]))
        raw_lines = data["lines"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FeederError(f"malformed feeder: {exc}") from exc

    buses = []
    for b in raw_buses:
        shunt = _pair(b.get("shunt", [0.0, 0.0]), "bus shunt")
        buses.append(Bus(int(b["id"]), bool(b.get("substation", False)), shunt, b.get("name")))

    merged: dict[tuple[int, int], Line] = {}
    for entry in raw_lines:
        try:
            a, b = int(entry["from"]), int(entry["to"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederError(f"malformed line: {entry!r}") from exc
        if "y" in entry:
            y = _pair(entry["y"], "line y")
        elif "z" in entry:
            z = _pair(entry["z"], "line z")
            if z == 0:
                raise FeederError(f"line ({a},{b}) has zero impedance")
            y = 1 / z
        else:
            raise FeederError(f"line ({a},{b}) needs 'y' or 'z'")
        sh_from = _pair(entry.get("shunt_from", [0.0, 0.0]), "line shunt")
        sh_to = _pair(entry.get("shunt_to", [0.0, 0.0]), "line shunt")
        line = Line(a, b, y, sh_from, sh_to)
        if line.key in merged:
            prev = merged[line.key]
            # keep the first orientation; shunt halves follow their bus
            if prev.from_bus != a:
                sh_from, sh_to = sh_to, sh_from
            line = Line(prev.from_bus, prev.to_bus, prev.series_admittance + y,
                        prev.shunt_from + sh_from, prev.shunt_to + sh_to)
        merged[line.key] = line
    lines = tuple(merged[k] for k in sorted(merged))
    return FeederGraph(tuple(buses), lines, base_mva, base_kv)


def load_feeder(path: str | Path) -> FeederGraph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FeederError(f"cannot parse {path}: {exc}") from exc
    return feeder_from_dict(data)


def save_feeder(feeder: FeederGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(feeder.to_dict(), indent=2))


def load_partition(path: str | Path) -> BusPartition:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PartitionError(f"cannot parse {path}: {exc}") from exc
    return BusPartition.from_dict(data)


def build_admittance(feeder: FeederGraph) -> AdmittanceMatrix:
    n = feeder.n_buses
    rows, cols, vals = [], [], []

    def add(i, j, v):
        rows.append(i)
        cols.append(j)
        vals.append(v)

    for bus in feeder.buses:
        add(bus.id, bus.id, bus.shunt_admittance)
    for line in feeder.lines:
        a, b, y = line.from_bus, line.to_bus, line.series_admittance
        add(a, a, y + line.shunt_from)
        add(b, b, y + line.shunt_to)
        add(a, b, -y)
        add(b, a, -y)
    Y = sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()
    Y.sum_duplicates()
    G = sp.csr_matrix(Y.real)
    B = sp.csr_matrix(Y.imag)
    return AdmittanceMatrix(G, B)


def validate_partition(feeder: FeederGraph, partition: BusPartition) -> BusPartition:
    M, O = partition.metered, partition.non_metered
    overlap = M & O
    if overlap:
        raise PartitionError(f"buses {sorted(overlap)} are both metered and non-metered")
    if feeder.substation not in M:
        raise PartitionError("substation (bus 0) must be metered")
    everything = set(range(feeder.n_buses))
    if M | O != everything:
        missing = sorted(everything - (M | O))
        extra = sorted((M | O) - everything)
        raise PartitionError(f"partition does not cover buses: missing {missing}, unknown {extra}")
    return partition


def feeder_from_edges(n_buses: int, edges, admittances=None) -> FeederGraph:
    """Convenience constructor: buses 0..n_buses-1, bus 0 is the substation.

    ``admittances`` is a sequence of complex series admittances aligned with
    ``edges``; defaults to 1 - 2j on every line.
    """
    edges = list(edges)
    if admittances is None:
        admittances = [1 - 2j] * len(edges)
    buses = tuple(Bus(k, k == 0) for k in range(n_buses))
    lines = tuple(Line(int(a), int(b), complex(y)) for (a, b), y in zip(edges, admittances))
    return FeederGraph(buses, lines)


def ieee34() -> FeederGraph:
    """The shipped 34-bus test feeder (single-phase equivalent, 2.5 MVA / 24.9 kV base)."""
    text = resources.files("gridprobe").joinpath("data/ieee34.json").read_text(encoding="utf-8")
    return feeder_from_dict(json.loads(text))
