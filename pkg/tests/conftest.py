"""Shared fixtures and independent oracles for the test suite."""
from __future__ import annotations

import itertools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gridprobe import BusPartition, feeder_from_edges  # noqa: E402
from gridprobe.powerflow import stack  # noqa: E402

CHAIN_Z = [0.02 + 0.04j, 0.03 + 0.05j]
CHAIN6_Z = [0.02 + 0.04j, 0.03 + 0.05j, 0.02 + 0.03j, 0.04 + 0.05j, 0.03 + 0.03j]


def chain(n: int = 3, z=None):
    z = z or (CHAIN6_Z if n == 6 else [0.02 + 0.04j] * (n - 1))
    return feeder_from_edges(n, [(k, k + 1) for k in range(n - 1)], [1 / zz for zz in z])


def random_feeder(rng: np.random.Generator, n: int, mesh_prob: float = 0.3):
    """Random tree on n buses plus, with probability mesh_prob, one or two chords."""
    edges = {(int(rng.integers(0, k)), k) for k in range(1, n)}
    if n > 3 and rng.random() < mesh_prob:
        for _ in range(int(rng.integers(1, 3))):
            a, b = sorted(int(x) for x in rng.choice(n, 2, replace=False))
            edges.add((a, b))
    edges = sorted(edges)
    z = rng.uniform(0.01, 0.05, len(edges)) + 1j * rng.uniform(0.01, 0.08, len(edges))
    return feeder_from_edges(n, edges, list(1 / z))


def random_partition(rng: np.random.Generator, n: int) -> BusPartition:
    others = list(range(1, n))
    k = int(rng.integers(0, n))  # number of extra metered buses
    metered = {0, *(int(x) for x in rng.choice(others, size=min(k, len(others)), replace=False))}
    return BusPartition(sorted(metered), sorted(set(range(n)) - metered))


def random_family(seed: int, count: int, n_min: int = 3, n_max: int = 8, mesh_prob: float = 0.3):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        n = int(rng.integers(n_min, n_max + 1))
        feeder = random_feeder(rng, n, mesh_prob)
        partition = random_partition(rng, n)
        if partition.O:
            out.append((feeder, partition))
    return out


def random_states(rng: np.random.Generator, n: int, T: int, slack: complex = 1.0) -> list[np.ndarray]:
    out = []
    for _ in range(T):
        v = rng.uniform(0.9, 1.1, n) * np.exp(1j * rng.uniform(-0.3, 0.3, n))
        v[0] = slack
        out.append(stack(v))
    return out


# ---------------------------------------------------------------- brute-force oracles

def _matchable(group, targets_of) -> bool:
    """Exhaustive search for an injective map group -> right nodes."""
    group = list(group)

    def extend(i, used):
        if i == len(group):
            return True
        return any(extend(i + 1, used | {r}) for r in targets_of[group[i]] if r not in used)

    return extend(0, frozenset())


def brute_force_success(feeder, partition, mode: str, T: int) -> bool:
    """Does O split into T/2 groups, each perfectly matchable into M (or M u M')?"""
    adj = feeder.neighbors()
    copies = (False, True) if mode == "phasor" else (False,)
    targets = {o: [(m, c) for m in sorted(adj[o] & partition.metered) for c in copies]
               for o in partition.O}
    K = T // 2
    cache: dict = {}

    def ok(group):
        key = frozenset(group)
        if key not in cache:
            cache[key] = _matchable(group, targets)
        return cache[key]

    O = partition.O
    for labels in itertools.product(range(K), repeat=len(O)):
        groups = [[o for o, g in zip(O, labels) if g == k] for k in range(K)]
        if all(ok(g) for g in groups):
            return True
    return False


def brute_force_single_slot(feeder, partition, mode: str) -> bool:
    """Every O bus gets one (phasor) or two (non-phasor) M buses, all distinct."""
    adj = feeder.neighbors()
    need = 1 if mode == "phasor" else 2
    slots = [(o, k) for o in partition.O for k in range(need)]
    targets = {s: sorted(adj[s[0]] & partition.metered) for s in slots}
    return _matchable(slots, targets)


@pytest.fixture
def chain3():
    return chain(3, CHAIN_Z), BusPartition([0, 2], [1])


@pytest.fixture
def chain6():
    return chain(6), BusPartition([0, 2, 4], [1, 3, 5])


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
