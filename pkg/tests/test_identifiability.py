import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridprobe import BusPartition, feeder_from_edges
from gridprobe.identifiability import (Mode, build_bipartite_grid_graph, extract_partition,
                                       search_min_T, t_max, test_for_T, test_single_slot)

from conftest import brute_force_single_slot, brute_force_success, random_family

MODES = ("phasor", "non_phasor")

# substation and two metered buses each carrying O leaves: non-phasor needs T=4
STAR = feeder_from_edges(7, [(1, 0), (1, 2), (1, 3), (4, 0), (5, 2), (6, 3)])
STAR_P = BusPartition([0, 2, 3], [1, 4, 5, 6])


def check_verdict_invariants(verdict, feeder, partition):
    """Partition covers O disjointly; each group's matching is valid and perfect on success."""
    adj = feeder.neighbors()
    groups = verdict.partition
    flat = [o for g in groups for o in g]
    assert sorted(flat) == partition.O
    assert len(groups) == max(1, verdict.T // 2)
    sizes = [len(g) for g in groups]
    assert max(sizes) - min(sizes) <= 1
    for group, match in zip(groups, verdict.matchings):
        assert set(match) <= set(group)
        used = [tuple(r) for r in match.values()]
        assert len(set(used)) == len(used)
        for o, (m, copy) in match.items():
            assert m in partition.metered and m in adj[o]
            assert not copy or verdict.mode is Mode.PHASOR
        if verdict.success:
            assert set(match) == set(group)


def test_chain_examples(chain3):
    feeder, partition = chain3
    for mode in MODES:
        v = search_min_T(feeder, partition, mode)
        assert v.success and v.T == 2
        assert v.partition == ((1,),)
    ss = test_single_slot(feeder, partition, "phasor")
    assert ss.success and ss.matched_pairs() in ([(1, 0, False)], [(1, 2, False)])
    ss = test_single_slot(feeder, partition, "non-phasor")
    assert ss.success and sorted(m for _, m, _ in ss.matched_pairs()) == [0, 2]


def test_isolated_non_metered_bus_fails():
    # bus 2 hangs off non-metered bus 1: no metered neighbor
    feeder = feeder_from_edges(3, [(0, 1), (1, 2)])
    partition = BusPartition([0], [1, 2])
    for mode in MODES:
        v = search_min_T(feeder, partition, mode)
        assert not v.success and v.T == v.T_max
        assert "not certified" in v.describe()
        d = v.to_dict()
        assert d["success"] is False and d["T_max"] == v.T_max


def test_single_slot_needs_two_metered_neighbors():
    feeder = feeder_from_edges(3, [(0, 1), (0, 2)])
    partition = BusPartition([0, 2], [1])
    assert test_single_slot(feeder, partition, "phasor").success
    assert not test_single_slot(feeder, partition, "non_phasor").success


def test_odd_T_is_rounded_up(chain3):
    feeder, partition = chain3
    with pytest.warns(UserWarning, match="rounded to 4"):
        v = test_for_T(feeder, partition, "phasor", 3)
    assert v.T == 4


def test_star_needs_four_slots_without_phasors():
    assert not test_for_T(STAR, STAR_P, "non_phasor", 2).success
    v = search_min_T(STAR, STAR_P, "non_phasor")
    assert v.success and v.T == 4 and t_max(STAR, STAR_P, "non_phasor") == 4
    assert search_min_T(STAR, STAR_P, "phasor").T == 2
    check_verdict_invariants(v, STAR, STAR_P)


def test_phasor_bound_is_rounded_to_even():
    # three O leaves on the substation: delta_M - 1 = 3 but success needs T = 4
    feeder = feeder_from_edges(4, [(0, 1), (0, 2), (0, 3)])
    partition = BusPartition([0], [1, 2, 3])
    assert not test_for_T(feeder, partition, "phasor", 2).success
    assert test_for_T(feeder, partition, "phasor", 4).success
    assert t_max(feeder, partition, "phasor") == 4


def test_verdict_json_schema(chain3):
    feeder, partition = chain3
    d = json.loads(json.dumps(search_min_T(feeder, partition, "phasor").to_dict()))
    assert {"success", "mode", "T", "flow", "T_max", "partition", "matchings"} <= set(d)
    assert d["matchings"][0] == {"o": 1, "m": d["matchings"][0]["m"], "copy": False}


def test_bipartite_graph_copies():
    feeder = feeder_from_edges(3, [(0, 1), (1, 2)])
    partition = BusPartition([0, 2], [1])
    g = build_bipartite_grid_graph(feeder, partition, "phasor")
    assert set(g.right) == {(0, False), (2, False), (0, True), (2, True)}
    assert len(g.edges) == 4
    g = build_bipartite_grid_graph(feeder, partition, "non_phasor")
    assert set(g.right) == {(0, False), (2, False)} and len(g.edges) == 2


@pytest.mark.parametrize("mode", MODES)
def test_agrees_with_brute_force(mode):
    for feeder, partition in random_family(101, 60):
        for T in (2, 4):
            v = test_for_T(feeder, partition, mode, T)
            assert v.success == brute_force_success(feeder, partition, mode, T)
            check_verdict_invariants(v, feeder, partition)


@pytest.mark.parametrize("mode", MODES)
def test_single_slot_agrees_with_brute_force(mode):
    for feeder, partition in random_family(202, 120):
        assert test_single_slot(feeder, partition, mode).success == \
            brute_force_single_slot(feeder, partition, mode)


def test_single_slot_pigeonhole():
    for feeder, partition in random_family(303, 100):
        if len(partition.O) > len(partition.M):
            assert not test_single_slot(feeder, partition, "phasor").success


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_monotone_in_T_and_phasor_dominates(seed):
    (feeder, partition), = random_family(seed, 1, n_max=10, mesh_prob=0.5)
    for T in (2, 4, 6):
        ph = test_for_T(feeder, partition, "phasor", T).success
        nph = test_for_T(feeder, partition, "non_phasor", T).success
        assert not nph or ph
        for mode, ok in (("phasor", ph), ("non_phasor", nph)):
            if ok:
                assert test_for_T(feeder, partition, mode, T + 2).success


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_counting_condition_is_necessary(seed):
    (feeder, partition), = random_family(seed, 1, n_max=10)
    M, O = len(partition.M), len(partition.O)
    for T in (2, 4, 6):
        for mode in MODES:
            if M < O / T:
                assert not test_for_T(feeder, partition, mode, T).success


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_nothing_changes_past_t_max(seed):
    (feeder, partition), = random_family(seed, 1, n_max=10, mesh_prob=0.5)
    for mode in MODES:
        bound = t_max(feeder, partition, mode)
        at_bound = test_for_T(feeder, partition, mode, bound).success
        for extra in (bound + 2, bound + 4):
            assert test_for_T(feeder, partition, mode, extra).success == at_bound


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 4), st.integers(1, 12))
def test_extract_partition_is_a_valid_coloring(seed, K, n_o):
    rng = np.random.default_rng(seed)
    rights = [(int(m), bool(c)) for m, c in zip(rng.integers(0, 5, 8), rng.integers(0, 2, 8))]
    load: dict = {}
    assignment = {}
    for o in range(n_o):
        r = rights[int(rng.integers(0, len(rights)))]
        if rng.random() < 0.2 or load.get(r, 0) == K:
            assignment[o] = None
        else:
            assignment[o] = r
            load[r] = load.get(r, 0) + 1
    groups, matchings = extract_partition(assignment, 2 * K)
    assert sorted(o for g in groups for o in g) == list(range(n_o))
    for group, match in zip(groups, matchings):
        assert set(match) == {o for o in group if assignment[o] is not None}
        assert len(set(match.values())) == len(match)
        assert all(assignment[o] == r for o, r in match.items())


def test_extract_partition_rejects_overloaded_right_node():
    with pytest.raises(RuntimeError):
        extract_partition({1: (0, False), 2: (0, False), 3: (0, False)}, 4)


def test_mode_parsing():
    assert Mode.parse("non-phasor") is Mode.NON_PHASOR
    assert Mode.parse(Mode.PHASOR) is Mode.PHASOR
    with pytest.raises(ValueError):
        Mode.parse("polar")
