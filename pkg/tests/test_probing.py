import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from gridprobe import BusPartition, ZipLoad, build_admittance, eval_outputs, feeder_from_edges
from gridprobe.identifiability import test_for_T, test_single_slot
from gridprobe.powerflow import injections, to_complex
from gridprobe.probing import (LoadModel, ProbingDataset, ProbingPlan, ZipIllPosedError,
                               default_plan, fit_zip, recover_loads, recover_per_slot,
                               simulate_probing, vandermonde_conditioning)

CHAIN_LOAD = LoadModel({1: (-0.1, -0.05)})
ZIP_FEEDER = feeder_from_edges(6, [(0, 1), (1, 2), (0, 3), (3, 4), (4, 5)],
                               [1 / z for z in (0.02 + 0.04j, 0.03 + 0.05j, 0.02 + 0.03j,
                                                0.04 + 0.05j, 0.03 + 0.03j)])
ZIP_PARTITION = BusPartition([0, 2, 3, 5], [1, 4])
ZIP_LOADS = LoadModel(zip={1: ZipLoad(0.05, 0.04, 0.03, 0.02, 0.01, 0.01),
                           4: ZipLoad(0.08, 0.02, 0.05, 0.03, 0.02, 0.02)})


def chain_plan():
    return ProbingPlan(({2: (0.05, 0.01)}, {2: (-0.04, 0.02)}))


def test_plan_validation():
    with pytest.raises(ValueError, match="degenerate"):
        ProbingPlan(({2: (0.1, 0.0)}, {2: (0.1, 0.0)}))
    with pytest.raises(ValueError, match="non-finite"):
        ProbingPlan(({2: (np.nan, 0.0)},))
    with pytest.raises(ValueError):
        ProbingPlan(())
    plan = chain_plan()
    assert ProbingPlan.from_dict(json.loads(json.dumps(plan.to_dict()))) == plan
    with pytest.raises(ValueError, match="declares"):
        ProbingPlan.from_dict({**plan.to_dict(), "T": 3})


def test_default_plan_is_seeded_and_distinct(chain6):
    _, partition = chain6
    a = default_plan(partition, 4, rng=3)
    assert a == default_plan(partition, 4, rng=3)
    assert a.T == 4 and all(set(s) == {2, 4} for s in a.setpoints)
    assert all(abs(v) <= 0.05 for s in a.setpoints for pq in s.values() for v in pq)


def test_load_model_round_trip():
    model = LoadModel({3: (-0.1, -0.02)}, {1: ZipLoad(0.1, 0.2, 0.3, 0.0, 0.1, 0.0)})
    assert LoadModel.from_dict(json.loads(json.dumps(model.to_dict()))) == model
    assert model.injection_at(1) == pytest.approx((-0.6, -0.1))
    with pytest.raises(ValueError):
        LoadModel({1: (0.0, 0.0)}, {1: ZipLoad(0, 0, 0, 0, 0, 0)})


def test_flat_dataset(chain3):
    feeder, partition = chain3
    ds = simulate_probing(feeder, partition, LoadModel(), ProbingPlan(({2: (0.0, 0.0)},)), "phasor")
    assert np.array_equal(ds.u_sq, np.ones((1, 2)))
    assert np.array_equal(ds.theta, np.zeros((1, 2)))
    assert not ds.p.any() and not ds.q.any()
    result = recover_loads(feeder, partition, ds)
    assert result.converged and result.iterations <= 1
    # flat voltages inject the Y row sums, zero up to round-off
    assert np.abs(result.slot_loads).max() < 1e-14


def test_chain_dataset_is_self_consistent(chain3):
    feeder, partition = chain3
    Y = build_admittance(feeder)
    ds = simulate_probing(feeder, partition, CHAIN_LOAD, chain_plan(), "phasor")
    s1, s2 = ds.true_states
    assert np.abs(s1 - s2).max() > 1e-3
    for t, state in enumerate(ds.true_states):
        out = eval_outputs(state, Y)
        assert np.allclose(ds.u_sq[t], out.u_sq[[0, 2]], atol=1e-10)
        assert np.allclose(ds.theta[t], out.theta[[0, 2]], atol=1e-10)
        assert np.allclose(ds.p[t], out.p[[0, 2]], atol=1e-10)
        assert out.p[1] == pytest.approx(-0.1, abs=1e-10)
        assert ds.p[t, 1] == pytest.approx(chain_plan().setpoints[t][2][0], abs=1e-10)


def test_simulation_rejects_bad_inputs(chain3):
    feeder, partition = chain3
    with pytest.raises(ValueError, match="metered"):
        simulate_probing(feeder, partition, LoadModel({2: (0.0, 0.0)}), chain_plan(), "phasor")
    with pytest.raises(ValueError, match="lacks"):
        simulate_probing(feeder, partition, CHAIN_LOAD, ProbingPlan(({},)), "phasor")


def test_pure_impedance_zip_load():
    feeder = feeder_from_edges(3, [(0, 1), (1, 2)], [10 - 20j, 10 - 20j])
    partition = BusPartition([0, 2], [1])
    loads = LoadModel(zip={1: ZipLoad(0.3, 0.0, 0.0, 0.1, 0.0, 0.0)})
    ds = simulate_probing(feeder, partition, loads, ProbingPlan(({2: (0.05, 0.0)},)), "non_phasor")
    state = ds.true_states[0]
    p, q = injections(state, build_admittance(feeder))
    u = abs(to_complex(state)[1])
    assert -p[1] == pytest.approx(0.3 * u ** 2, abs=1e-12)
    assert -q[1] == pytest.approx(0.1 * u ** 2, abs=1e-12)


@pytest.mark.parametrize("mode", ["phasor", "non_phasor"])
def test_chain_round_trip(chain3, mode):
    feeder, partition = chain3
    assert test_for_T(feeder, partition, mode, 2).success
    ds = simulate_probing(feeder, partition, CHAIN_LOAD, chain_plan(), mode)
    result = recover_loads(feeder, partition, ds)
    assert result.converged and not result.rank_deficient
    assert result.loads[1] == pytest.approx((-0.1, -0.05), abs=1e-6)
    # every slot evaluates the same stationary load
    assert np.abs(result.slot_loads - result.slot_loads.mean(axis=0)).max() < 1e-8
    assert result.residual_history[-1] == result.residual_norm < 1e-10


@pytest.mark.parametrize("start", ["flat", "power_flow", "auto"])
def test_starts_agree(chain6, start):
    feeder, partition = chain6
    loads = LoadModel({1: (-0.15, -0.08), 3: (-0.2, -0.1), 5: (-0.12, -0.05)})
    ds = simulate_probing(feeder, partition, loads, default_plan(partition, 2, rng=1), "phasor")
    result = recover_loads(feeder, partition, ds, start=start)
    assert result.converged
    assert np.abs(result.slot_loads - np.array([[-0.15, -0.08], [-0.2, -0.1], [-0.12, -0.05]])).max() < 1e-6


def test_explicit_initial_iterate(chain3):
    feeder, partition = chain3
    ds = simulate_probing(feeder, partition, CHAIN_LOAD, chain_plan(), "phasor")
    result = recover_loads(feeder, partition, ds, initial=ds.true_states)
    assert result.converged and result.iterations <= 2
    with pytest.raises(ValueError, match="initial"):
        recover_loads(feeder, partition, ds, initial=ds.true_states[:1])
    with pytest.raises(ValueError, match="start"):
        recover_loads(feeder, partition, ds, start="random")


def test_non_convergence_is_reported(chain6):
    feeder, partition = chain6
    loads = LoadModel({1: (-0.15, -0.08), 3: (-0.2, -0.1), 5: (-0.12, -0.05)})
    ds = simulate_probing(feeder, partition, loads, default_plan(partition, 2, rng=0), "phasor")
    result = recover_loads(feeder, partition, ds, start="flat", max_iter=1)
    assert not result.converged and result.residual_norm > 1e-10
    assert len(result.states) == 2


def test_underdetermined_setup_is_rank_deficient():
    feeder = feeder_from_edges(5, [(0, 1), (1, 2), (1, 3), (1, 4)])
    partition = BusPartition([0], [1, 2, 3, 4])
    assert len(partition.M) < len(partition.O) / 2
    for T in (2, 4):
        assert not test_for_T(feeder, partition, "phasor", T).success
    loads = LoadModel({o: (-0.02, -0.01) for o in partition.O})
    plan = ProbingPlan(({},))
    ds = simulate_probing(feeder, partition, loads, plan, "phasor")
    result = recover_loads(feeder, partition, ds)
    assert result.rank_deficient


def test_recovery_input_checks(chain3):
    feeder, partition = chain3
    ds = simulate_probing(feeder, partition, CHAIN_LOAD, chain_plan(), "non_phasor")
    with pytest.raises(ValueError, match="angle"):
        recover_loads(feeder, partition, ds, mode="phasor")
    other = BusPartition([0, 1], [2])
    with pytest.raises(ValueError, match="match"):
        recover_loads(feeder, other, ds)


def test_dataset_json_round_trip(chain3):
    feeder, partition = chain3
    for mode in ("phasor", "non_phasor"):
        ds = simulate_probing(feeder, partition, CHAIN_LOAD, chain_plan(), mode)
        again = ProbingDataset.from_dict(json.loads(json.dumps(ds.to_dict())))
        assert again.mode == ds.mode and again.metered == ds.metered
        for name in ("u_sq", "p", "q"):
            assert np.array_equal(getattr(again, name), getattr(ds, name))
        assert (again.theta is None) == (mode == "non_phasor")
        assert ds.slot(2).T == 1 and np.array_equal(ds.slot(2).p[0], ds.p[1])


def test_single_slot_zip_recovery():
    assert test_single_slot(ZIP_FEEDER, ZIP_PARTITION, "non_phasor").success
    plan = default_plan(ZIP_PARTITION, 3, rng=2, amplitude=0.3)
    ds = simulate_probing(ZIP_FEEDER, ZIP_PARTITION, ZIP_LOADS, plan, "non_phasor")
    for t, result in enumerate(recover_per_slot(ZIP_FEEDER, ZIP_PARTITION, ds), start=1):
        assert result.converged
        v = to_complex(ds.true_states[t - 1])
        for k, o in enumerate(ZIP_PARTITION.O):
            expected = ZIP_LOADS.zip[o].injection(abs(v[o]))
            assert tuple(result.slot_loads[0, k]) == pytest.approx(expected, abs=1e-6)


# ---------------------------------------------------------------- ZIP fit

def test_vandermonde_determinants():
    assert vandermonde_conditioning([0.9, 1.0, 1.1]).determinant == pytest.approx(-2e-3, abs=1e-15)
    assert vandermonde_conditioning([0.95, 1.0, 1.05]).determinant == pytest.approx(-2.5e-4, abs=1e-15)
    assert vandermonde_conditioning([0.9, 1.0, 1.1, 1.05]).determinant is None
    with pytest.raises(ValueError):
        vandermonde_conditioning([1.0, 1.1])


def test_fit_zip_exact():
    u = np.array([0.92, 0.97, 1.01, 1.04, 1.08])
    s = -(0.3 * u ** 2 + 0.2 * u + 0.1)
    fit = fit_zip(u, s)
    assert fit.coefficients == pytest.approx((0.3, 0.2, 0.1), abs=1e-9)
    assert fit.residual < 1e-10 and not fit.diagnostics.ill_conditioned


def test_fit_zip_flags_ill_posed():
    with pytest.raises(ZipIllPosedError) as info:
        fit_zip([1.0, 1.0, 1.0], [-1.0, -1.0, -1.0])
    assert info.value.diagnostics.determinant == 0.0
    with pytest.raises(ZipIllPosedError):
        fit_zip([1.0, 1.0, 1.0, 1.0 + 1e-9], [-1.0] * 4)
    with pytest.raises(ValueError):
        fit_zip([1.0, 0.0, 1.1], [0, 0, 0])
    with pytest.raises(ValueError):
        fit_zip([1.0, 1.1], [0, 0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.85, 1.15), min_size=3, max_size=8),
       st.tuples(*[st.floats(-1, 1)] * 3))
def test_fit_zip_exact_when_well_conditioned(u, coef):
    u = np.array(u)
    diag = vandermonde_conditioning(u)
    assume(diag.condition < 1e10)
    assume(diag.determinant is None or abs(diag.determinant) >= 1e-12)
    a, b, c = coef
    fit = fit_zip(u, -(a * u ** 2 + b * u + c))
    assert fit.residual < 1e-10
