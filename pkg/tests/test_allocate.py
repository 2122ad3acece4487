import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lyapgrid.allocate import (AllocationResult, ExperimentConfig, NodeResult, NodeTensorBank,
                               PerturbationSpec, allocate_with_failures, brute_force_allocate,
                               greedy_allocate, perturbation_spec, run_experiment, set_objective,
                               sweep_nodes, verify_theorem1)
from lyapgrid.errors import InputError
from lyapgrid.integrator import SimConfig
from lyapgrid.lyapunov import deformation_tensor, flow_from_qr, global_selector

SHORT = ExperimentConfig(sim=SimConfig(h=0.1, t_end=3.0))


def random_bank(rng, n, m, rank=None):
    out = {}
    for i in range(1, m + 1):
        X = rng.standard_normal((n, rank or int(rng.integers(1, n + 1))))
        out[i] = X @ X.T
    return NodeTensorBank(out)


def test_perturbation_spec(case9):
    spec = perturbation_spec(case9, 5, 2.0, ExperimentConfig())
    assert spec.base_injection == (0.5, 0.0)
    assert spec.perturbed_injection == pytest.approx((0.51, 0.0))
    with pytest.raises(InputError):
        PerturbationSpec(5, -1.0, (0.5, 0.0))
    declared = case9.with_renewables({7: (0.2, 0.1)})
    assert perturbation_spec(declared, 7, 10, ExperimentConfig()).perturbed_injection == \
        pytest.approx((0.22, 0.11))


def test_objective_examples():
    bank = NodeTensorBank({1: 2.0 * np.eye(3), 2: 0.5 * np.eye(3)})
    assert set_objective([], bank) == 0.0
    ridge = 1e-3
    assert set_objective([1, 2], bank, ridge) == pytest.approx(3 * math.log((ridge + 2.5) / ridge))
    with pytest.raises(InputError):
        set_objective([1], bank, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6))
def test_objective_monotone(seed, n, m):
    bank = random_bank(np.random.default_rng(seed), n, m)
    nodes = bank.nodes
    values = {S: set_objective(S, bank) for r in range(m + 1)
              for S in itertools.combinations(nodes, r)}
    for A, vA in values.items():
        for B, vB in values.items():
            if set(A) <= set(B):
                assert vA <= vB + 1e-10


def test_greedy_edge_cases(rng):
    bank = random_bank(rng, 3, 4)
    assert greedy_allocate(bank, 0) == AllocationResult([], [], [])
    single = NodeTensorBank({7: np.eye(2)})
    assert greedy_allocate(single, 1).ordered_nodes == [7]
    with pytest.raises(InputError):
        greedy_allocate(bank, 5)
    res = greedy_allocate(bank, 4)
    assert sorted(res.ordered_nodes) == [1, 2, 3, 4]
    np.testing.assert_allclose(np.cumsum(res.marginal_gains), res.objective_trace)
    assert all(g >= -1e-10 for g in res.marginal_gains)
    assert np.all(np.diff(res.marginal_gains) <= 1e-9)  # diminishing returns along the greedy path


def test_greedy_ties_go_to_smaller_id():
    bank = NodeTensorBank({9: np.eye(2), 3: np.eye(2), 5: np.eye(2)})
    assert greedy_allocate(bank, 3).ordered_nodes == [3, 5, 9]


def test_greedy_independent_of_insertion_order(rng):
    bank = random_bank(rng, 4, 6)
    ref = greedy_allocate(bank, 6).ordered_nodes
    for perm in itertools.islice(itertools.permutations(bank.nodes), 0, 720, 97):
        shuffled = NodeTensorBank({k: bank.tensors[k] for k in perm})
        assert greedy_allocate(shuffled, 6).ordered_nodes == ref


def test_brute_force_examples(rng):
    bank = random_bank(rng, 3, 3)
    assert brute_force_allocate(bank, 3)[0] == [1, 2, 3]
    best, val = brute_force_allocate(bank, 1)
    singles = [set_objective([i], bank) for i in (1, 2, 3)]
    assert val == max(singles) and best == [1 + int(np.argmax(singles))]
    with pytest.raises(InputError):
        brute_force_allocate(NodeTensorBank({i: np.eye(1) for i in range(21)}), 2)
    with pytest.raises(InputError):
        brute_force_allocate(bank, 4)


def test_bank_validation():
    with pytest.raises(InputError):
        NodeTensorBank({1: np.eye(2), 2: np.eye(3)})
    with pytest.raises(InputError):
        NodeTensorBank({1: np.zeros((2, 3))})


def test_failed_nodes_lead_the_order(rng):
    bank = random_bank(rng, 3, 3)
    results = [NodeResult(k, t, -0.1, 1.0, 2) for k, t in bank.tensors.items()]
    results.append(NodeResult(8, None, None, None, None, error="StepError: step 4: boom"))
    res = allocate_with_failures(results, 4)
    assert res.ordered_nodes[0] == 8 and res.failed_nodes == [8]
    assert math.isnan(res.marginal_gains[0])
    assert res.ordered_nodes[1:] == greedy_allocate(bank, 3).ordered_nodes
    with pytest.raises(InputError):
        allocate_with_failures(results, 5)


def test_sum_identity_identity_flow():
    chk = verify_theorem1(np.broadcast_to(np.eye(3), (5, 3, 3)).copy(), endpoint=True)
    assert chk.lhs == 0.0 and chk.rhs == 0.0 and chk.sum_qr == 0.0


def test_sum_identity_diagonal_closed_form():
    d = np.array([0.9, 0.6, 1.05])
    k = 40
    chk = verify_theorem1(np.broadcast_to(np.diag(d), (k, 3, 3)).copy(), endpoint=True)
    expected = 2 * k * np.sum(np.log(d))
    assert chk.lhs == pytest.approx(expected, rel=1e-8)
    assert chk.rhs == pytest.approx(expected, rel=1e-8)
    assert chk.sum_spectrum == pytest.approx(np.sum(np.log(d)), rel=1e-12)


def test_sum_identity_requires_maps(case9):
    exp, traj = run_experiment(case9, 5, 2.0, SHORT, variational=False)
    with pytest.raises(InputError):
        verify_theorem1(traj)


def test_zero_perturbation_is_stationary(case9):
    exp, traj = run_experiment(case9, 5, 0.0, SHORT)
    assert np.max(np.abs(traj.states - traj.states[0])) < 1e-9
    # the tensor is then that of the linearized equilibrium flow
    eq_flow = flow_from_qr(traj)
    T = deformation_tensor(eq_flow, global_selector(exp.model.layout)).matrix
    assert np.all(np.isfinite(T))


def test_case9_node5_pipeline(case9_run):
    exp, traj = case9_run
    assert traj.nr_iterations.min() >= 1 and traj.nr_iterations.max() <= SHORT.sim.nr_max_iter
    T = deformation_tensor(flow_from_qr(traj), global_selector(exp.model.layout)).matrix
    assert np.array_equal(T, T.T)
    assert np.linalg.eigvalsh(T).min() >= -1e-10 * np.abs(T).max()


@pytest.mark.parametrize("node", [2, 5, 8])
def test_larger_perturbation_deforms_more(case9, node):
    # expected monotone response to a larger injection step
    traces = []
    for beta in (2.0, 20.0):
        exp, traj = run_experiment(case9, node, beta, ExperimentConfig())
        T = deformation_tensor(flow_from_qr(traj), global_selector(exp.model.layout)).matrix
        traces.append(np.trace(T))
    assert traces[1] >= traces[0] * (1 - 1e-9)


def test_sweep_parallel_matches_serial(case9):
    serial = sweep_nodes(case9, 2.0, SHORT, nodes=[4, 7])
    parallel = sweep_nodes(case9, 2.0, SHORT, nodes=[7, 4], workers=2)
    assert [r.node for r in parallel] == [4, 7]
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.tensor, b.tensor)
        assert a.exponent == b.exponent and a.settling == b.settling


def test_sweep_records_failures(case9):
    cfg = ExperimentConfig(sim=SimConfig(h=0.1, t_end=1.0, nr_tol=1e-300, nr_max_iter=2))
    res = sweep_nodes(case9, 2.0, cfg, nodes=[4])
    assert res[0].failed and "step 1" in res[0].error
    assert NodeTensorBank.from_results(res, 10).nodes == []
