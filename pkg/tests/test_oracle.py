import numpy as np
import pytest

from ctclab import oracle
from ctclab.ctc import BLANK

A, B = 1, 2
U = np.full((2, 2), 0.5)


def test_uniform_two_step_probability_and_entropy():
    assert oracle.prob_by_enumeration(U, (A,)) == pytest.approx(0.75)
    assert oracle.entropy_by_enumeration(U, (A,)) == pytest.approx(np.log(3), rel=1e-15)


def test_empty_target():
    G = np.array([[0.6, 0.4], [0.2, 0.8], [0.5, 0.5]])
    assert oracle.prob_by_enumeration(G, ()) == pytest.approx(0.6 * 0.2 * 0.5)


def test_single_valid_path_has_zero_entropy():
    G = np.array([[0.2, 0.5, 0.3], [0.1, 0.1, 0.8]])
    assert oracle.count_valid_paths(2, 3, (A, B)) == 1
    assert oracle.entropy_by_enumeration(G, (A, B)) == pytest.approx(0.0, abs=1e-15)


def test_count_valid_paths():
    # one contiguous run of A inside three steps: 3 + 2 + 1 placements
    assert oracle.count_valid_paths(3, 2, (A,)) == 6
    assert oracle.count_valid_paths(2, 2, (A, A)) == 0


def test_definitional_lattice_base_cases():
    G = np.random.default_rng(0).dirichlet(np.ones(3), size=4)
    alpha, beta = oracle.alpha_beta_by_definition(G, (A, B))
    assert alpha[0, 0] == pytest.approx(G[0, BLANK])
    assert beta[-1, -1] == pytest.approx(G[-1, BLANK])


def test_best_labeling():
    G = np.array([[0.1, 0.9]])
    assert oracle.best_labeling_by_enumeration(G)[0] == (A,)
    G = np.array([[0.9, 0.05, 0.05]] * 3)
    assert oracle.best_labeling_by_enumeration(G)[0] == ()


def test_budget_and_zero_probability():
    with pytest.raises(oracle.BudgetExceeded):
        oracle.prob_by_enumeration(np.full((10, 4), 0.25), (A,), budget=1000)
    G = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert oracle.prob_by_enumeration(G, (A,)) == 0.0
    with pytest.raises(oracle.ZeroProbability):
        oracle.entropy_by_enumeration(G, (A,))
