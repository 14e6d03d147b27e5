import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctclab import autodiff as ad
from ctclab import criteria as cr
from ctclab import oracle
from ctclab.checks import check_function, criterion_case
from ctclab.ctc import ctc_loss, lattices, min_admissible_T

from conftest import log_normalize
from test_ctc import instances

A, B = 1, 2
UNIFORM_T2 = np.log(np.full((2, 2), 0.5))


def test_entropy_uniform_three_paths():
    assert cr.entropy_term(UNIFORM_T2, (A,)).item() == pytest.approx(np.log(3), abs=1e-12)


def test_entropy_single_dominant_path():
    lp = np.log([[1e-12, 1.0 - 1e-12]])
    assert cr.entropy_term(lp, (A,)).item() == pytest.approx(0.0, abs=1e-9)


def test_enctc_values():
    lp = log_normalize(np.random.default_rng(0).normal(size=(5, 3)))
    assert cr.enctc_loss(lp, (A, B), 0.0).item() == ctc_loss(lp, (A, B)).item()
    assert cr.enctc_loss(UNIFORM_T2, (A,), 0.1).item() == pytest.approx(0.177821, abs=1e-6)


@given(instances())
def test_entropy_matches_enumeration(inst):
    lp, y = inst
    H = cr.entropy_term(lp, y).item()
    assert H >= -1e-12
    assert H == pytest.approx(oracle.entropy_by_enumeration(np.exp(lp), y), abs=1e-8)


def test_nonblank_slices_index_odd_states():
    lp = log_normalize(np.random.default_rng(1).normal(size=(4, 3)))
    la, lb, _ = lattices(lp, (A, B))
    a_nb, b_nb = cr.nonblank_slices(la, lb)
    assert np.array_equal(a_nb, la[:, [1, 3]])
    assert np.array_equal(b_nb, lb[:, [1, 3]])


def test_gamma_single_gloss_is_one():
    lp = log_normalize(np.random.default_rng(2).normal(size=(5, 3)))
    assert np.allclose(cr.stimuli_weights_for(lp, (A,)), 1.0)
    g = cr.stimuli_weights_for(UNIFORM_T2, (A,))
    assert np.allclose(g[0], g[1])


@given(instances(max_T=5, max_L=3))
def test_gamma_matches_definition(inst):
    lp, y = inst
    if not y:
        return
    gamma = cr.stimuli_weights_for(lp, y)
    assert np.allclose(gamma, oracle.gamma_by_definition(np.exp(lp), y), atol=1e-9, rtol=0)
    sums = gamma.sum(axis=1)
    assert np.all(np.isclose(sums, 1.0) | (sums == 0.0))


def test_gamma_zero_row_for_forced_blank():
    # y = (a, a) with T = 3: every valid path is (a, -, a); no gloss state at t = 2
    lp = log_normalize(np.random.default_rng(3).normal(size=(3, 2)))
    gamma = cr.stimuli_weights_for(lp, (A, A))
    assert np.array_equal(gamma[1], [0.0, 0.0])
    assert np.allclose(gamma[[0, 2]], [[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(cr.ZeroNormalizer):
        cr.stimuli_weights_for(lp, (A, A), strict=True)


def test_stimuli_loss():
    h = np.ones((3, 2))
    assert cr.stimuli_loss(h, h[:2], np.full((3, 2), 0.5)).item() == 0.0
    assert cr.stimuli_loss([[1.0, 1.0]], [[0.0, 0.0]], [[1.0]]).item() == 2.0
    rng = np.random.default_rng(4)
    ht, hk = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    gamma = rng.dirichlet(np.ones(2), size=4)
    base = cr.stimuli_loss(ht, hk, gamma).item()
    assert cr.stimuli_loss(2 * ht, 2 * hk, gamma).item() == pytest.approx(4 * base)
    with pytest.raises(cr.DimensionMismatch):
        cr.stimuli_loss(ht, np.ones((2, 4)), gamma)
    with pytest.raises(cr.DimensionMismatch):
        cr.stimuli_loss(ht, hk, gamma[:3])


def test_lm_loss():
    L = 4
    perfect = np.full((2, L), -np.inf)
    perfect[0, 2] = perfect[1, 0] = 0.0
    assert cr.lm_loss(perfect, [2, 0]).item() == 0.0
    assert cr.lm_loss(np.log(np.full((3, L), 1 / L)), [1, 2, 0]).item() == pytest.approx(np.log(L))
    lp = np.log([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    assert cr.lm_loss(lp, [1, 0]).item() == pytest.approx(-(np.log(0.5) + np.log(0.6)) / 2)


def _stim_inputs(seed=5):
    rng = np.random.default_rng(seed)
    lp = log_normalize(rng.normal(size=(6, 3)))
    y = (A, B)
    ht, hk = rng.normal(size=(6, 4)), rng.normal(size=(2, 4))
    lm = log_normalize(rng.normal(size=(2, 3)))
    return lp, y, ht, hk, lm, [B, 0]


def test_composite_schedule():
    lp, y, ht, hk, lm, tg = _stim_inputs()
    enstim = cr.CriterionConfig("enstim", phi=0.1, theta=0.5, lam=1.0)
    before = cr.composite_loss(enstim, lp, y, ht, hk, lm, tg, stimuli_active=False)
    assert before.total.item() == pytest.approx(cr.enctc_loss(lp, y, 0.1).item(), abs=1e-14)
    assert before.lm is None and before.stimuli is None

    after = cr.composite_loss(enstim, lp, y, ht, hk, lm, tg, stimuli_active=True)
    gamma = cr.stimuli_weights_for(lp, y)
    expect = ctc_loss(lp, y).item() + cr.lm_loss(lm, tg).item() + 0.5 * cr.stimuli_loss(ht, hk, gamma).item()
    assert after.total.item() == pytest.approx(expect, abs=1e-12)
    assert after.entropy is None

    literal = cr.CriterionConfig("enstim", phi=0.1, keep_entropy_after_activation=True)
    kept = cr.composite_loss(literal, lp, y, ht, hk, lm, tg, stimuli_active=True)
    assert kept.total.item() == pytest.approx(expect - 0.1 * cr.entropy_term(lp, y).item(), abs=1e-12)

    zero = cr.CriterionConfig("stim", theta=0.0, lam=0.0)
    plain = cr.composite_loss(zero, lp, y, ht, hk, lm, tg, stimuli_active=True)
    assert plain.total.item() == pytest.approx(ctc_loss(lp, y).item(), abs=1e-14)


def test_composite_needs_states_after_activation():
    lp, y, *_ = _stim_inputs()
    with pytest.raises(ValueError):
        cr.composite_loss(cr.CriterionConfig("stim"), lp, y, stimuli_active=True)


def test_components_reconstruct_total():
    lp, y, ht, hk, lm, tg = _stim_inputs(6)
    cfg = cr.CriterionConfig("enstim", phi=0.2, theta=0.3, lam=0.7, keep_entropy_after_activation=True)
    p = cr.composite_loss(cfg, lp, y, ht, hk, lm, tg, stimuli_active=True)
    rebuilt = p.ctc - 0.2 * p.entropy + 0.7 * p.lm + 0.3 * p.stimuli
    assert p.total.item() == pytest.approx(rebuilt, abs=1e-12)


@pytest.mark.parametrize("kind", cr.KINDS)
def test_criterion_gradients(kind):
    fn, inputs = criterion_case(kind, np.random.default_rng(7), T=7, L=4, K=3)
    assert check_function(fn, inputs) < 1e-4


def test_config_validation_and_warning():
    with pytest.raises(ValueError):
        cr.CriterionConfig("bogus")
    with pytest.raises(ValueError):
        cr.CriterionConfig("enctc", phi=-1)
    with pytest.warns(RuntimeWarning):
        cr.warn_if_stimuli_from_scratch(cr.CriterionConfig("stim"), 1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cr.warn_if_stimuli_from_scratch(cr.CriterionConfig("stim"), 5)
        cr.warn_if_stimuli_from_scratch(cr.CriterionConfig("ctc"), 1)


@given(st.integers(1, 3), st.integers(0, 2**31))
def test_entropy_gradient_is_finite_at_min_length(K, seed):
    rng = np.random.default_rng(seed)
    y = tuple(int(v) for v in rng.integers(1, 3, size=K))
    lp = ad.Tensor(log_normalize(rng.normal(size=(min_admissible_T(y), 3))), requires_grad=True)
    with ad.Tape():
        loss = cr.enctc_loss(lp, y, 0.2)
    ad.backward(loss)
    assert np.all(np.isfinite(lp.grad))
