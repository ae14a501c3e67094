import numpy as np
import pytest

from dbook.approximator import actor_sizes, init_params
from dbook.domain import FEATURE_NAMES, ContractError
from dbook.explain import (
    action_probability_model,
    coalition_masks,
    exact_shapley,
    explain_policy,
    summarize_attributions,
)
from oracles import permutation_shapley


def trained_like_actor(seed=0):
    actor = init_params(actor_sizes(), np.random.default_rng(seed))
    actor.arrays[4] *= 100.0  # output gain large enough to give non-trivial probabilities
    return actor


def test_coalition_masks():
    m = coalition_masks(3)
    assert m.shape == (8, 3)
    assert m[0].sum() == 0 and m[-1].sum() == 3 and list(m[5]) == [True, False, True]


def test_constant_model():
    rng = np.random.default_rng(0)
    res = exact_shapley(lambda X: np.full(len(X), 0.37), rng.random(10), rng.random((5, 10)))
    assert np.all(np.abs(res.phi) < 1e-15) and res.base_value == pytest.approx(0.37)


def test_linear_closed_form():
    rng = np.random.default_rng(1)
    w = rng.normal(size=10)
    x, bg = rng.random(10), rng.random((20, 10))
    res = exact_shapley(lambda X: X @ w, x, bg)
    assert np.allclose(res.phi, w * (x - bg.mean(axis=0)), atol=1e-9, rtol=0)


def test_linear_three_feature_permutation_oracle():
    rng = np.random.default_rng(2)
    w = rng.normal(size=3)
    x, bg = rng.random(3), rng.random((7, 3))
    f = lambda X: X @ w
    assert np.allclose(exact_shapley(f, x, bg).phi, permutation_shapley(f, x, bg), atol=1e-12)


@pytest.mark.parametrize("F", [1, 2, 3, 4])
def test_nonlinear_permutation_oracle(F):
    rng = np.random.default_rng(F)
    W = rng.normal(size=(F, 5))
    f = lambda X: np.tanh(X @ W).prod(axis=1) + np.sin(X.sum(axis=1))
    x, bg = rng.random(F), rng.random((9, F))
    assert np.allclose(exact_shapley(f, x, bg).phi, permutation_shapley(f, x, bg), atol=1e-9, rtol=0)


def test_symmetry():
    f = lambda X: X[:, 0] * X[:, 1] + X[:, 2]
    x = np.array([0.7, 0.7, 0.2])
    bg = np.array([[0.1, 0.1, 0.5], [0.4, 0.4, 0.9]])
    phi = exact_shapley(f, x, bg).phi
    assert phi[0] == pytest.approx(phi[1], abs=1e-15)


def test_efficiency_on_policy_instances():
    rng = np.random.default_rng(3)
    actor = trained_like_actor()
    bg = rng.random((16, 10))
    for x in rng.random((100, 10)):
        res = explain_policy(actor, x, bg, 1)
        assert res.efficiency_gap <= 1e-9


def test_dummy_feature_gets_zero():
    rng = np.random.default_rng(4)
    actor = trained_like_actor(1)
    actor.arrays[0][3, :] = 0.0  # feature 3 never reaches the hidden layer
    res = explain_policy(actor, rng.random(10), rng.random((8, 10)), 0)
    assert abs(res.phi[3]) <= 1e-9


def test_model_output_is_unmasked_probability():
    actor = trained_like_actor()
    f = action_probability_model(actor, 2)
    X = np.random.default_rng(5).random((4, 10))
    total = sum(action_probability_model(actor, a)(X) for a in range(3))
    assert np.allclose(total, 1.0) and np.all(f(X) > 0)


def test_empty_background_is_contract_error():
    with pytest.raises(ContractError):
        exact_shapley(lambda X: X[:, 0], np.zeros(10), np.zeros((0, 10)))


def test_unknown_action():
    with pytest.raises(ValueError):
        explain_policy(trained_like_actor(), np.zeros(10), np.zeros((2, 10)), 3)


def test_summary_single_instance_and_row_count():
    rng = np.random.default_rng(6)
    actor = trained_like_actor()
    bg = rng.random((8, 10))
    one = explain_policy(actor, rng.random(10), bg, 1)
    rows = summarize_attributions([one])
    assert len(rows) == 10 and [r["feature_name"] for r in rows] == list(FEATURE_NAMES)
    assert [r["mean_phi"] for r in rows] == list(one.phi)
    assert [r["mean_abs_phi"] for r in rows] == list(np.abs(one.phi))
    many = summarize_attributions([explain_policy(actor, x, bg, 0) for x in rng.random((5, 10))])
    assert len(many) == 10 and all(r["value_phi_corr_sign"] in (-1, 0, 1) for r in many)


def test_summary_needs_instances():
    with pytest.raises(ContractError):
        summarize_attributions([])
