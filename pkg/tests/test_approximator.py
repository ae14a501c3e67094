import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dbook.approximator import (
    AdamState,
    NetworkParams,
    TrainingError,
    actor_loss_and_grad,
    actor_sizes,
    backward_update,
    critic_loss_and_grad,
    critic_sizes,
    forward_policy,
    forward_value,
    init_params,
    masked_softmax,
    policy_probs_fast,
    soft_blend,
)
from dbook.domain import ContractError
from oracles import max_rel_error, numeric_grad


def random_net(sizes, rng, scale=0.5):
    arrays = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        arrays += [rng.normal(0, scale, (a, b)), rng.normal(0, scale, b)]
    return NetworkParams(arrays)


def random_batch(rng, n=12):
    obs = rng.random((n, 10))
    masks = rng.random((n, 3)) < 0.7
    masks[~masks.any(axis=1), 2] = True
    actions = np.array([rng.choice(np.flatnonzero(m)) for m in masks])
    return obs, masks, actions


def test_default_architecture_shapes():
    rng = np.random.default_rng(0)
    a = init_params(actor_sizes(), rng)
    c = init_params(critic_sizes(), rng)
    assert a.sizes == (10, 128, 128, 3) and c.sizes == (10, 128, 128, 1)
    assert all(np.all(a.arrays[i] == 0) for i in (1, 3, 5))


def test_zero_output_layer_is_uniform():
    net = init_params(actor_sizes(), np.random.default_rng(0))
    net.arrays[4][:] = 0.0
    p = forward_policy(net, np.full(10, 0.3), [True, True, True])
    assert np.allclose(p, 1 / 3, atol=0, rtol=1e-15)


def test_reject_only_mask():
    net = random_net((10, 4, 4, 3), np.random.default_rng(1))
    assert tuple(forward_policy(net, np.zeros(10), [False, False, True])) == (0.0, 0.0, 1.0)


def test_all_masked_is_contract_error():
    with pytest.raises(ContractError):
        masked_softmax(np.zeros((1, 3)), np.zeros((1, 3), dtype=bool))


def test_probabilities_sum_to_one_over_random_nets():
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        net = random_net((10, 4, 4, 3), rng, scale=3.0)
        p = forward_policy(net, rng.random(10), [True, True, True])
        assert abs(p.sum() - 1) < 1e-6


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.lists(st.booleans(), min_size=3, max_size=3))
def test_masked_softmax_support(logits, mask):
    if not any(mask):
        mask[0] = True
    p = masked_softmax(np.array([logits]), np.array([mask]))[0]
    assert np.count_nonzero(p) <= sum(mask)
    assert all(p[k] == 0.0 for k in range(3) if not mask[k])
    assert abs(p.sum() - 1) < 1e-6


def test_fast_path_matches_batched():
    rng = np.random.default_rng(3)
    net = init_params(actor_sizes(), rng)
    for _ in range(20):
        x = rng.random(10)
        m = [bool(v) for v in rng.random(3) < 0.7] or [True, True, True]
        if not any(m):
            m[2] = True
        assert np.allclose(policy_probs_fast(net.arrays, x, m), forward_policy(net, x, m), atol=1e-14)


def test_value_head():
    zero = NetworkParams([np.zeros_like(a) for a in init_params(critic_sizes(), np.random.default_rng(0)).arrays])
    assert forward_value(zero, np.ones(10)) == 0.0
    net = init_params(critic_sizes(), np.random.default_rng(4))
    x = np.random.default_rng(5).random((100, 10))
    assert np.array_equal(forward_value(net, x), forward_value(net, x))
    assert np.all(np.isfinite(forward_value(net, x)))


def test_actor_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    net = random_net((10, 4, 4, 3), rng)
    obs, masks, actions = random_batch(rng)
    old = np.log(forward_policy(net, obs, masks)[np.arange(len(actions)), actions]) + rng.normal(0, 0.3, len(actions))
    adv = rng.normal(size=len(actions))
    f = lambda: actor_loss_and_grad(net, obs, masks, actions, old, adv, 0.2, 0.01)[0]
    _, grads, _ = actor_loss_and_grad(net, obs, masks, actions, old, adv, 0.2, 0.01)
    assert max_rel_error(grads, numeric_grad(f, net.arrays)) < 1e-4


def test_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    net = random_net((10, 4, 4, 3), rng)
    obs, masks, actions = random_batch(rng)
    zeros = np.zeros(len(actions))
    f = lambda: actor_loss_and_grad(net, obs, masks, actions, zeros, zeros, 0.2, 1.0)[0]
    _, grads, _ = actor_loss_and_grad(net, obs, masks, actions, zeros, zeros, 0.2, 1.0)
    assert max_rel_error(grads, numeric_grad(f, net.arrays)) < 1e-4


def test_critic_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    net = random_net((10, 4, 4, 1), rng)
    obs = rng.random((12, 10))
    ret = rng.normal(size=12)
    f = lambda: critic_loss_and_grad(net, obs, ret, 0.5)[0]
    _, grads = critic_loss_and_grad(net, obs, ret, 0.5)
    assert max_rel_error(grads, numeric_grad(f, net.arrays)) < 1e-4


def test_adam_zero_gradient_is_fixed_point():
    net = random_net((10, 4, 4, 3), np.random.default_rng(0))
    before = net.copy()
    st_ = AdamState()
    backward_update(net, st_, [np.zeros_like(a) for a in net.arrays])
    assert st_.step == 1
    assert all(np.array_equal(a, b) for a, b in zip(net.arrays, before.arrays))


def test_adam_deterministic():
    rng = np.random.default_rng(1)
    net = random_net((10, 4, 4, 3), rng)
    grads = [rng.normal(size=a.shape) for a in net.arrays]
    a, b = net.copy(), net.copy()
    sa, sb = AdamState(), AdamState()
    for _ in range(3):
        backward_update(a, sa, grads)
        backward_update(b, sb, grads)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays, b.arrays))


def test_adam_rejects_nonfinite():
    net = random_net((10, 4, 4, 3), np.random.default_rng(0))
    grads = [np.zeros_like(a) for a in net.arrays]
    grads[2][0, 0] = np.nan
    with pytest.raises(TrainingError):
        backward_update(net, AdamState(), grads)


def test_adam_state_roundtrip():
    rng = np.random.default_rng(2)
    net = random_net((10, 4, 4, 3), rng)
    st_ = AdamState()
    backward_update(net, st_, [rng.normal(size=a.shape) for a in net.arrays])
    again = AdamState.from_dict(st_.to_dict())
    assert again.step == 1 and all(np.array_equal(x, y) for x, y in zip(st_.m, again.m))


def test_soft_blend_examples():
    p = NetworkParams([np.array([2.0])])
    q = NetworkParams([np.array([4.0])])
    assert soft_blend(p, q, 0.5).arrays[0][0] == 3.0
    assert soft_blend(p, q, 0.0).arrays[0][0] == 2.0
    assert soft_blend(p, q, 1.0).arrays[0][0] == 4.0
    with pytest.raises(ContractError):
        soft_blend(p, NetworkParams([np.zeros(2)]), 0.5)


@given(st.floats(0, 1), st.integers(0, 1000))
def test_soft_blend_affine(tau, seed):
    rng = np.random.default_rng(seed)
    a = random_net((3, 2, 1), rng)
    b = random_net((3, 2, 1), rng)
    ab, ba = soft_blend(a, b, tau), soft_blend(b, a, tau)
    for x, y, u, v in zip(ab.arrays, ba.arrays, a.arrays, b.arrays):
        assert np.allclose(x + y, u + v, atol=1e-12)


def test_nested_roundtrip():
    net = init_params(actor_sizes(), np.random.default_rng(0))
    back = NetworkParams.from_nested(net.to_nested())
    assert all(np.array_equal(x, y) for x, y in zip(net.arrays, back.arrays))
