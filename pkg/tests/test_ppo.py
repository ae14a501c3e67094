import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dbook.approximator import AdamState, actor_sizes, clipped_objective, critic_sizes, forward_policy, init_params
from dbook.domain import ActionMask, WeightVector
from dbook.ppo import PpoConfig, Trajectory, collect_rollout, compute_gae, normalize, ppo_update
from dbook.simenv import SchedulingEnv, SimConfig
from oracles import gae_expansion


def test_gae_worked_example():
    adv, ret = compute_gae([1.0, 0.0], [0.5, 0.25], [False, True], 0.99, 0.95)
    # delta_1 = 0 - 0.25; delta_0 = 1 + 0.99*0.25 - 0.5; A_0 = delta_0 + 0.99*0.95*delta_1
    assert adv == pytest.approx([0.512375, -0.25], abs=1e-12)
    assert ret == pytest.approx(adv + np.array([0.5, 0.25]))


def test_gae_lambda_zero_is_td_error():
    r = np.array([0.3, 1.0, -0.2, 0.5])
    v = np.array([0.1, 0.4, 0.2, 0.9])
    d = np.array([False, False, True, True])
    adv, _ = compute_gae(r, v, d, 0.9, 0.0)
    nxt = np.array([0.4, 0.2, 0.0, 0.0])
    assert np.allclose(adv, r + 0.9 * nxt - v, atol=1e-15)


def test_gae_all_zero():
    adv, ret = compute_gae(np.zeros(5), np.zeros(5), np.zeros(5, bool))
    assert np.all(adv == 0) and np.all(ret == 0)


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_gae_matches_expansion(n, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=n), rng.normal(size=n)
    d = rng.random(n) < 0.3
    g, lam = rng.uniform(0.5, 1), rng.uniform(0, 1)
    adv, _ = compute_gae(r, v, d, g, lam)
    assert np.allclose(adv, gae_expansion(r, v, d, g, lam), atol=1e-12, rtol=0)


def test_normalize():
    a = normalize(np.array([1.0, 2.0, 3.0, 4.0]))
    assert abs(a.mean()) < 1e-12 and abs(a.std() - 1) < 1e-6


def test_clipped_objective_examples():
    assert clipped_objective(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_objective(0.5, -1.0, 0.2) == pytest.approx(-0.8)


@given(st.floats(0, 5), st.floats(-10, 10), st.floats(0.01, 0.5))
def test_clipped_objective_lower_bound(r, a, eps):
    assert clipped_objective(r, a, eps) <= r * a + 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(discount=0).validate()
    with pytest.raises(ValueError):
        PpoConfig(clip_eps=0).validate()
    with pytest.raises(ValueError):
        PpoConfig(gae_lambda=1.5).validate()


def _nets(seed, hidden=(128, 128)):
    rng = np.random.default_rng(seed)
    return init_params(actor_sizes(10, hidden), rng), init_params(critic_sizes(10, hidden), rng)


def test_rollout_masks_and_determinism():
    actor, critic = _nets(0)
    env = SchedulingEnv(SimConfig(arrival_rate=20))
    w = WeightVector(0.5, 0.25, 0.25)
    a = collect_rollout(actor, env, w, [1, 2], np.random.default_rng(0), critic)
    b = collect_rollout(actor, env, w, [1, 2], np.random.default_rng(0), critic)
    assert np.array_equal(a.actions, b.actions) and np.array_equal(a.obs, b.obs)
    assert np.all(a.masks[np.arange(len(a)), a.actions])
    assert a.dones.sum() == 2
    assert np.allclose(a.rewards, a.components @ w.as_array(), atol=1e-12)


def test_rollout_size_at_default_rate():
    actor, _ = _nets(0)
    traj = collect_rollout(actor, SchedulingEnv(), WeightVector(1, 0, 0), range(5), np.random.default_rng(0))
    # Poisson(100) requests per day over 14 days, five episodes
    assert 6700 <= len(traj) <= 7300


def test_first_update_ratio_is_one():
    actor, critic = _nets(1)
    env = SchedulingEnv(SimConfig(arrival_rate=10, horizon_days=5))
    traj = collect_rollout(actor, env, WeightVector(1, 0, 0), [0], np.random.default_rng(0), critic)
    stats = ppo_update(actor, critic, AdamState(), AdamState(), traj, PpoConfig(), np.random.default_rng(0))
    assert stats["first_ratio_mean"] == pytest.approx(1.0, abs=1e-12)
    assert stats["first_clip_fraction"] == 0.0


class TwoStateBandit:
    """One-decision episodes in state A or B; action 0 pays in A, action 1 pays in B."""

    steps = 1

    def reset(self, seed):
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        return self._obs(), ActionMask(True, True, False)

    def _obs(self):
        self.state = int(self.rng.integers(2))
        o = np.full(10, 0.5)
        o[6] = float(self.state)
        return o

    def step(self, a):
        r = 1.0 if a == self.state else 0.0
        self.t += 1
        self.done = self.t >= self.steps
        return self._obs(), ActionMask(True, True, False), (r, 0.0, 0.0), self.done, {}


def test_ppo_learns_two_state_bandit():
    actor, critic = _nets(3, hidden=(32, 32))
    cfg = PpoConfig(minibatch_size=64)
    a_opt, c_opt = AdamState(), AdamState()
    env = TwoStateBandit()
    rng = np.random.default_rng(0)
    for it in range(200):
        traj = collect_rollout(actor, env, WeightVector(1, 0, 0), range(64 * it, 64 * it + 64), rng, critic)
        ppo_update(actor, critic, a_opt, c_opt, traj, cfg, rng)
    mask = np.array([[True, True, False]] * 2)
    obs = np.full((2, 10), 0.5)
    obs[:, 6] = [0.0, 1.0]
    p = forward_policy(actor, obs, mask)
    assert p[0, 0] > 0.95 and p[1, 1] > 0.95


def test_empty_trajectory_rejected():
    actor, critic = _nets(0, hidden=(4, 4))
    empty = Trajectory(np.zeros((0, 10)), np.zeros((0, 3), bool), np.zeros(0, int), np.zeros(0), np.zeros(0),
                       np.zeros((0, 3)), np.zeros(0, bool))
    with pytest.raises(Exception):
        ppo_update(actor, critic, AdamState(), AdamState(), empty, PpoConfig(), np.random.default_rng(0))
