import numpy as np
import pytest

from rlasc.core import RngStream
from rlasc.decoder import CodecModel
from rlasc.rl import (
    AgentConfig,
    AllocationEnv,
    FrozenModelError,
    Policy,
    PolicySpec,
    StaleTrajectoryError,
    Trajectory,
    discounted_return,
    enumerate_returns,
    exact_J_oracle,
    expected_reinforce_gradient,
    policy_forward,
    reinforce_gradient,
    rollout,
    sample_action,
    train_agent,
    update_policy,
)
from tests.conftest import norm_rel_err


# --- policy --------------------------------------------------------------
def test_zero_output_layer_is_uniform(envs):
    pol = Policy(PolicySpec(envs[0].state_dim))
    np.testing.assert_array_equal(policy_forward(envs[0].state(3), pol), np.full(6, 1 / 6))


def test_policy_output_is_distribution(envs):
    for seed in range(10):
        pol = Policy(PolicySpec(envs[0].state_dim, zero_output=False, seed=seed))
        p = policy_forward(envs[0].state(1 + seed % 8), pol)
        assert np.all(p > 0) and abs(p.sum() - 1) < 1e-12


def test_policy_forward_by_hand():
    pol = Policy(PolicySpec(5, num_actions=3, hidden=(4, 2), zero_output=False, seed=1))
    v = pol.params.values()
    x = np.array([0.3, -1.0, 2.0, 0.0, 0.5])
    h1 = np.maximum(x @ v["W1"] + v["b1"], 0)
    h2 = np.maximum(h1 @ v["W2"] + v["b2"], 0)
    z = h2 @ v["W3"] + v["b3"]
    ref = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(pol.probs(x), ref, rtol=1e-13)


def test_state_vector_layout(envs):
    env = envs[0]
    st = env.state(2)
    n, hw = env.analysis.n, env.analysis.h * env.analysis.w
    assert st.vector.shape == (2 * n + hw + env.M,)
    np.testing.assert_array_equal(st.vector[-env.M:], np.eye(env.M)[1])
    np.testing.assert_array_equal(st.vector[2 * n:2 * n + hw],
                                  (env.analysis.cell_labels == 2).ravel())
    assert st.mask.shape == env.sample.labels.shape and st.step == 2


# --- sampling ------------------------------------------------------------
def test_degenerate_distribution():
    gen = np.random.default_rng(0)
    for _ in range(100):
        act, lp = sample_action([0, 0, 1.0, 0, 0, 0], gen)
        assert act.level == 3 and lp == 0.0


def test_sampling_frequencies_within_3_sigma():
    p = np.array([0.05, 0.1, 0.15, 0.2, 0.2, 0.3])
    gen = RngStream(0, 5).generator()
    N = 100_000
    counts = np.bincount([sample_action(p, gen)[0].index for _ in range(N)], minlength=6)
    sigma = np.sqrt(N * p * (1 - p))
    assert np.all(np.abs(counts - N * p) < 3 * sigma)


def test_sampling_reproducible():
    p = np.full(6, 1 / 6)
    a = [sample_action(p, RngStream(4, 1).generator())[0].level for _ in range(3)]
    gen1, gen2 = RngStream(4, 1).generator(), RngStream(4, 1).generator()
    assert [sample_action(p, gen1)[0].level for _ in range(50)] == \
        [sample_action(p, gen2)[0].level for _ in range(50)]
    assert len(set(a)) == 1


def test_log_prob_returned():
    p = np.array([0.25, 0.75])
    act, lp = sample_action(p, np.random.default_rng(0), levels=(1, 6))
    assert act.level in (1, 6) and lp == pytest.approx(np.log(p[act.index]))


# --- environment ---------------------------------------------------------
def test_level_one_everywhere_has_no_rate_change(envs):
    env = envs[0]
    pol = Policy(PolicySpec(env.state_dim))
    traj = rollout(env, pol, actions=[0] * env.M)
    for s in traj.steps:
        assert s.report.rate == env.init_rate
        assert s.reward == 0.0


def test_rewards_telescope_with_gamma_one(envs):
    for k, env in enumerate(envs):
        pol = Policy(PolicySpec(env.state_dim))
        for ep in range(5):
            traj = rollout(env, pol, RngStream(k, ep).generator(), gamma=1.0)
            total = env.step_loss(traj.init_report) - env.step_loss(traj.final_report)
            assert traj.G == pytest.approx(total, abs=1e-9)


def test_rewards_recomputed_from_reports(envs):
    env = envs[1]
    traj = rollout(env, Policy(PolicySpec(env.state_dim)), RngStream(0, 0).generator())
    reports = [traj.init_report] + [s.report for s in traj.steps]
    for m, s in enumerate(traj.steps):
        assert s.reward == env.step_loss(reports[m]) - env.step_loss(reports[m + 1])


def test_only_current_region_changes(envs):
    env = envs[2]
    levels = list(env.init_levels)
    res = env.step(levels, env.init_image, 3, 5)
    changed = np.any(res.image != env.init_image, axis=0)
    region = env._regions[2]
    assert not changed[~region].any()
    assert levels == [1, 1, 6, 1, 1, 1, 1, 1]


def test_rate_term_is_relative_to_initialisation(envs):
    env = envs[0]
    assert env.step_loss(env.init_report) == pytest.approx(
        env.init_report.semantic + 10 * env.init_report.perceptual)


# --- returns and gradients ----------------------------------------------
def test_discounted_return_examples():
    assert discounted_return([1.0, 2.0, 3.0], 1.0) == 6.0
    assert discounted_return([2.0], 0.5) == 1.0
    r = np.random.default_rng(0).normal(size=8)
    ref = 0.0
    for m in range(1, 9):
        ref += 0.99 ** m * r[m - 1]
    assert discounted_return(r, 0.99) == pytest.approx(ref, rel=1e-14)


def _with_rewards(traj: Trajectory, scale: float) -> Trajectory:
    from dataclasses import replace
    steps = [replace(s, reward=s.reward * scale) for s in traj.steps]
    return replace(traj, steps=steps)


def test_reinforce_linear_in_G(tiny_env):
    pol = Policy(PolicySpec(tiny_env.state_dim, 2, zero_output=False, seed=2))
    traj = rollout(tiny_env, pol, actions=[1, 0])
    g1 = reinforce_gradient(traj, pol)
    g2 = reinforce_gradient(_with_rewards(traj, 2.0), pol)
    g0 = reinforce_gradient(_with_rewards(traj, 0.0), pol)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12)
        assert not g0[k].any()


def test_stale_trajectory_rejected(tiny_env):
    pol = Policy(PolicySpec(tiny_env.state_dim, 2))
    traj = rollout(tiny_env, pol, actions=[1, 1])
    pol.params["b3"].data = pol.params["b3"].data + 0.1
    with pytest.raises(StaleTrajectoryError):
        reinforce_gradient(traj, pol)


def test_update_policy_examples():
    pol = Policy(PolicySpec(3, 2, hidden=(2, 2)))
    before = pol.params.values()
    g = {k: np.ones_like(v) for k, v in before.items()}
    update_policy(pol, g, 0.0)
    update_policy(pol, {k: 0 * v for k, v in g.items()}, 1.0)
    for k, v in pol.params.values().items():
        np.testing.assert_array_equal(v, before[k])
    update_policy(pol, g, 0.25)
    for k, v in pol.params.values().items():
        np.testing.assert_array_equal(v, before[k] + 0.25)
    with pytest.raises(ValueError):
        update_policy(pol, {k: np.ones(1) for k in g}, 1.0)


# --- exact enumeration ---------------------------------------------------
def test_trajectory_probabilities_sum_to_one(tiny_env):
    pol = Policy(PolicySpec(tiny_env.state_dim, 2, zero_output=False, seed=5))
    res = exact_J_oracle(tiny_env, pol)
    assert len(res.probabilities) == 4
    assert sum(res.probabilities.values()) == pytest.approx(1.0, abs=1e-12)


def test_deterministic_policy_J_is_single_G(tiny_env):
    pol = Policy(PolicySpec(tiny_env.state_dim, 2))
    pol.params["b3"].data = np.array([-800.0, 800.0])
    res = exact_J_oracle(tiny_env, pol)
    assert res.J == pytest.approx(rollout(tiny_env, pol, actions=[1, 1]).G, abs=1e-12)


def test_J_matches_monte_carlo(tiny_env):
    pol = Policy(PolicySpec(tiny_env.state_dim, 2, zero_output=False, seed=8))
    res = exact_J_oracle(tiny_env, pol)
    gen = RngStream(1, 2).generator()
    probs = [pol.probs(tiny_env.state(m).vector) for m in (1, 2)]
    N = 100_000
    Gs = np.array([res.returns[tuple(sample_action(p, gen)[0].index for p in probs)]
                   for _ in range(N)])
    assert abs(Gs.mean() - res.J) < 3 * Gs.std() / np.sqrt(N)


def test_sampled_rollouts_agree_with_enumeration(tiny_env):
    pol = Policy(PolicySpec(tiny_env.state_dim, 2, zero_output=False, seed=8))
    returns = enumerate_returns(tiny_env)
    gen = RngStream(2, 2).generator()
    for _ in range(10):
        traj = rollout(tiny_env, pol, gen)
        assert traj.G == returns[tuple(s.action.index for s in traj.steps)]


def test_estimator_unbiased_against_finite_differences(tiny_env):
    pol = Policy(PolicySpec(tiny_env.state_dim, 2, zero_output=False, seed=3))
    returns = enumerate_returns(tiny_env)
    expected = expected_reinforce_gradient(tiny_env, pol)
    fd = {}
    for name, t in pol.params.items():
        out = np.zeros_like(t.data)
        for i in np.ndindex(t.shape):
            old = t.data[i]
            t.data[i] = old + 1e-6
            up = exact_J_oracle(tiny_env, pol, returns=returns).J
            t.data[i] = old - 1e-6
            down = exact_J_oracle(tiny_env, pol, returns=returns).J
            t.data[i] = old
            out[i] = (up - down) / 2e-6
        fd[name] = out
    assert norm_rel_err(expected, fd) < 1e-4


def test_enumeration_limit(envs):
    pol = Policy(PolicySpec(envs[0].state_dim))
    with pytest.raises(ValueError, match="enumeration limit"):
        exact_J_oracle(envs[0], pol)


# --- agent training ------------------------------------------------------
def test_unfrozen_model_rejected(oracle, extractor):
    from rlasc.semantic import generate_dataset
    model = CodecModel(n=4)
    env = AllocationEnv(model, generate_dataset(0, 1)[0], oracle, extractor)
    with pytest.raises(FrozenModelError):
        train_agent([env], AgentConfig(episodes=1))


def test_zero_alpha_leaves_theta(envs):
    pol = Policy(PolicySpec(envs[0].state_dim, zero_output=False))
    before = pol.params.values()
    train_agent(envs, AgentConfig(episodes=6, alpha=0.0), pol)
    for k, v in pol.params.values().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_is_deterministic_and_logged(envs):
    a, log_a = train_agent(envs, AgentConfig(episodes=8, alpha=1e-2, seed=4))
    b, log_b = train_agent(envs, AgentConfig(episodes=8, alpha=1e-2, seed=4))
    assert a.fingerprint() == b.fingerprint()
    assert log_a.rows == log_b.rows
    assert set(log_a.rows[0]) == {"epoch", "episode", "G", "psi", "L_S", "L_P", "L"}
    assert [r["epoch"] for r in log_a.rows] == [0] * 6 + [1] * 2
    assert len(log_a.epoch_means()) == 2


def test_baseline_and_dropout_paths_run(envs):
    pol, log = train_agent(envs, AgentConfig(episodes=4, alpha=1e-2, baseline=True,
                                             dropout=0.2))
    assert pol.spec.dropout == 0.2 and len(log.rows) == 4
