import numpy as np
import pytest

import dqn_agent
from dqn_agent import (
    AgentConfig,
    Batch,
    DQNAgent,
    ReplayBuffer,
    Transition,
    epsilon_at,
    loss,
    lr_at,
    run_training,
    select_action,
    td_target,
)
from tbqn_errors import ConfigError, ContractError, DivergenceError
from tensor_core import RngState


class StubNet:
    """Anything with q_values() can stand in for a network when building targets."""

    def __init__(self, q):
        self.q = np.asarray(q, dtype=np.float64)

    def q_values(self, states):
        return self.q


def make_batch(rewards, terminals):
    n = len(rewards)
    return Batch(
        states=np.zeros((n, 1, 1)),
        actions=np.zeros(n, dtype=np.int64),
        rewards=np.asarray(rewards, dtype=np.float64),
        next_states=np.zeros((n, 1, 1)),
        terminals=np.asarray(terminals, dtype=bool),
        indices=np.arange(n),
    )


def make_transition(reward, horizon=3, dim=4, terminal=False):
    state = np.full((horizon, dim), reward, dtype=np.float32)
    return Transition(state, 0, float(reward), state + 1, terminal)


def small_config(**changes):
    base = dict(batch_size=4, initial_collect_steps=10, buffer_capacity=100, lr=1e-3, seed=7)
    base.update(changes)
    return AgentConfig(**base)


# =============================================================================
# Replay buffer
# =============================================================================


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buffer = ReplayBuffer(3, 3, 4)
        for reward in range(5):
            buffer.push(make_transition(reward))
        assert len(buffer) == 3
        np.testing.assert_array_equal(buffer.rewards[buffer.ordered_indices()], [2.0, 3.0, 4.0])

    def test_ordered_indices_before_wraparound(self):
        buffer = ReplayBuffer(5, 3, 4)
        for reward in range(2):
            buffer.push(make_transition(reward))
        np.testing.assert_array_equal(buffer.ordered_indices(), [0, 1])

    def test_sampling_is_uniform(self):
        buffer = ReplayBuffer(4, 3, 4)
        for reward in range(4):
            buffer.push(make_transition(reward))
        draws = 40000
        batch = buffer.sample(draws, RngState(0))
        counts = np.bincount(batch.indices, minlength=4)
        sigma = np.sqrt(draws * 0.25 * 0.75)
        assert np.all(np.abs(counts - draws / 4) < 4 * sigma)

    def test_sample_returns_matching_rows(self):
        buffer = ReplayBuffer(4, 3, 4)
        for reward in range(4):
            buffer.push(make_transition(reward))
        batch = buffer.sample(8, RngState(1))
        np.testing.assert_array_equal(batch.states[:, 0, 0], batch.rewards)

    def test_empty_buffer_cannot_sample(self):
        with pytest.raises(ContractError):
            ReplayBuffer(4, 3, 4).sample(1, RngState(0))

    def test_capacity_must_be_positive(self):
        with pytest.raises(ConfigError, match="agent.buffer_capacity"):
            ReplayBuffer(0, 3, 4)


# =============================================================================
# Targets, loss, policy and schedules
# =============================================================================


class TestTdTarget:
    def test_bootstraps_from_max(self):
        target = td_target(make_batch([1.0], [False]), None, StubNet([[2.0, 1.0]]), gamma=0.99, double_q=False)
        np.testing.assert_allclose(target, [2.98])

    def test_terminal_rows_use_reward_only(self):
        target = td_target(make_batch([1.0, 1.0], [True, False]), None, StubNet([[5.0, 0.0], [5.0, 0.0]]), 0.5, False)
        np.testing.assert_allclose(target, [1.0, 3.5])

    def test_double_q_uses_online_argmax(self):
        batch = make_batch([0.0], [False])
        online, target_net = StubNet([[1.0, 5.0]]), StubNet([[3.0, 2.0]])
        np.testing.assert_allclose(td_target(batch, online, target_net, 1.0, double_q=True), [2.0])
        np.testing.assert_allclose(td_target(batch, online, target_net, 1.0, double_q=False), [3.0])

    def test_double_q_matches_standard_for_identical_networks(self):
        batch = make_batch([0.5, 1.0], [False, False])
        net = StubNet([[1.0, 5.0], [3.0, 2.0]])
        np.testing.assert_allclose(
            td_target(batch, net, net, 0.9, double_q=True), td_target(batch, net, net, 0.9, double_q=False)
        )

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            td_target(make_batch([], []), None, StubNet(np.zeros((0, 2))), 0.99, False)


class TestLoss:
    def test_mse(self):
        assert loss(np.array([0.5, 3.0]), np.zeros(2), "mse").item() == pytest.approx(4.625)

    def test_huber_switches_to_linear(self):
        assert loss(np.array([0.5, 3.0]), np.zeros(2), "huber").item() == pytest.approx(1.3125)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            loss(np.zeros(2), np.zeros(3), "mse")

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="agent.loss_kind"):
            loss(np.zeros(2), np.zeros(2), "l1")


class TestSelectAction:
    def test_greedy_ties_take_lowest_index(self):
        assert select_action([1.0, 3.0, 3.0], 0.0, RngState(0)) == 1

    @pytest.mark.parametrize("shift", [-100.0, 0.5, 1e4])
    def test_greedy_action_ignores_constant_shift(self, shift):
        q = np.array([0.2, -1.0, 0.7, 0.1])
        assert select_action(q + shift, 0.0, RngState(0)) == select_action(q, 0.0, RngState(0)) == 2

    def test_full_exploration_is_uniform(self):
        rng = RngState(3)
        counts = np.bincount([select_action([0.0, 0.0, 9.0], 1.0, rng) for _ in range(3000)], minlength=3)
        assert np.all(counts > 850)

    def test_empty_q_values(self):
        with pytest.raises(ContractError):
            select_action([], 0.1, RngState(0))


class TestSchedules:
    def test_constant_lr(self):
        assert lr_at(123, 1e-4, "constant") == 1e-4

    def test_warmup_peak_and_slopes(self):
        peak = 64**-0.5 * 4000**-0.5
        assert lr_at(4000, 1e-4, "warmup", 4000, 64) == pytest.approx(peak)
        assert lr_at(2000, 1e-4, "warmup", 4000, 64) == pytest.approx(peak / 2)
        assert lr_at(16000, 1e-4, "warmup", 4000, 64) == pytest.approx(peak / 2)

    def test_warmup_rejects_step_zero(self):
        with pytest.raises(ContractError):
            lr_at(0, 1e-4, "warmup")

    def test_unknown_schedule(self):
        with pytest.raises(ConfigError, match="agent.lr_schedule"):
            lr_at(1, 1e-4, "cosine")

    def test_epsilon_constant_by_default(self):
        assert epsilon_at(10**6, AgentConfig(epsilon=0.2)) == 0.2

    def test_epsilon_linear_decay(self):
        config = AgentConfig(epsilon=1.0, epsilon_final=0.1, epsilon_decay_steps=100)
        assert epsilon_at(50, config) == pytest.approx(0.55)
        assert epsilon_at(500, config) == pytest.approx(0.1)


class TestAgentConfig:
    @pytest.mark.parametrize(
        "changes, field",
        [
            ({"tau": 0.0}, "agent.tau"),
            ({"gamma": 1.5}, "agent.gamma"),
            ({"grad_clip": -1.0}, "agent.grad_clip"),
            ({"buffer_capacity": 8, "batch_size": 32}, "agent.buffer_capacity"),
            ({"epsilon_final": 0.05}, "agent.epsilon_decay_steps"),
            ({"initial_collect_steps": 500, "buffer_capacity": 100, "batch_size": 4}, "agent.initial_collect_steps"),
            ({"batch_size": 2.5}, "agent.batch_size"),
            ({"buffer_capacity": True}, "agent.buffer_capacity"),
            ({"target_update_period": float("nan")}, "agent.target_update_period"),
        ],
    )
    def test_invalid_values_name_the_field(self, changes, field):
        with pytest.raises(ConfigError, match=field):
            AgentConfig(**changes).validate()

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="agent.momentum"):
            AgentConfig.from_dict({"momentum": 0.9})

    def test_integral_floats_become_ints(self):
        config = AgentConfig(buffer_capacity=1e5, batch_size=64.0, initial_collect_steps=1e3).validate()
        assert config.buffer_capacity == 100000
        assert isinstance(config.buffer_capacity, int)
        assert isinstance(config.batch_size, int)
        assert isinstance(config.initial_collect_steps, int)

    def test_collect_steps_may_fill_the_buffer_exactly(self):
        AgentConfig(batch_size=4, initial_collect_steps=100, buffer_capacity=100).validate()


# =============================================================================
# Agent updates
# =============================================================================


class TestDQNAgent:
    def test_collecting_until_ready(self, tiny_spec):
        agent = DQNAgent(small_config(), tiny_spec, RngState(0))
        for reward in range(5):
            agent.remember(make_transition(reward))
        report = agent.train_step()
        assert report.collecting
        assert agent.gradient_steps == 0

    def test_hard_target_update_period(self, tiny_spec):
        agent = DQNAgent(small_config(initial_collect_steps=0, target_update_period=2), tiny_spec, RngState(0))
        for reward in range(8):
            agent.remember(make_transition(reward))

        def same_weights():
            online, target = agent.online.state_dict(), agent.target.state_dict()
            return all(np.array_equal(online[name], target[name]) for name in online)

        agent.train_step()
        assert not same_weights()
        agent.train_step()
        assert same_weights()

    def test_overfits_single_terminal_transition(self, tiny_spec):
        config = small_config(batch_size=1, buffer_capacity=1, initial_collect_steps=0, loss_kind="mse")
        agent = DQNAgent(config, tiny_spec, RngState(0))
        transition = make_transition(1.0, terminal=True)
        agent.remember(transition)
        for _ in range(500):
            report = agent.train_step()
        assert report.loss < 1e-3
        q = agent.online.q_values(transition.state_history[None, ...])[0, transition.action]
        assert q == pytest.approx(1.0, abs=0.05)

    def test_target_network_gets_no_gradient(self, tiny_spec):
        agent = DQNAgent(small_config(initial_collect_steps=0, double_q=True), tiny_spec, RngState(0))
        for reward in range(4):
            agent.remember(make_transition(reward))
        report = agent.train_step()
        assert report.grad_norm > 0
        for param in agent.target.parameters():
            assert param.grad is None or not np.any(param.grad)

    def test_gradient_clipping_reports_unclipped_norm(self, tiny_spec):
        agent = DQNAgent(small_config(initial_collect_steps=0, grad_clip=1e-6), tiny_spec, RngState(0))
        for reward in range(4):
            agent.remember(make_transition(reward * 10.0))
        report = agent.train_step()
        assert report.grad_norm > 1e-6

    def test_divergence_on_exploding_q(self, tiny_spec):
        agent = DQNAgent(small_config(initial_collect_steps=0), tiny_spec, RngState(0))
        for reward in range(4):
            agent.remember(make_transition(reward))
        agent.online.params.head_b.data[:] = 1e7
        with pytest.raises(DivergenceError) as info:
            agent.train_step()
        assert info.value.step == 1

    def test_divergence_on_nan(self, tiny_spec):
        agent = DQNAgent(small_config(initial_collect_steps=0), tiny_spec, RngState(0))
        for reward in range(4):
            agent.remember(make_transition(reward))
        agent.online.params.head_b.data[:] = np.nan
        with pytest.raises(DivergenceError):
            agent.train_step()


# =============================================================================
# Training loop
# =============================================================================


class TestRunTraining:
    def test_zero_steps_gives_empty_log(self, tiny_spec):
        log = run_training("cartpole", small_config(), tiny_spec, total_steps=0, eval_every=10)
        assert len(log) == 0
        assert not log.diverged

    def test_eval_every_must_be_positive(self, tiny_spec):
        with pytest.raises(ConfigError):
            run_training("cartpole", small_config(), tiny_spec, total_steps=10, eval_every=0)

    def test_unreachable_collect_phase_is_rejected(self, tiny_spec):
        config = small_config(initial_collect_steps=500, buffer_capacity=100)
        with pytest.raises(ConfigError, match="agent.initial_collect_steps"):
            run_training("cartpole", config, tiny_spec, total_steps=1500, eval_every=500)

    def test_same_seed_same_rows(self, tiny_spec):
        def run():
            log = run_training("cartpole", small_config(), tiny_spec, total_steps=60, eval_every=30, eval_episodes=2)
            return log.deterministic_rows()

        first = run()
        assert len(first) == 2
        assert [row["step"] for row in first] == [30, 60]
        assert first == run()

    def test_metrics_frame_columns(self, tiny_spec, tmp_path):
        log = run_training("cartpole", small_config(), tiny_spec, total_steps=20, eval_every=10, eval_episodes=1)
        frame = log.to_frame()
        assert list(frame.columns) == dqn_agent.METRICS_COLUMNS
        assert frame["epsilon"].between(0, 1).all()
        assert log.to_csv(tmp_path / "metrics.csv").exists()

    def test_divergence_is_recorded_not_raised(self, tiny_spec, monkeypatch):
        def explode(self):
            raise DivergenceError(self.gradient_steps + 1, "forced")

        monkeypatch.setattr(DQNAgent, "train_step", explode)
        log = run_training("cartpole", small_config(), tiny_spec, total_steps=50, eval_every=10)
        assert log.diverged
        assert log.divergence_env_step == 1
        assert len(log) == 0

    def test_adapts_network_to_environment(self, tiny_spec):
        log = run_training("mountaincar", small_config(), tiny_spec, total_steps=12, eval_every=100)
        assert log.agent.net_spec.state_dim == 2
        assert log.agent.net_spec.num_actions == 3
