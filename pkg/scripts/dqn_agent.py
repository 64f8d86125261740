# scripts/dqn_agent.py
"""
Deep Q-learning around a TBQN: replay buffer, target network (hard or Polyak),
double Q-learning, epsilon-greedy exploration, Huber/MSE loss and the
interact-store-train loop with a divergence guard.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from envs import HistoryBuffer, get_env_spec, make_env, normalize
from tbqn_errors import ConfigError, ContractError, DivergenceError
from tensor_core import (
    RngState,
    Tensor,
    adam_step,
    backward,
    clip_global_norm,
    gather_last,
    global_grad_norm,
    huber,
    mul,
    reduce_mean,
    sub,
    zero_grad,
)
from transformer_qnet import QNetwork, QNetworkSpec

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["step", "avg_return", "loss", "grad_norm", "epsilon", "lr", "wall_ms"]
LOSS_KINDS = ("huber", "mse")
LR_SCHEDULES = ("constant", "warmup")
HUBER_DELTA = 1.0
Q_DIVERGENCE_LIMIT = 1e6
INTEGER_FIELDS = ("epsilon_decay_steps", "target_update_period", "warmup_steps", "batch_size",
                  "initial_collect_steps", "buffer_capacity", "seed")


def whole_number(name: str, value) -> int:
    """Integral value as int; '1e5' arrives from YAML as 100000.0 and is accepted."""
    if isinstance(value, (bool, np.bool_)):
        raise ConfigError(name, f"must be an integer, got {value!r}")
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)) and math.isfinite(value) and float(value).is_integer():
        return int(value)
    raise ConfigError(name, f"must be an integer, got {value!r}")


@dataclass
class Transition:
    state_history: np.ndarray
    action: int
    reward: float
    next_state_history: np.ndarray
    terminal: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored as preallocated arrays."""

    def __init__(self, capacity: int, history_horizon: int, state_dim: int, dtype=np.float32):
        if capacity < 1:
            raise ConfigError("agent.buffer_capacity", f"must be >= 1, got {capacity}")
        self.capacity = capacity
        window = (capacity, history_horizon, state_dim)
        self.states = np.zeros(window, dtype=dtype)
        self.next_states = np.zeros(window, dtype=dtype)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def push(self, transition: Transition):
        i = self.cursor
        self.states[i] = transition.state_history
        self.next_states[i] = transition.next_state_history
        self.actions[i] = int(transition.action)
        self.rewards[i] = float(transition.reward)
        self.terminals[i] = bool(transition.terminal)
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: RngState) -> Batch:
        """Uniform draw with replacement."""
        if self.size == 0:
            raise ContractError("replay buffer: cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_states=self.next_states[idx],
            terminals=self.terminals[idx],
            indices=idx,
        )

    def ordered_indices(self) -> np.ndarray:
        """Storage slots from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.cursor) % self.capacity

    def __len__(self) -> int:
        return self.size


@dataclass
class AgentConfig:
    """Q-learning hyperparameters; one field per tunable of the method."""

    loss_kind: str = "mse"
    gamma: float = 0.99
    epsilon: float = 0.1
    epsilon_final: Optional[float] = None  # None -> constant epsilon
    epsilon_decay_steps: int = 0
    double_q: bool = False
    target_update_period: int = 100
    tau: float = 1.0
    grad_clip: Optional[float] = None
    lr: float = 1e-5
    lr_schedule: str = "constant"
    warmup_steps: int = 4000
    batch_size: int = 32
    initial_collect_steps: int = 1000
    buffer_capacity: int = 100000
    env_normalize: bool = False
    seed: int = 0

    def validate(self) -> "AgentConfig":
        def fail(name, message):
            raise ConfigError(f"agent.{name}", message)

        for name in INTEGER_FIELDS:
            setattr(self, name, whole_number(f"agent.{name}", getattr(self, name)))
        if self.loss_kind not in LOSS_KINDS:
            fail("loss_kind", f"must be one of {LOSS_KINDS}, got '{self.loss_kind}'")
        if not 0.0 < self.gamma <= 1.0:
            fail("gamma", f"must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.epsilon <= 1.0:
            fail("epsilon", f"must be in [0, 1], got {self.epsilon}")
        if self.epsilon_final is not None:
            if not 0.0 <= self.epsilon_final <= 1.0:
                fail("epsilon_final", f"must be in [0, 1], got {self.epsilon_final}")
            if self.epsilon_decay_steps < 1:
                fail("epsilon_decay_steps", "must be >= 1 when epsilon_final is set")
        if self.target_update_period < 1:
            fail("target_update_period", f"must be >= 1, got {self.target_update_period}")
        if not 0.0 < self.tau <= 1.0:
            fail("tau", f"must be in (0, 1], got {self.tau}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            fail("grad_clip", f"must be > 0 or null, got {self.grad_clip}")
        if self.lr <= 0:
            fail("lr", f"must be > 0, got {self.lr}")
        if self.lr_schedule not in LR_SCHEDULES:
            fail("lr_schedule", f"must be one of {LR_SCHEDULES}, got '{self.lr_schedule}'")
        if self.lr_schedule == "warmup" and self.warmup_steps < 1:
            fail("warmup_steps", f"must be >= 1, got {self.warmup_steps}")
        if self.batch_size < 1:
            fail("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.initial_collect_steps < 0:
            fail("initial_collect_steps", f"must be >= 0, got {self.initial_collect_steps}")
        if self.buffer_capacity < self.batch_size:
            fail("buffer_capacity", f"must be >= batch_size ({self.batch_size}), got {self.buffer_capacity}")
        if self.initial_collect_steps > self.buffer_capacity:
            fail(
                "initial_collect_steps",
                f"must be <= buffer_capacity ({self.buffer_capacity}), got {self.initial_collect_steps}",
            )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"agent.{unknown[0]}", "unknown field")
        return cls(**data)


# =============================================================================
# Policy, targets, loss and schedules
# =============================================================================


def select_action(q_values: Sequence[float], epsilon: float, rng: RngState) -> int:
    """Epsilon-greedy; ties go to the lowest index."""
    q = np.asarray(q_values, dtype=np.float64).reshape(-1)
    if q.size == 0:
        raise ContractError("select_action: q_values is empty")
    if rng.random() < epsilon:
        return int(rng.integers(0, q.size))
    return int(np.argmax(q))


def td_target(batch: Batch, online_net, target_net, gamma: float, double_q: bool) -> np.ndarray:
    """r + gamma * bootstrap on non-terminal rows, r on terminal rows. No graph is built."""
    if len(batch) == 0:
        raise ContractError("td_target: empty batch")
    next_target = np.asarray(target_net.q_values(batch.next_states), dtype=np.float64)
    if double_q:
        next_online = np.asarray(online_net.q_values(batch.next_states), dtype=np.float64)
        best = np.argmax(next_online, axis=-1)
        bootstrap = next_target[np.arange(len(best)), best]
    else:
        bootstrap = next_target.max(axis=-1)
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    return np.where(np.asarray(batch.terminals, dtype=bool), rewards, rewards + gamma * bootstrap)


def loss(q_pred: Union[Tensor, np.ndarray], target: Union[Tensor, np.ndarray], kind: str) -> Tensor:
    """Mean MSE or Huber(delta=1) of q_pred - target; the target never receives gradient."""
    if not isinstance(q_pred, Tensor):
        q_pred = Tensor(np.asarray(q_pred))
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if q_pred.shape != target_data.shape:
        raise ContractError(f"loss: prediction shape {q_pred.shape} != target shape {target_data.shape}")
    error = sub(q_pred, Tensor(target_data.astype(q_pred.dtype)))
    if kind == "mse":
        return reduce_mean(mul(error, error))
    if kind == "huber":
        return reduce_mean(huber(error, HUBER_DELTA))
    raise ConfigError("agent.loss_kind", f"must be one of {LOSS_KINDS}, got '{kind}'")


def lr_at(
    step: int,
    base_lr: float,
    schedule: str,
    warmup_steps: int = 4000,
    model_dim: int = 64,
) -> float:
    """Constant base_lr, or d^-0.5 * min(step^-0.5, step * w^-1.5)."""
    if schedule == "constant":
        return float(base_lr)
    if schedule == "warmup":
        if step < 1:
            raise ContractError(f"lr_at: warmup schedule needs step >= 1, got {step}")
        return model_dim**-0.5 * min(step**-0.5, step * warmup_steps**-1.5)
    raise ConfigError("agent.lr_schedule", f"must be one of {LR_SCHEDULES}, got '{schedule}'")


def epsilon_at(step: int, config: AgentConfig) -> float:
    """Constant epsilon, or linear decay to epsilon_final over epsilon_decay_steps."""
    if config.epsilon_final is None:
        return config.epsilon
    fraction = min(max(step, 0) / config.epsilon_decay_steps, 1.0)
    return config.epsilon + fraction * (config.epsilon_final - config.epsilon)


# =============================================================================
# Agent
# =============================================================================


@dataclass
class StepReport:
    step: int
    loss: float = float("nan")
    grad_norm: float = float("nan")
    epsilon: float = float("nan")
    lr: float = float("nan")
    collecting: bool = False


class DQNAgent:
    """Online TBQN, target TBQN, replay buffer and the per-step update."""

    def __init__(self, config: AgentConfig, net_spec: QNetworkSpec, rng: RngState):
        self.config = config.validate()
        self.net_spec = net_spec.validate()
        self.online = QNetwork(net_spec, rng.spawn("online"))
        self.target = self.online.clone()
        self.buffer = ReplayBuffer(config.buffer_capacity, net_spec.history_horizon, net_spec.state_dim)
        self.replay_rng = rng.spawn("replay")
        self.explore_rng = rng.spawn("explore")
        self.gradient_steps = 0
        self.env_steps = 0

    def epsilon(self) -> float:
        return epsilon_at(self.env_steps, self.config)

    def act(self, history: np.ndarray, greedy: bool = False) -> int:
        q = self.online.q_values(history[None, ...])[0]
        return select_action(q, 0.0 if greedy else self.epsilon(), self.explore_rng)

    def remember(self, transition: Transition):
        self.buffer.push(transition)
        self.env_steps += 1

    def ready(self) -> bool:
        return len(self.buffer) >= max(self.config.batch_size, self.config.initial_collect_steps)

    def train_step(self) -> StepReport:
        """One gradient step on a uniform replay batch, then the periodic target update."""
        cfg = self.config
        epsilon = self.epsilon()
        if not self.ready():
            return StepReport(step=self.gradient_steps, epsilon=epsilon, collecting=True)

        step = self.gradient_steps + 1
        batch = self.buffer.sample(cfg.batch_size, self.replay_rng)
        targets = td_target(batch, self.online, self.target, cfg.gamma, cfg.double_q)

        params = self.online.parameters()
        zero_grad(params)
        q_all = self.online.forward(batch.states, training=True)
        q_max = float(np.max(np.abs(q_all.data)))
        if not np.isfinite(q_max) or q_max > Q_DIVERGENCE_LIMIT:
            raise DivergenceError(step, f"|Q| reached {q_max:.3g}")

        q_pred = gather_last(q_all, batch.actions)
        step_loss = loss(q_pred, targets, cfg.loss_kind)
        loss_value = step_loss.item()
        if not np.isfinite(loss_value):
            raise DivergenceError(step, "non-finite loss", loss=loss_value)

        backward(step_loss)
        if cfg.grad_clip is not None:
            grad_norm = clip_global_norm(params, cfg.grad_clip)
        else:
            grad_norm = global_grad_norm(params)
        lr = lr_at(step, cfg.lr, cfg.lr_schedule, cfg.warmup_steps, self.net_spec.model_dim)
        adam_step(params, lr)
        self.gradient_steps = step

        if step % cfg.target_update_period == 0:
            self.target.soft_update_from(self.online, cfg.tau)

        return StepReport(step=step, loss=loss_value, grad_norm=grad_norm, epsilon=epsilon, lr=lr)


# =============================================================================
# Evaluation and the training loop
# =============================================================================


def evaluate_policy(
    network: QNetwork,
    env_name: str,
    episodes: int,
    seed: int,
    env_normalize: bool = False,
    episode_actions: Optional[List[List[int]]] = None,
) -> List[float]:
    """Greedy returns of `episodes` episodes; the env resets depend only on `seed`.

    When `episode_actions` is a list, each episode's action sequence is appended to it.
    """
    env = make_env(env_name)
    bounds = env.spec.observation_bounds
    eval_rng = RngState(seed).spawn("eval")
    history = HistoryBuffer(network.spec.history_horizon, env.spec.state_dim)
    returns = []
    for episode in range(episodes):
        obs = normalize(env.reset(eval_rng.spawn(episode)), bounds, env_normalize)
        history.reset(obs)
        total, done = 0.0, False
        actions: List[int] = []
        while not done:
            action = int(np.argmax(network.q_values(history.window[None, ...])[0]))
            actions.append(action)
            obs, reward, terminal, truncated = env.step(action)
            history.push(normalize(obs, bounds, env_normalize))
            total += reward
            done = terminal or truncated
        returns.append(total)
        if episode_actions is not None:
            episode_actions.append(actions)
    return returns


class MetricsLog:
    """Evaluation rows plus the run's training-episode returns and divergence status."""

    def __init__(self):
        self.rows: List[dict] = []
        self.training_returns: List[float] = []
        self.current_return = 0.0
        self.diverged = False
        self.divergence: Optional[DivergenceError] = None
        self.divergence_env_step: Optional[int] = None
        self.best_return = float("-inf")
        self.best_step: Optional[int] = None
        self.best_state: Optional[Dict[str, np.ndarray]] = None
        self.steps_trained = 0
        self.agent: Optional[DQNAgent] = None

    def append(self, **row):
        self.rows.append({column: row[column] for column in METRICS_COLUMNS})

    def training_score(self, last_n: int = 10) -> float:
        """Mean return of the last `last_n` finished training episodes."""
        if not self.training_returns:
            return float(self.current_return)
        return float(np.mean(self.training_returns[-last_n:]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRICS_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False)
        return path

    def deterministic_rows(self) -> List[dict]:
        """Rows without wall-clock timing, for run-to-run comparison."""
        return [{k: v for k, v in row.items() if k != "wall_ms"} for row in self.rows]

    def __len__(self) -> int:
        return len(self.rows)


def _nanmean(values: List[float]) -> float:
    finite = [v for v in values if np.isfinite(v)]
    return float(np.mean(finite)) if finite else float("nan")


def run_training(
    env_name: str,
    agent_config: AgentConfig,
    net_spec: QNetworkSpec,
    total_steps: int,
    eval_every: int,
    eval_episodes: int = 10,
    progress: bool = False,
    on_evaluation: Optional[Callable[[int, float, DQNAgent], None]] = None,
) -> MetricsLog:
    """Interact, store, train: one gradient step per env step once warm-up is over.

    Every `eval_every` steps the greedy policy is evaluated over `eval_episodes`
    episodes. A DivergenceError ends the log early and is recorded on it.
    """
    if total_steps < 0:
        raise ConfigError("total_steps", f"must be >= 0, got {total_steps}")
    if eval_every < 1:
        raise ConfigError("eval_every", f"must be >= 1, got {eval_every}")

    env_spec = get_env_spec(env_name)
    net_spec = replace(net_spec, state_dim=env_spec.state_dim, num_actions=env_spec.num_actions)
    agent_config.validate()

    log = MetricsLog()
    if total_steps == 0:
        return log

    root = RngState(agent_config.seed)
    agent = DQNAgent(agent_config, net_spec, root.spawn("agent"))
    log.agent = agent
    env = make_env(env_name)
    env_rng = root.spawn("env")
    bounds = env_spec.observation_bounds
    use_norm = agent_config.env_normalize

    episode = 0
    history = HistoryBuffer(net_spec.history_horizon, net_spec.state_dim)
    history.reset(normalize(env.reset(env_rng.spawn(episode)), bounds, use_norm))
    losses: List[float] = []
    grad_norms: List[float] = []
    started = time.perf_counter()

    logger.info(
        f"Training on {env_name} for {total_steps} steps "
        f"({agent.online.parameter_count():,} parameters, layer type {int(net_spec.layer_kind)})"
    )
    for step in tqdm(range(1, total_steps + 1), desc=f"train {env_name}", disable=not progress):
        state = history.as_array()
        action = agent.act(state)
        obs, reward, terminal, truncated = env.step(action)
        history.push(normalize(obs, bounds, use_norm))
        agent.remember(Transition(state, action, reward, history.as_array(), terminal))
        log.current_return += reward

        if terminal or truncated:
            log.training_returns.append(log.current_return)
            log.current_return = 0.0
            episode += 1
            history.reset(normalize(env.reset(env_rng.spawn(episode)), bounds, use_norm))

        try:
            report = agent.train_step()
        except DivergenceError as exc:
            log.diverged = True
            log.divergence = exc
            log.divergence_env_step = step
            log.steps_trained = step
            logger.warning(f"⚠️ Divergence guard triggered at env step {step}: {exc}")
            break
        log.steps_trained = step
        if not report.collecting:
            losses.append(report.loss)
            grad_norms.append(report.grad_norm)

        if step % eval_every == 0:
            returns = evaluate_policy(agent.online, env_name, eval_episodes, agent_config.seed, use_norm)
            avg_return = float(np.mean(returns))
            log.append(
                step=step,
                avg_return=avg_return,
                loss=_nanmean(losses),
                grad_norm=_nanmean(grad_norms),
                epsilon=agent.epsilon(),
                lr=lr_at(max(agent.gradient_steps, 1), agent_config.lr, agent_config.lr_schedule,
                         agent_config.warmup_steps, net_spec.model_dim),
                wall_ms=(time.perf_counter() - started) * 1000.0,
            )
            losses.clear()
            grad_norms.clear()
            logger.info(f"step {step}: avg return {avg_return:.1f} over {eval_episodes} episodes")
            if avg_return > log.best_return:
                log.best_return = avg_return
                log.best_step = step
                log.best_state = agent.online.state_dict()
            if on_evaluation is not None:
                on_evaluation(step, avg_return, agent)

    if not log.diverged and math.isfinite(log.best_return):
        logger.info(f"✅ Finished {env_name}: best avg return {log.best_return:.1f} at step {log.best_step}")
    return log
