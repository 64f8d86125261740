# scripts/envs.py
"""
Native classic-control environments (CartPole-v1, MountainCar-v0, Acrobot-v1
dynamics), observation normalization and the history window fed to the TBQN.

Usage:
    from envs import make_env, HistoryBuffer
    from tensor_core import RngState

    env = make_env("cartpole")
    obs = env.reset(RngState(0))
    history = HistoryBuffer(5, env.spec.state_dim).reset(obs)
    obs, reward, terminal, truncated = env.step(1)
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from tbqn_errors import ConfigError, ContractError
from tensor_core import RngState

logger = logging.getLogger(__name__)

StepResult = Tuple[np.ndarray, float, bool, bool]


@dataclass(frozen=True)
class EnvSpec:
    """Static description of an environment."""

    name: str
    state_dim: int
    num_actions: int
    max_episode_steps: int
    reward_structure: str
    observation_bounds: Tuple[Tuple[float, float], ...]
    solved_return: Optional[float] = None


# Reference dynamics constants, frozen here and pinned by tests.
CARTPOLE_CONSTANTS = {
    "gravity": 9.8,
    "masscart": 1.0,
    "masspole": 0.1,
    "length": 0.5,  # half the pole length
    "force_mag": 10.0,
    "tau": 0.02,
    "theta_threshold_radians": 12 * 2 * math.pi / 360,
    "x_threshold": 2.4,
    "reset_bound": 0.05,
}

MOUNTAINCAR_CONSTANTS = {
    "min_position": -1.2,
    "max_position": 0.6,
    "max_speed": 0.07,
    "goal_position": 0.5,
    "goal_velocity": 0.0,
    "force": 0.001,
    "gravity": 0.0025,
    "reset_low": -0.6,
    "reset_high": -0.4,
}

ACROBOT_CONSTANTS = {
    "dt": 0.2,
    "link_length_1": 1.0,
    "link_mass_1": 1.0,
    "link_mass_2": 1.0,
    "link_com_pos_1": 0.5,
    "link_com_pos_2": 0.5,
    "link_moi": 1.0,
    "max_vel_1": 4 * math.pi,
    "max_vel_2": 9 * math.pi,
    "gravity": 9.8,
    "available_torque": (-1.0, 0.0, 1.0),
    "reset_bound": 0.1,
}

ENV_SPECS: Dict[str, EnvSpec] = {
    "cartpole": EnvSpec(
        name="cartpole",
        state_dim=4,
        num_actions=2,
        max_episode_steps=500,
        reward_structure="+1 per step including the failing step",
        # velocity-like dims use clipping bounds
        observation_bounds=((-4.8, 4.8), (-3.0, 3.0), (-0.418, 0.418), (-3.5, 3.5)),
        solved_return=475.0,
    ),
    "mountaincar": EnvSpec(
        name="mountaincar",
        state_dim=2,
        num_actions=3,
        max_episode_steps=200,
        reward_structure="-1 per step until the goal",
        observation_bounds=((-1.2, 0.6), (-0.07, 0.07)),
        solved_return=-110.0,
    ),
    "acrobot": EnvSpec(
        name="acrobot",
        state_dim=6,
        num_actions=3,
        max_episode_steps=500,
        reward_structure="-1 per step, 0 on the step reaching the goal height",
        observation_bounds=(
            (-1.0, 1.0),
            (-1.0, 1.0),
            (-1.0, 1.0),
            (-1.0, 1.0),
            (-4 * math.pi, 4 * math.pi),
            (-9 * math.pi, 9 * math.pi),
        ),
        solved_return=-100.0,
    ),
}

ENV_ALIASES = {
    "cartpole-v1": "cartpole",
    "mountaincar-v0": "mountaincar",
    "acrobot-v1": "acrobot",
}


def resolve_env_name(name: str) -> str:
    key = str(name).strip().lower()
    key = ENV_ALIASES.get(key, key)
    if key not in ENV_SPECS:
        raise ConfigError("env", f"unknown environment '{name}' (choose from {sorted(ENV_SPECS)})")
    return key


class ClassicControlEnv(ABC):
    """Base class: episode step counting, truncation and action checks."""

    spec: EnvSpec

    def __init__(self):
        self.state: Optional[np.ndarray] = None
        self.elapsed_steps = 0

    def reset(self, rng: RngState) -> np.ndarray:
        """Draw an initial state from the reference distribution."""
        self.elapsed_steps = 0
        self.state = self._initial_state(rng)
        return self._observation()

    def step(self, action: int) -> StepResult:
        """Advance one step; returns (observation, reward, terminal, truncated)."""
        if self.state is None:
            raise ContractError(f"{self.spec.name}: step() called before reset()")
        if not 0 <= int(action) < self.spec.num_actions:
            raise ContractError(
                f"{self.spec.name}: action {action} out of range [0, {self.spec.num_actions})"
            )
        reward, terminal = self._advance(int(action))
        self.elapsed_steps += 1
        truncated = (not terminal) and self.elapsed_steps >= self.spec.max_episode_steps
        return self._observation(), reward, terminal, truncated

    @abstractmethod
    def _initial_state(self, rng: RngState) -> np.ndarray:
        ...

    @abstractmethod
    def _advance(self, action: int) -> Tuple[float, bool]:
        ...

    def _observation(self) -> np.ndarray:
        return np.array(self.state, dtype=np.float32)


class CartPoleEnv(ClassicControlEnv):
    """Cart-pole balancing, explicit Euler integration."""

    spec = ENV_SPECS["cartpole"]

    def __init__(self):
        super().__init__()
        c = CARTPOLE_CONSTANTS
        self.total_mass = c["masspole"] + c["masscart"]
        self.polemass_length = c["masspole"] * c["length"]

    def _initial_state(self, rng: RngState) -> np.ndarray:
        bound = CARTPOLE_CONSTANTS["reset_bound"]
        return rng.uniform(-bound, bound, size=(4,))

    def _advance(self, action: int) -> Tuple[float, bool]:
        c = CARTPOLE_CONSTANTS
        x, x_dot, theta, theta_dot = (float(v) for v in self.state)
        force = c["force_mag"] if action == 1 else -c["force_mag"]
        costheta = math.cos(theta)
        sintheta = math.sin(theta)

        temp = (force + self.polemass_length * theta_dot**2 * sintheta) / self.total_mass
        thetaacc = (c["gravity"] * sintheta - costheta * temp) / (
            c["length"] * (4.0 / 3.0 - c["masspole"] * costheta**2 / self.total_mass)
        )
        xacc = temp - self.polemass_length * thetaacc * costheta / self.total_mass

        x = x + c["tau"] * x_dot
        x_dot = x_dot + c["tau"] * xacc
        theta = theta + c["tau"] * theta_dot
        theta_dot = theta_dot + c["tau"] * thetaacc
        self.state = np.array([x, x_dot, theta, theta_dot], dtype=np.float64)

        terminal = bool(
            x < -c["x_threshold"]
            or x > c["x_threshold"]
            or theta < -c["theta_threshold_radians"]
            or theta > c["theta_threshold_radians"]
        )
        return 1.0, terminal


class MountainCarEnv(ClassicControlEnv):
    """Under-powered car in a valley; reach position 0.5."""

    spec = ENV_SPECS["mountaincar"]

    def _initial_state(self, rng: RngState) -> np.ndarray:
        c = MOUNTAINCAR_CONSTANTS
        return np.array([rng.uniform(c["reset_low"], c["reset_high"]), 0.0], dtype=np.float64)

    def _advance(self, action: int) -> Tuple[float, bool]:
        c = MOUNTAINCAR_CONSTANTS
        position, velocity = (float(v) for v in self.state)
        velocity += (action - 1) * c["force"] + math.cos(3 * position) * (-c["gravity"])
        velocity = min(max(velocity, -c["max_speed"]), c["max_speed"])
        position += velocity
        position = min(max(position, c["min_position"]), c["max_position"])
        if position == c["min_position"] and velocity < 0:
            velocity = 0.0
        self.state = np.array([position, velocity], dtype=np.float64)
        terminal = bool(position >= c["goal_position"] and velocity >= c["goal_velocity"])
        return -1.0, terminal


def _wrap(x: float, low: float, high: float) -> float:
    diff = high - low
    while x > high:
        x -= diff
    while x < low:
        x += diff
    return x


class AcrobotEnv(ClassicControlEnv):
    """Two-link underactuated pendulum; book dynamics with one RK4 step per action."""

    spec = ENV_SPECS["acrobot"]

    def _initial_state(self, rng: RngState) -> np.ndarray:
        bound = ACROBOT_CONSTANTS["reset_bound"]
        return rng.uniform(-bound, bound, size=(4,))

    def _dsdt(self, s_augmented: np.ndarray) -> np.ndarray:
        c = ACROBOT_CONSTANTS
        m1, m2 = c["link_mass_1"], c["link_mass_2"]
        l1 = c["link_length_1"]
        lc1, lc2 = c["link_com_pos_1"], c["link_com_pos_2"]
        i1 = i2 = c["link_moi"]
        g = c["gravity"]
        theta1, theta2, dtheta1, dtheta2, torque = s_augmented

        d1 = m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * math.cos(theta2)) + i1 + i2
        d2 = m2 * (lc2**2 + l1 * lc2 * math.cos(theta2)) + i2
        phi2 = m2 * lc2 * g * math.cos(theta1 + theta2 - math.pi / 2.0)
        phi1 = (
            -m2 * l1 * lc2 * dtheta2**2 * math.sin(theta2)
            - 2 * m2 * l1 * lc2 * dtheta2 * dtheta1 * math.sin(theta2)
            + (m1 * lc1 + m2 * l1) * g * math.cos(theta1 - math.pi / 2)
            + phi2
        )
        ddtheta2 = (
            torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1**2 * math.sin(theta2) - phi2
        ) / (m2 * lc2**2 + i2 - d2**2 / d1)
        ddtheta1 = -(d2 * ddtheta2 + phi1) / d1
        return np.array([dtheta1, dtheta2, ddtheta1, ddtheta2, 0.0], dtype=np.float64)

    def _rk4(self, y0: np.ndarray, dt: float) -> np.ndarray:
        half = dt / 2.0
        k1 = self._dsdt(y0)
        k2 = self._dsdt(y0 + half * k1)
        k3 = self._dsdt(y0 + half * k2)
        k4 = self._dsdt(y0 + dt * k3)
        return y0 + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    def _advance(self, action: int) -> Tuple[float, bool]:
        c = ACROBOT_CONSTANTS
        torque = c["available_torque"][action]
        s_augmented = np.append(self.state, torque)
        ns = self._rk4(s_augmented, c["dt"])[:4]
        ns[0] = _wrap(ns[0], -math.pi, math.pi)
        ns[1] = _wrap(ns[1], -math.pi, math.pi)
        ns[2] = min(max(ns[2], -c["max_vel_1"]), c["max_vel_1"])
        ns[3] = min(max(ns[3], -c["max_vel_2"]), c["max_vel_2"])
        self.state = ns
        terminal = bool(-math.cos(ns[0]) - math.cos(ns[1] + ns[0]) > 1.0)
        return (0.0 if terminal else -1.0), terminal

    def _observation(self) -> np.ndarray:
        s = self.state
        return np.array(
            [math.cos(s[0]), math.sin(s[0]), math.cos(s[1]), math.sin(s[1]), s[2], s[3]],
            dtype=np.float32,
        )


ENV_CLASSES = {"cartpole": CartPoleEnv, "mountaincar": MountainCarEnv, "acrobot": AcrobotEnv}


def make_env(name: str) -> ClassicControlEnv:
    return ENV_CLASSES[resolve_env_name(name)]()


def get_env_spec(name: str) -> EnvSpec:
    return ENV_SPECS[resolve_env_name(name)]


# =============================================================================
# Observation processing
# =============================================================================


def normalize(obs: np.ndarray, bounds: Sequence[Tuple[float, float]], enabled: bool) -> np.ndarray:
    """Map each dimension affinely from its bounds onto [-1, 1] (clipped); identity if disabled."""
    if not enabled:
        return obs
    bounds_array = np.asarray(bounds, dtype=np.float64)
    low, high = bounds_array[:, 0], bounds_array[:, 1]
    scaled = 2.0 * (np.asarray(obs, dtype=np.float64) - low) / (high - low) - 1.0
    return np.clip(scaled, -1.0, 1.0).astype(np.float32)


class HistoryBuffer:
    """The last H observations, oldest first, zero-filled at episode start."""

    def __init__(self, history_horizon: int, state_dim: int):
        if history_horizon < 1:
            raise ConfigError("net.history_horizon", f"must be >= 1, got {history_horizon}")
        self.history_horizon = history_horizon
        self.state_dim = state_dim
        self.window = np.zeros((history_horizon, state_dim), dtype=np.float32)

    def reset(self, obs: Optional[np.ndarray] = None) -> "HistoryBuffer":
        """Zero the window; place `obs` (if given) in the last slot."""
        self.window = np.zeros((self.history_horizon, self.state_dim), dtype=np.float32)
        if obs is not None:
            self.push(obs)
        return self

    def push(self, obs: np.ndarray) -> "HistoryBuffer":
        """Drop the oldest observation and append the newest."""
        obs = np.asarray(obs, dtype=np.float32).reshape(-1)
        if obs.shape[0] != self.state_dim:
            raise ContractError(
                f"history: observation width {obs.shape[0]} != state_dim {self.state_dim}"
            )
        self.window = np.concatenate([self.window[1:], obs[None, :]], axis=0)
        return self

    def as_array(self) -> np.ndarray:
        return self.window.copy()

    def __len__(self) -> int:
        return self.history_horizon


def push_history(buf: HistoryBuffer, obs: np.ndarray) -> HistoryBuffer:
    return buf.push(obs)


# =============================================================================
# Trajectory dumps
# =============================================================================


def rollout_trajectory(
    env_name: str,
    actions: Sequence[int],
    seed: Union[int, RngState],
    output_path: Optional[Union[str, Path]] = None,
) -> pd.DataFrame:
    """Replay a fixed action sequence from a seeded reset; optionally write it as CSV.

    Observations are the raw (unnormalized) states seen before each action.
    """
    env = make_env(env_name)
    obs = env.reset(seed if isinstance(seed, RngState) else RngState(seed))
    rows: List[dict] = []
    for t, action in enumerate(actions):
        next_obs, reward, terminal, truncated = env.step(action)
        row = {"t": t, "action": int(action), "reward": reward, "terminal": terminal, "truncated": truncated}
        row.update({f"obs_{i}": float(v) for i, v in enumerate(obs)})
        rows.append(row)
        obs = next_obs
        if terminal or truncated:
            break

    trajectory = pd.DataFrame(rows)
    if output_path is not None:
        trajectory.to_csv(output_path, index=False)
        logger.info(f"Wrote {len(trajectory)}-step {env_name} trajectory to {output_path}")
    return trajectory
