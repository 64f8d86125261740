# scripts/run_config.py
"""
Run configuration: presets, YAML config files, TBQN_* environment variables
and --set dotted overrides, resolved into one validated RunConfig.

Precedence (lowest first): defaults, preset (+ its env_overrides for the
chosen env), --config file (+ env_overrides), TBQN_* variables, --set,
explicit flags (--env, --steps, --seed, --out).

Usage:
    from run_config import resolve_config

    config = resolve_config(preset="final-table3", overrides=["agent.lr=1e-4"], env="cartpole")
    config.save("runs/demo/resolved_config.yaml")
"""

import copy
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

import yaml

from dqn_agent import AgentConfig, whole_number
from envs import get_env_spec, resolve_env_name
from tbqn_errors import ConfigError
from transformer_qnet import QNetworkSpec

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parent.parent
PRESET_DIR = PROJECT_ROOT / "presets"
PRESET_ALIASES = {"baseline-fig4": "baseline", "final-table3": "final"}
ENV_VAR_PREFIX = "TBQN_"
RESOLVED_CONFIG_NAME = "resolved_config.yaml"


@dataclass
class RunConfig:
    env: str = "cartpole"
    net: QNetworkSpec = field(default_factory=QNetworkSpec)
    agent: AgentConfig = field(default_factory=AgentConfig)
    total_steps: int = 150000
    eval_every: int = 1000
    eval_episodes: int = 10
    output_dir: str = "runs"
    preset: Optional[str] = None

    def validate(self) -> "RunConfig":
        resolve_env_name(self.env)
        self.net_spec().validate()
        self.agent.validate()
        for name in ("total_steps", "eval_every", "eval_episodes"):
            setattr(self, name, whole_number(name, getattr(self, name)))
        if self.total_steps < 0:
            raise ConfigError("total_steps", f"must be >= 0, got {self.total_steps}")
        if self.eval_every < 1:
            raise ConfigError("eval_every", f"must be >= 1, got {self.eval_every}")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes", f"must be >= 1, got {self.eval_episodes}")
        return self

    def net_spec(self) -> QNetworkSpec:
        """Network spec with state/action sizes taken from the environment."""
        env_spec = get_env_spec(self.env)
        return replace(self.net, state_dim=env_spec.state_dim, num_actions=env_spec.num_actions)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "env": self.env,
            "preset": self.preset,
            "total_steps": self.total_steps,
            "eval_every": self.eval_every,
            "eval_episodes": self.eval_episodes,
            "output_dir": self.output_dir,
            "net": self.net.to_dict(),
            "agent": self.agent.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        data = dict(data)
        known = set(cls().to_dict())
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config field")
        try:
            net = QNetworkSpec.from_dict(dict(data.pop("net", {}) or {}))
            agent = AgentConfig.from_dict(dict(data.pop("agent", {}) or {}))
            return cls(net=net, agent=agent, **data)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)
        return path


# =============================================================================
# Layer loading
# =============================================================================


def canonical_preset(name: str) -> str:
    return PRESET_ALIASES.get(name, name)


def available_presets(preset_dir: Path = PRESET_DIR) -> List[str]:
    names = sorted(p.stem for p in preset_dir.glob("*.yaml"))
    return names + sorted(PRESET_ALIASES)


def load_yaml(path: Union[str, Path], field_name: str = "config") -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(field_name, f"file '{path}' does not exist")
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(field_name, f"'{path}' is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(field_name, f"'{path}' must contain a mapping at the top level")
    return _coerce_floats(data)


def load_preset(name: str, preset_dir: Path = PRESET_DIR) -> Dict[str, Any]:
    canonical = canonical_preset(name)
    path = preset_dir / f"{canonical}.yaml"
    if not path.exists():
        raise ConfigError("preset", f"unknown preset '{name}' (choose from {available_presets(preset_dir)})")
    data = load_yaml(path, "preset")
    data["preset"] = name
    return data


def parse_override(text: str) -> Dict[str, Any]:
    """'agent.lr=1e-4' -> {'agent': {'lr': 0.0001}}; values parsed as YAML scalars."""
    if "=" not in text:
        raise ConfigError("--set", f"expected key=value, got '{text}'")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError("--set", f"empty key in '{text}'")
    return _nest(key.split("."), _parse_scalar(raw.strip()))


def env_var_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """TBQN_AGENT__LR=1e-4 -> {'agent': {'lr': 0.0001}}."""
    environ = os.environ if environ is None else environ
    layer: Dict[str, Any] = {}
    for name in sorted(environ):
        if not name.startswith(ENV_VAR_PREFIX):
            continue
        path = [part.lower() for part in name[len(ENV_VAR_PREFIX):].split("__") if part]
        if path:
            deep_merge(layer, _nest(path, _parse_scalar(environ[name])))
    return layer


def _coerce_floats(value: Any) -> Any:
    """YAML 1.1 reads '1e-4' as a string; turn such strings into floats."""
    if isinstance(value, dict):
        return {k: _coerce_floats(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_coerce_floats(v) for v in value]
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _parse_scalar(raw: str) -> Any:
    try:
        return _coerce_floats(yaml.safe_load(raw)) if raw != "" else None
    except yaml.YAMLError:
        return raw


def _nest(path: List[str], value: Any) -> Dict[str, Any]:
    node: Any = value
    for part in reversed(path):
        node = {part: node}
    return node


def deep_merge(base: Dict[str, Any], layer: Mapping[str, Any]) -> Dict[str, Any]:
    """Merge `layer` into `base` in place; nested mappings merge, anything else replaces."""
    for key, value in layer.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            deep_merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def _check_keys(layer: Mapping[str, Any], reference: Mapping[str, Any], prefix: str = ""):
    for key, value in layer.items():
        dotted = f"{prefix}{key}"
        if key not in reference:
            raise ConfigError(dotted, "unknown config field")
        if isinstance(value, Mapping) and isinstance(reference[key], dict):
            _check_keys(value, reference[key], dotted + ".")


def apply_dotted(config: RunConfig, values: Mapping[str, Any]) -> RunConfig:
    """Return a copy of `config` with dotted fields replaced, validated once at the end."""
    data = config.to_dict()
    for key, value in values.items():
        layer = _nest(key.split("."), value)
        _check_keys(layer, data)
        deep_merge(data, layer)
    return RunConfig.from_dict(data).validate()


def set_dotted(config: RunConfig, key: str, value: Any) -> RunConfig:
    return apply_dotted(config, {key: value})


# =============================================================================
# Resolution
# =============================================================================


def resolve_config(
    preset: Optional[str] = None,
    config_path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    environ: Optional[Mapping[str, str]] = None,
    env: Optional[str] = None,
    steps: Optional[int] = None,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    preset_dir: Path = PRESET_DIR,
) -> RunConfig:
    defaults = RunConfig().to_dict()

    layers: List[Dict[str, Any]] = []
    if preset:
        layers.append(load_preset(preset, preset_dir))
    if config_path:
        layers.append(load_yaml(config_path, "config"))
    layers.append(env_var_overrides(environ))
    for text in overrides:
        layers.append(parse_override(text))
    flags: Dict[str, Any] = {}
    if env is not None:
        flags["env"] = env
    if steps is not None:
        flags["total_steps"] = steps
    if seed is not None:
        flags["agent"] = {"seed": seed}
    if out is not None:
        flags["output_dir"] = out
    layers.append(flags)

    # The env decides which env_overrides apply, so find it first.
    env_name = defaults["env"]
    for layer in layers:
        env_name = layer.get("env", env_name)
    env_key = resolve_env_name(env_name)

    data = copy.deepcopy(defaults)
    for layer in layers:
        layer = dict(layer)
        per_env = layer.pop("env_overrides", None) or {}
        _check_keys(layer, defaults)
        deep_merge(data, layer)
        matched = {resolve_env_name(name): values for name, values in per_env.items()}
        if env_key in matched:
            _check_keys(matched[env_key], defaults, "env_overrides.")
            deep_merge(data, matched[env_key])

    data["env"] = env_key
    config = RunConfig.from_dict(data).validate()
    logger.debug(f"Resolved config: {config.to_dict()}")
    return config
