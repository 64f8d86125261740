# scripts/train_experiment.py
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

import numpy as np

from dqn_agent import MetricsLog, evaluate_policy, run_training
from envs import get_env_spec, resolve_env_name, rollout_trajectory
from experiment_base import ExperimentBase
from run_config import RunConfig, resolve_config
from tbqn_errors import EXIT_DIVERGED, EXIT_OK, ConfigError
from tensor_core import RngState
from transformer_qnet import QNetwork


class TrainExperiment(ExperimentBase):
    """Train one TBQN: metrics.csv, final/best checkpoints, resolved config, summary."""

    def __init__(self, config: RunConfig, progress: bool = True):
        super().__init__(output_path=config.output_dir, progress=progress)
        self.config = config.validate()
        self.log: Optional[MetricsLog] = None

    def run(self) -> int:
        cfg = self.config
        run_dir = self.run_dir()
        self.logger.info(
            f"Starting training: {cfg.env}, preset {cfg.preset or 'none'}, "
            f"{cfg.total_steps} steps, seed {cfg.agent.seed}"
        )
        self.save_config(cfg, run_dir)

        log = run_training(
            cfg.env,
            cfg.agent,
            cfg.net_spec(),
            total_steps=cfg.total_steps,
            eval_every=cfg.eval_every,
            eval_episodes=cfg.eval_episodes,
            progress=self.progress,
        )
        self.log = log

        frame = log.to_frame()
        validation_info = self.validate_metrics(frame, log)
        self.save_frame(frame, run_dir, "metrics.csv", validation_info)
        self.save_checkpoints(log, run_dir)

        status = "diverged" if log.diverged else "completed"
        results = {
            "status": status,
            "steps_trained": log.steps_trained,
            "evaluations": len(log),
            "best_avg_return": f"{log.best_return:.2f}" if log.best_step else "n/a",
            "best_step": log.best_step if log.best_step else "n/a",
            "training_episodes": len(log.training_returns),
            "training_score_last_10": f"{log.training_score():.2f}",
        }
        if log.diverged:
            results["divergence"] = str(log.divergence)
            results["divergence_env_step"] = log.divergence_env_step
        self.write_summary_report(
            run_dir,
            "TBQN Training Summary Report",
            cfg,
            {"Training results": results},
            ["metrics.csv", "metrics_validation.txt", "checkpoint_final.json/.bin",
             "checkpoint_best.json/.bin", "resolved_config.yaml", "summary_report.txt"],
        )

        if log.diverged:
            self.logger.error(f"❌ Training diverged: {log.divergence}")
            return EXIT_DIVERGED
        self.logger.info(f"✅ Training complete: {run_dir}")
        return EXIT_OK

    def save_checkpoints(self, log: MetricsLog, run_dir: Path):
        cfg = self.config
        if log.agent is not None:
            network = log.agent.online
        else:
            # Untrained weights, drawn exactly as the agent would draw them.
            network = QNetwork(cfg.net_spec(), RngState(cfg.agent.seed).spawn("agent").spawn("online"))
        metadata = {
            "env": cfg.env,
            "seed": cfg.agent.seed,
            "env_normalize": cfg.agent.env_normalize,
            "steps_trained": log.steps_trained,
            "preset": cfg.preset,
        }
        network.save(run_dir / "checkpoint_final", {**metadata, "kind": "final"})

        best = network.clone()
        if log.best_state is not None:
            best.load_state_dict(log.best_state)
        best.save(
            run_dir / "checkpoint_best",
            {**metadata, "kind": "best", "best_step": log.best_step,
             "best_avg_return": log.best_return if log.best_step else None},
        )


class EvalExperiment(ExperimentBase):
    """Greedy evaluation of a saved checkpoint."""

    def __init__(
        self,
        checkpoint: Union[str, Path],
        env: Optional[str] = None,
        episodes: int = 10,
        seed: Optional[int] = None,
        dump_trajectory: Optional[Union[str, Path]] = None,
        output_path: Optional[str] = None,
    ):
        checkpoint = Path(checkpoint)
        super().__init__(output_path=output_path or str(checkpoint.parent), progress=False)
        self.checkpoint = checkpoint
        self.env = env
        self.episodes = episodes
        self.seed = seed
        self.dump_trajectory = dump_trajectory
        self.summary: Dict[str, float] = {}

    def run(self) -> Dict[str, float]:
        if self.episodes < 1:
            raise ConfigError("episodes", f"must be >= 1, got {self.episodes}")
        network, metadata = QNetwork.load(self.checkpoint)
        env = resolve_env_name(self.env or metadata.get("env", "cartpole"))
        seed = int(self.seed if self.seed is not None else metadata.get("seed", 0))
        env_normalize = bool(metadata.get("env_normalize", False))

        env_spec = get_env_spec(env)
        if (network.spec.state_dim, network.spec.num_actions) != (env_spec.state_dim, env_spec.num_actions):
            raise ConfigError(
                "env",
                f"checkpoint expects state_dim={network.spec.state_dim}, num_actions={network.spec.num_actions} "
                f"but '{env}' has state_dim={env_spec.state_dim}, num_actions={env_spec.num_actions}",
            )

        episode_actions = []
        returns = np.asarray(
            evaluate_policy(network, env, self.episodes, seed, env_normalize, episode_actions=episode_actions)
        )
        self.summary = {
            "episodes": int(len(returns)),
            "mean": float(returns.mean()),
            "std": float(returns.std()),
            "min": float(returns.min()),
            "max": float(returns.max()),
        }
        self.logger.info(
            f"Evaluated {self.checkpoint.name} on {env}: mean {self.summary['mean']:.2f} "
            f"± {self.summary['std']:.2f} over {self.episodes} episodes"
        )

        if self.dump_trajectory:
            first_reset = RngState(seed).spawn("eval").spawn(0)
            rollout_trajectory(env, episode_actions[0], first_reset, self.dump_trajectory)
        return self.summary


def cmd_train(
    config_path: Optional[str] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    preset: Optional[str] = None,
    env: Optional[str] = None,
    steps: Optional[int] = None,
    out: Optional[str] = None,
    progress: bool = True,
) -> int:
    config = resolve_config(
        preset=preset, config_path=config_path, overrides=overrides, env=env, steps=steps, seed=seed, out=out
    )
    return TrainExperiment(config, progress=progress).run()


def cmd_eval(
    checkpoint: Union[str, Path],
    env: Optional[str] = None,
    episodes: int = 10,
    seed: Optional[int] = None,
    dump_trajectory: Optional[Union[str, Path]] = None,
) -> Dict[str, float]:
    return EvalExperiment(checkpoint, env, episodes, seed, dump_trajectory).run()
