#!/usr/bin/env python3
"""
TBQN Config Decoder Utility

Human-readable interpretations of the coded fields in run configs and
output CSVs (layer types, loss kinds, schedules, exit codes), plus the
generator for tbqn_field_guide.txt.

Usage:
    from config_decoder import ConfigDecoder

    decoder = ConfigDecoder()
    print(decoder.decode_layer_kind(3))   # "Type 3 - IMR: pre-norm, ReLU on sub-layer output"
    print(decoder.get_field_info("agent.tau"))
"""

from typing import Any, Dict, Iterable, Optional

from dqn_agent import METRICS_COLUMNS


class ConfigDecoder:
    """Decoder for TBQN configuration codes."""

    def __init__(self):
        # Encoder layer variants
        self.layer_kind_codes = {
            1: "Type 1 - Baseline: post-norm, dropout after each sub-layer",
            2: "Type 2 - Baseline without dropout",
            3: "Type 3 - IMR: pre-norm, ReLU on sub-layer output",
            4: "Type 4 - Pre-norm only, no extra ReLU",
            5: "Type 5 - IMR with sigmoid output gate",
            6: "Type 6 - IMR with GRU-style gate",
        }

        self.loss_codes = {
            "mse": "Mean squared TD error",
            "huber": "Huber TD error (quadratic inside |e| <= 1, linear outside)",
        }

        self.lr_schedule_codes = {
            "constant": "Constant learning rate",
            "warmup": "Transformer warmup: d^-0.5 * min(step^-0.5, step * w^-1.5)",
        }

        self.env_codes = {
            "cartpole": "CartPole-v1 dynamics: 4-dim state, 2 actions, 500-step cap",
            "mountaincar": "MountainCar-v0 dynamics: 2-dim state, 3 actions, 200-step cap",
            "acrobot": "Acrobot-v1 dynamics: 6-dim observation, 3 actions, 500-step cap",
        }

        self.sampler_codes = {
            "random": "Independent uniform / log-uniform / categorical draws",
            "tpe": "Tree-structured Parzen estimator (random for the first 10 trials)",
        }

        self.exit_codes = {
            0: "Success",
            2: "Configuration error",
            3: "Training diverged",
            4: "I/O or checkpoint error",
        }

        self.yes_no_codes = {True: "Yes", False: "No"}

        self.field_descriptions = {
            "env": "Environment name (cartpole, mountaincar, acrobot)",
            "preset": "Preset the run started from",
            "total_steps": "Environment steps; one gradient step per env step after warm-up",
            "eval_every": "Env steps between greedy evaluations",
            "eval_episodes": "Greedy episodes per evaluation",
            "output_dir": "Root directory for run outputs",
            "net.history_horizon": "H: number of past observations fed as the token sequence",
            "net.model_dim": "d: token width",
            "net.num_heads": "Attention heads (must divide model_dim)",
            "net.num_layers": "L: encoder layers",
            "net.ff_dim": "Feed-forward hidden width",
            "net.layer_kind": "Encoder layer variant 1-6",
            "net.dropout_rate": "Dropout rate inside Type 1 layers",
            "net.outer_dropout": "Dropout after the positional encoding",
            "net.depth_scaled_init": "Divide the init bound of layer l by sqrt(l)",
            "net.depth_scaled_last_layer": "Also depth-scale the Q head (depth L+1)",
            "net.gate_bias_init": "Initial gate bias of Type 5/6 layers",
            "agent.loss_kind": "TD loss (mse, huber)",
            "agent.gamma": "Discount factor",
            "agent.epsilon": "Exploration rate (initial rate when decaying)",
            "agent.epsilon_final": "Final exploration rate of the linear decay (null = constant)",
            "agent.epsilon_decay_steps": "Env steps of the linear epsilon decay",
            "agent.double_q": "Select next actions with the online net, value them with the target net",
            "agent.target_update_period": "Gradient steps between target updates",
            "agent.tau": "Target update coefficient (1 = hard copy)",
            "agent.grad_clip": "Global gradient-norm clip (null = no clipping)",
            "agent.lr": "Adam learning rate (constant schedule)",
            "agent.lr_schedule": "constant or warmup",
            "agent.warmup_steps": "Warmup length w of the warmup schedule",
            "agent.batch_size": "Replay batch size",
            "agent.initial_collect_steps": "Transitions collected before the first update",
            "agent.buffer_capacity": "Replay buffer capacity",
            "agent.env_normalize": "Map observations onto [-1, 1] with clipping bounds",
            "agent.seed": "Seed of every random stream in the run",
        }

    def decode_layer_kind(self, code):
        """Decode an encoder layer type."""
        return self.layer_kind_codes.get(int(code), f"Unknown code: {code}")

    def decode_loss(self, code):
        return self.loss_codes.get(code, f"Unknown code: {code}")

    def decode_lr_schedule(self, code):
        return self.lr_schedule_codes.get(code, f"Unknown code: {code}")

    def decode_env(self, code):
        return self.env_codes.get(code, f"Unknown code: {code}")

    def decode_sampler(self, code):
        return self.sampler_codes.get(code, f"Unknown code: {code}")

    def decode_exit_code(self, code):
        return self.exit_codes.get(code, f"Unknown code: {code}")

    def decode_yes_no(self, value):
        return self.yes_no_codes.get(bool(value), f"Unknown value: {value}")

    def get_field_info(self, field_name):
        """Get a description of a dotted config field."""
        return self.field_descriptions.get(field_name, f"No description available for {field_name}")

    def decode_config(self, config_dict: Dict[str, Any], fields_to_decode: Optional[Iterable[str]] = None) -> Dict[str, str]:
        """Flatten a RunConfig dict into dotted keys with human-readable values."""
        flat: Dict[str, Any] = {}
        for key, value in config_dict.items():
            if isinstance(value, dict):
                for sub_key, sub_value in value.items():
                    flat[f"{key}.{sub_key}"] = sub_value
            else:
                flat[key] = value

        decoders = {
            "env": self.decode_env,
            "net.layer_kind": self.decode_layer_kind,
            "agent.loss_kind": self.decode_loss,
            "agent.lr_schedule": self.decode_lr_schedule,
        }
        wanted = set(fields_to_decode) if fields_to_decode is not None else None
        decoded = {}
        for key, value in flat.items():
            if wanted is not None and key not in wanted:
                continue
            if key in decoders:
                decoded[key] = f"{value} ({decoders[key](value)})"
            elif isinstance(value, bool):
                decoded[key] = self.decode_yes_no(value)
            elif value is None:
                decoded[key] = "off"
            else:
                decoded[key] = str(value)
        return decoded

    def generate_field_guide(self, output_file="tbqn_field_guide.txt"):
        """Write the plain-text reference for config fields and output files."""
        with open(output_file, "w") as f:
            f.write("TBQN LAB FIELD GUIDE\n")
            f.write("=" * 50 + "\n\n")

            f.write("🧱 ENCODER LAYER TYPES (net.layer_kind)\n")
            f.write("-" * 45 + "\n")
            for code, description in self.layer_kind_codes.items():
                f.write(f"   {code} = {description}\n")
            f.write("\n")

            f.write("🎮 ENVIRONMENTS (env)\n")
            f.write("-" * 25 + "\n")
            for code, description in self.env_codes.items():
                f.write(f"   {code} = {description}\n")
            f.write("\n")

            f.write("⚙️ CONFIG FIELDS\n")
            f.write("-" * 20 + "\n")
            for field, description in self.field_descriptions.items():
                f.write(f"{field}: {description}\n")
            f.write("\n")

            f.write("📉 LOSSES AND SCHEDULES\n")
            f.write("-" * 28 + "\n")
            for code, description in {**self.loss_codes, **self.lr_schedule_codes}.items():
                f.write(f"   {code} = {description}\n")
            f.write("\n")

            f.write("📊 OUTPUT FILES\n")
            f.write("-" * 20 + "\n")
            f.write(f"metrics.csv: {', '.join(METRICS_COLUMNS)}\n")
            f.write("   one row per evaluation; wall_ms is the only non-deterministic column\n")
            f.write("trials.csv: trial, seed, <parameters>, score_<env>, mean_score, diverged, steps_trained, error\n")
            f.write("importance.csv: parameter, <env> columns, average (each column sums to 1)\n")
            f.write("marginals.csv: env, parameter, value, mean_score, count\n")
            f.write("top_samples.csv: env, rank, trial, score, <parameters>\n")
            f.write("variants.csv: variant, seed, plus the metrics.csv columns\n")
            f.write("comparison.csv: label, seed, best_return, final_return, diverged, divergence_step\n")
            f.write("checkpoint_final.json/.bin, checkpoint_best.json/.bin: manifest + little-endian float32 payload\n")
            f.write("resolved_config.yaml: load with --config to rerun bit-exactly\n\n")

            f.write("🚦 EXIT CODES\n")
            f.write("-" * 15 + "\n")
            for code, description in self.exit_codes.items():
                f.write(f"   {code} = {description}\n")
            f.write("\n")

            f.write("📈 PLOTTING RECIPE\n")
            f.write("-" * 20 + "\n")
            f.write("   import pandas as pd\n")
            f.write("   import matplotlib.pyplot as plt\n")
            f.write("   curves = pd.read_csv('runs/variants/variants.csv')\n")
            f.write("   for variant, group in curves.groupby('variant'):\n")
            f.write("       mean = group.groupby('step')['avg_return'].mean()\n")
            f.write("       plt.plot(mean.index, mean.values, label=variant)\n")
            f.write("   plt.xlabel('step'); plt.ylabel('average return'); plt.legend(); plt.show()\n\n")

            f.write("-" * 50 + "\n")
            f.write("Generated by TBQN Config Decoder Utility\n")


def main():
    """Generate the field guide and show example decoding."""
    print("🔍 TBQN Config Decoder - Generating Field Guide")
    print("=" * 50)

    decoder = ConfigDecoder()
    guide_file = "tbqn_field_guide.txt"
    decoder.generate_field_guide(guide_file)
    print(f"✅ Field guide generated: {guide_file}")

    print("\n📊 Example decoding:")
    print(f"net.layer_kind = 3: {decoder.decode_layer_kind(3)}")
    print(f"agent.loss_kind = huber: {decoder.decode_loss('huber')}")
    print(f"exit code 3: {decoder.decode_exit_code(3)}")


if __name__ == "__main__":
    main()
