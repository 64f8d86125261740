import math
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import ks_2samp

from dqn_agent import AgentConfig
from hpo import (
    ParamSpec,
    TrialRecord,
    apply_sample,
    encode_samples,
    load_search_space,
    mdi_importance,
    records_to_frame,
    run_study,
    sample_random,
    sample_tpe,
    study_two_report,
)
from run_config import RunConfig, resolve_config
from tbqn_errors import ConfigError, ContractError, InsufficientDataError
from tensor_core import RngState
from transformer_qnet import QNetworkSpec

CONTROL_SPACE = Path(__file__).resolve().parent.parent / "search_spaces" / "control_space.yaml"


def tiny_run_config():
    net = QNetworkSpec(history_horizon=3, model_dim=8, num_heads=2, num_layers=1, ff_dim=16, layer_kind=2)
    agent = AgentConfig(batch_size=4, initial_collect_steps=10, buffer_capacity=100, lr=1e-3)
    return RunConfig(net=net, agent=agent)


def synthetic_records(n, score_fn, seed=0, envs=("toy",)):
    """Random samples over (a, b, c) scored by score_fn(sample, rng)."""
    space = [
        ParamSpec("a", "uniform", low=0.0, high=1.0),
        ParamSpec("b", "uniform", low=0.0, high=1.0),
        ParamSpec("c", "categorical", values=("x", "y")),
    ]
    rng = RngState(seed)
    noise = np.random.default_rng(seed)
    records = []
    for i in range(n):
        sample = sample_random(space, rng.spawn(i))
        scores = {env: score_fn(sample, noise) for env in envs}
        records.append(TrialRecord(trial_index=i, sample=sample, scores=scores))
    return records, space


# =============================================================================
# Search spaces and random sampling
# =============================================================================


class TestParamSpec:
    @pytest.mark.parametrize(
        "spec",
        [
            ParamSpec("p", "gaussian", low=0, high=1),
            ParamSpec("p", "categorical", values=(1,)),
            ParamSpec("p", "uniform", low=1.0, high=1.0),
            ParamSpec("p", "log_uniform", low=0.0, high=1.0),
            ParamSpec("p", "int_uniform", low=3, high=2),
            ParamSpec("p", "uniform"),
        ],
    )
    def test_invalid_specs(self, spec):
        with pytest.raises(ConfigError, match="space.p"):
            spec.validate()

    def test_single_value_int_range_is_allowed(self):
        spec = ParamSpec("p", "int_uniform", low=1, high=1).validate()
        assert all(sample_random([spec], RngState(i))["p"] == 1 for i in range(20))


class TestLoadSearchSpace:
    def test_control_space(self):
        space = load_search_space(CONTROL_SPACE)
        assert len(space) == 18
        by_name = {p.name: p for p in space}
        assert by_name["layer_kind"].values == (1, 2, 3, 4, 5, 6)
        assert by_name["lr"].kind == "log_uniform"
        assert by_name["grad_clip"].config_key == "agent.grad_clip"

    def test_every_control_sample_is_a_valid_config(self, empty_environ):
        space = load_search_space(CONTROL_SPACE)
        base = resolve_config(preset="final", environ=empty_environ)
        for i in range(25):
            config = apply_sample(base, sample_random(space, RngState(i)), space)
            assert config.agent.lr > 0

    def test_duplicate_names(self, tmp_path):
        path = tmp_path / "space.yaml"
        path.write_text(
            "parameters:\n"
            "  - {name: a, kind: categorical, values: [1, 2]}\n"
            "  - {name: a, kind: categorical, values: [3, 4]}\n"
        )
        with pytest.raises(ConfigError, match="duplicate"):
            load_search_space(path)

    def test_missing_parameters(self, tmp_path):
        path = tmp_path / "space.yaml"
        path.write_text("params: []\n")
        with pytest.raises(ConfigError, match="space.parameters"):
            load_search_space(path)


class TestSampleRandom:
    def test_categorical_frequencies(self):
        space = [ParamSpec("c", "categorical", values=("a", "b", "c"))]
        rng = RngState(0)
        draws = [sample_random(space, rng)["c"] for _ in range(3000)]
        for value in ("a", "b", "c"):
            assert abs(draws.count(value) - 1000) < 4 * math.sqrt(3000 * (1 / 3) * (2 / 3))

    def test_log_uniform_median(self):
        space = [ParamSpec("lr", "log_uniform", low=1e-5, high=1e-3)]
        rng = RngState(1)
        draws = np.array([sample_random(space, rng)["lr"] for _ in range(2001)])
        assert draws.min() >= 1e-5 and draws.max() <= 1e-3
        assert math.log10(np.median(draws)) == pytest.approx(-4.0, abs=0.1)

    def test_int_range_is_inclusive(self):
        space = [ParamSpec("n", "int_uniform", low=0, high=2)]
        rng = RngState(2)
        assert {sample_random(space, rng)["n"] for _ in range(200)} == {0, 1, 2}

    def test_same_state_same_sample(self):
        space = load_search_space(CONTROL_SPACE)
        assert sample_random(space, RngState(9)) == sample_random(space, RngState(9))


# =============================================================================
# TPE
# =============================================================================


class TestSampleTpe:
    space = [ParamSpec("x", "uniform", low=0.0, high=1.0)]

    def test_startup_matches_random_distribution(self):
        tpe = [sample_tpe(self.space, [], rng=RngState(0).spawn(i))["x"] for i in range(10000)]
        rand = [sample_random(self.space, RngState(1).spawn(i))["x"] for i in range(10000)]
        assert ks_2samp(tpe, rand).pvalue > 0.01

    def test_concentrates_on_good_region(self):
        history = []
        for i in range(100):
            sample = sample_tpe(self.space, history, rng=RngState(0).spawn(i))
            score = 1.0 if 0.4 <= sample["x"] <= 0.6 else 0.0
            score -= abs(sample["x"] - 0.5)
            history.append(TrialRecord(trial_index=i, sample=sample, scores={"toy": score}))
        late = [r.sample["x"] for r in history[50:]]
        inside = sum(0.3 <= x <= 0.7 for x in late)
        assert inside / len(late) >= 0.7

    def test_unscored_trials_do_not_count_towards_startup(self):
        history = [TrialRecord(i, {"x": 0.5}, {"toy": float("nan")}) for i in range(20)]
        assert sample_tpe(self.space, history, rng=RngState(3)) == sample_random(self.space, RngState(3))

    def test_prefers_better_categorical_value(self):
        space = [
            ParamSpec("loss", "categorical", values=("huber", "mse")),
            ParamSpec("x", "uniform", low=0.0, high=1.0),
        ]
        history = []
        for i in range(30):
            sample = sample_random(space, RngState(1).spawn(i))
            score = (1.0 if sample["loss"] == "huber" else 0.0) + 0.01 * sample["x"]
            history.append(TrialRecord(i, sample, {"toy": score}))
        draws = [sample_tpe(space, history, rng=RngState(2).spawn(i))["loss"] for i in range(60)]
        assert draws.count("huber") / len(draws) > 0.7

    def test_handles_mixed_kinds(self):
        space = load_search_space(CONTROL_SPACE)
        history = []
        for i in range(12):
            sample = sample_random(space, RngState(i))
            history.append(TrialRecord(i, sample, {"toy": float(sample["lr"])}))
        sample = sample_tpe(space, history, rng=RngState(99))
        assert set(sample) == {p.name for p in space}
        assert isinstance(sample["initial_collect_steps"], int)
        assert 1e-5 <= sample["lr"] <= 1e-3


# =============================================================================
# Importance
# =============================================================================


class TestMdiImportance:
    def test_dominant_parameter_ranks_first(self):
        records, space = synthetic_records(200, lambda s, noise: s["a"] + noise.normal(0, 0.1))
        report = mdi_importance(records, space, forest_size=100, rng=RngState(0))
        assert report.averaged["a"] > 0.5
        assert max(report.averaged, key=report.averaged.get) == "a"
        assert sum(report.averaged.values()) == pytest.approx(1.0)

    def test_dominant_parameter_across_seeds(self):
        wins = 0
        for seed in range(20):
            records, space = synthetic_records(200, lambda s, noise: s["a"] + noise.normal(0, 0.1), seed=seed)
            averaged = mdi_importance(records, space, forest_size=50, rng=RngState(seed)).averaged
            wins += averaged["a"] > 0.5 and max(averaged, key=averaged.get) == "a"
        assert wins >= 19

    def test_constant_score_gives_uniform_importance(self):
        records, space = synthetic_records(30, lambda s, noise: 1.0)
        report = mdi_importance(records, space, forest_size=10)
        for value in report.averaged.values():
            assert value == pytest.approx(1 / 3)

    def test_parameter_order_does_not_matter(self):
        records, space = synthetic_records(100, lambda s, noise: s["b"] + noise.normal(0, 0.1), seed=4)
        forward = mdi_importance(records, space, forest_size=30, rng=RngState(4)).averaged
        reordered = mdi_importance(records, list(reversed(space)), forest_size=30, rng=RngState(4)).averaged
        assert forward == pytest.approx(reordered)
        assert max(forward, key=forward.get) == "b"

    def test_pure_noise_spreads_importance(self):
        space = [ParamSpec(f"p{i}", "uniform", low=0.0, high=1.0) for i in range(10)]
        rng, noise = RngState(5), np.random.default_rng(5)
        records = [
            TrialRecord(i, sample_random(space, rng.spawn(i)), {"toy": float(noise.normal())}) for i in range(200)
        ]
        averaged = mdi_importance(records, space, forest_size=100, rng=RngState(5)).averaged
        assert max(averaged.values()) < 3 * (1 / len(space))

    def test_average_over_environments(self):
        records, space = synthetic_records(
            60, lambda s, noise: s["a"] + noise.normal(0, 0.05), envs=("cartpole", "acrobot")
        )
        report = mdi_importance(records, space, forest_size=20)
        assert set(report.per_env) == {"acrobot", "cartpole"}
        for name, value in report.averaged.items():
            expected = (report.per_env["cartpole"][name] + report.per_env["acrobot"][name]) / 2
            assert value == pytest.approx(expected)
        frame = report.to_frame()
        assert list(frame.columns[:1]) == ["parameter"]
        assert frame["average"].is_monotonic_decreasing

    def test_needs_enough_scored_trials(self):
        records, space = synthetic_records(5, lambda s, noise: s["a"])
        with pytest.raises(InsufficientDataError):
            mdi_importance(records, space)

    def test_categoricals_are_one_hot(self):
        records, space = synthetic_records(4, lambda s, noise: 0.0)
        x, owners = encode_samples(records, space)
        assert owners == ["a", "b", "c", "c"]
        np.testing.assert_array_equal(x[:, 2] + x[:, 3], np.ones(4))


# =============================================================================
# Reports and studies
# =============================================================================


class TestStudyTwoReport:
    def make_records(self):
        values = ["low", "high", "low", "high"]
        scores = [1.0, 3.0, 2.0, 5.0]
        return [
            TrialRecord(i, {"kind": value}, {"cartpole": score})
            for i, (value, score) in enumerate(zip(values, scores))
        ]

    def test_marginal_means(self):
        report = study_two_report(self.make_records())
        means = report.marginals.set_index("value")["mean_score"]
        assert means["high"] == pytest.approx(4.0)
        assert means["low"] == pytest.approx(1.5)
        assert set(report.marginals["count"]) == {2}

    def test_top_samples(self):
        report = study_two_report(self.make_records(), top_k=2)
        assert list(report.top_samples["trial"]) == [3, 1]
        assert list(report.top_samples["rank"]) == [1, 2]

    def test_continuous_values_are_binned(self):
        records, space = synthetic_records(40, lambda s, noise: s["a"])
        report = study_two_report(records, space, bins=4)
        a_rows = report.marginals[report.marginals["parameter"] == "a"]
        assert len(a_rows) == 4
        assert a_rows["count"].sum() == 40

    def test_no_records(self):
        with pytest.raises(ContractError):
            study_two_report([])


class TestRunStudy:
    space = [
        ParamSpec("gamma", "categorical", values=(0.9, 0.99), target="agent.gamma"),
        ParamSpec("lr", "log_uniform", low=1e-4, high=1e-2, target="agent.lr"),
    ]

    def test_smoke_and_determinism(self):
        def study():
            return run_study(
                self.space, "random", n_trials=3, envs=["cartpole"], steps=20, runs_per_sample=1,
                rng=RngState(4), base_config=tiny_run_config(),
            )

        first = study()
        assert [r.trial_index for r in first] == [0, 1, 2]
        assert all(math.isfinite(r.mean_score) for r in first)
        assert all(r.steps_trained == 20 for r in first)
        second = study()
        assert [(r.sample, r.scores) for r in first] == [(r.sample, r.scores) for r in second]

        frame = records_to_frame(first, self.space)
        assert {"trial", "gamma", "lr", "score_cartpole", "mean_score", "diverged"} <= set(frame.columns)

    def test_invalid_sample_is_recorded(self):
        space = [ParamSpec("tau", "categorical", values=(0.0, -1.0), target="agent.tau")]
        records = run_study(
            space, "random", n_trials=2, envs=["cartpole"], steps=10, runs_per_sample=1,
            rng=RngState(0), base_config=tiny_run_config(),
        )
        assert all("agent.tau" in r.error for r in records)
        assert all(math.isnan(r.mean_score) for r in records)

    def test_rejects_empty_study(self):
        with pytest.raises(ConfigError):
            run_study(self.space, "random", 0, ["cartpole"], 10, 1, RngState(0))

    @pytest.mark.slow
    def test_worker_count_does_not_change_results(self):
        kwargs = dict(
            sampler="tpe", n_trials=6, envs=["cartpole"], steps=40, runs_per_sample=1,
            base_config=tiny_run_config(),
        )
        serial = run_study(self.space, rng=RngState(8), workers=1, **kwargs)
        parallel = run_study(self.space, rng=RngState(8), workers=2, **kwargs)
        assert [r.scores for r in serial] == [r.scores for r in parallel]
