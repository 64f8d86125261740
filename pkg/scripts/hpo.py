# scripts/hpo.py
"""
Hyperparameter studies over the TBQN method space.

* sample_random / sample_tpe draw samples from a declared search space
  (TPE through optuna's TPESampler, fed the study history each call).
* run_study trains every sample in every environment, several runs each,
  fanning trials out to a process pool.
* mdi_importance fits a random forest on (sample -> score) and reports the
  Mean Decrease Impurity importance of every parameter.
* study_two_report gives per-value mean-score marginals and the top samples
  per environment.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import optuna
import pandas as pd
from sklearn.ensemble import RandomForestRegressor
from tqdm import tqdm

from dqn_agent import run_training
from run_config import RunConfig, apply_dotted, load_yaml
from tbqn_errors import ConfigError, ContractError, InsufficientDataError, TBQNError
from tensor_core import RngState

logger = logging.getLogger(__name__)
optuna.logging.set_verbosity(optuna.logging.WARNING)

PARAM_KINDS = ("categorical", "uniform", "log_uniform", "int_uniform")
TPE_STARTUP_TRIALS = 10
TPE_GAMMA_QUANTILE = 0.25
MIN_IMPORTANCE_RECORDS = 10
SAMPLING_BATCH = 4
TOP_K = 5


@dataclass(frozen=True)
class ParamSpec:
    """One searchable parameter; `target` is the dotted RunConfig field it sets."""

    name: str
    kind: str
    values: tuple = ()
    low: Optional[float] = None
    high: Optional[float] = None
    target: Optional[str] = None

    def validate(self) -> "ParamSpec":
        where = f"space.{self.name}"
        if self.kind not in PARAM_KINDS:
            raise ConfigError(where, f"kind must be one of {PARAM_KINDS}, got '{self.kind}'")
        if self.kind == "categorical":
            if len(self.values) < 2:
                raise ConfigError(where, "categorical parameters need at least 2 values")
            return self
        if self.low is None or self.high is None:
            raise ConfigError(where, "numeric parameters need low and high")
        if self.kind == "int_uniform":
            if int(self.low) != self.low or int(self.high) != self.high or self.low > self.high:
                raise ConfigError(where, f"int range must satisfy integer low <= high, got [{self.low}, {self.high}]")
        elif not self.low < self.high:
            raise ConfigError(where, f"need low < high, got [{self.low}, {self.high}]")
        if self.kind == "log_uniform" and self.low <= 0:
            raise ConfigError(where, f"log_uniform needs low > 0, got {self.low}")
        return self

    @property
    def config_key(self) -> str:
        return self.target or self.name

    def distribution(self) -> optuna.distributions.BaseDistribution:
        if self.kind == "categorical":
            return optuna.distributions.CategoricalDistribution(list(self.values))
        if self.kind == "int_uniform":
            return optuna.distributions.IntDistribution(int(self.low), int(self.high))
        return optuna.distributions.FloatDistribution(
            float(self.low), float(self.high), log=self.kind == "log_uniform"
        )


SearchSpace = List[ParamSpec]


def load_search_space(path: Union[str, Path]) -> SearchSpace:
    """Read a YAML file with a top-level `parameters:` list."""
    data = load_yaml(path, "space")
    entries = data.get("parameters")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("space.parameters", f"'{path}' must list at least one parameter")
    space = []
    for entry in entries:
        entry = dict(entry)
        if "name" not in entry or "kind" not in entry:
            raise ConfigError("space", f"every parameter needs a name and a kind, got {entry}")
        space.append(
            ParamSpec(
                name=str(entry["name"]),
                kind=str(entry["kind"]),
                values=tuple(entry.get("values", ())),
                low=entry.get("low"),
                high=entry.get("high"),
                target=entry.get("target"),
            ).validate()
        )
    names = [p.name for p in space]
    if len(set(names)) != len(names):
        raise ConfigError("space", f"duplicate parameter names in {names}")
    return space


# =============================================================================
# Samplers
# =============================================================================


def sample_random(space: SearchSpace, rng: RngState) -> Dict[str, Any]:
    sample: Dict[str, Any] = {}
    for p in space:
        if p.kind == "categorical":
            sample[p.name] = p.values[int(rng.integers(0, len(p.values)))]
        elif p.kind == "uniform":
            sample[p.name] = float(rng.uniform(p.low, p.high))
        elif p.kind == "log_uniform":
            sample[p.name] = float(math.exp(rng.uniform(math.log(p.low), math.log(p.high))))
        else:
            sample[p.name] = int(rng.integers(int(p.low), int(p.high) + 1))
    return sample


def _external_value(p: ParamSpec, value: Any) -> Any:
    if p.kind == "int_uniform":
        return int(value)
    if p.kind in ("uniform", "log_uniform"):
        return float(value)
    return value


def sample_tpe(
    space: SearchSpace,
    history: Sequence["TrialRecord"],
    gamma_quantile: float = TPE_GAMMA_QUANTILE,
    rng: Optional[RngState] = None,
    n_startup: int = TPE_STARTUP_TRIALS,
) -> Dict[str, Any]:
    """Tree-structured Parzen estimator sample given the finished trials.

    Below `n_startup` scored trials this is sample_random. Otherwise the
    history is split at the gamma quantile into good and bad trials and the
    candidate maximizing l(x)/g(x) is returned.
    """
    rng = rng if rng is not None else RngState(0)
    scored = [r for r in history if math.isfinite(r.mean_score)]
    if len(scored) < n_startup:
        return sample_random(space, rng)

    distributions = {p.name: p.distribution() for p in space}
    sampler = optuna.samplers.TPESampler(
        n_startup_trials=n_startup,
        gamma=lambda n: max(1, math.ceil(gamma_quantile * n)),
        seed=rng.seed_int(),
    )
    study = optuna.create_study(direction="maximize", sampler=sampler)
    for record in scored:
        study.add_trial(
            optuna.trial.create_trial(
                params={p.name: _external_value(p, record.sample[p.name]) for p in space},
                distributions=distributions,
                value=record.mean_score,
            )
        )
    trial = study.ask(fixed_distributions=distributions)
    return {p.name: _external_value(p, trial.params[p.name]) for p in space}


SAMPLERS: Dict[str, Callable] = {"random": sample_random, "tpe": sample_tpe}


# =============================================================================
# Trials and studies
# =============================================================================


@dataclass
class TrialRecord:
    trial_index: int
    sample: Dict[str, Any]
    scores: Dict[str, float] = field(default_factory=dict)
    diverged: bool = False
    seed: int = 0
    steps_trained: int = 0
    error: Optional[str] = None

    @property
    def mean_score(self) -> float:
        values = [v for v in self.scores.values() if math.isfinite(v)]
        if not values or len(values) != len(self.scores):
            return float("nan")
        return float(np.mean(values))


def apply_sample(base: RunConfig, sample: Dict[str, Any], space: SearchSpace) -> RunConfig:
    return apply_dotted(base, {p.config_key: sample[p.name] for p in space})


@dataclass
class TrialTask:
    trial_index: int
    sample: Dict[str, Any]
    space: SearchSpace
    base_config: RunConfig
    envs: List[str]
    steps: int
    runs_per_sample: int
    seed: int


def run_trial(task: TrialTask) -> TrialRecord:
    """Train one sample runs_per_sample times per env; failures are recorded, not raised."""
    record = TrialRecord(trial_index=task.trial_index, sample=dict(task.sample), seed=task.seed)
    try:
        config = apply_sample(task.base_config, task.sample, task.space)
    except TBQNError as exc:
        record.error = str(exc)
        record.scores = {env: float("nan") for env in task.envs}
        logger.warning(f"❌ Trial {task.trial_index}: invalid sample {task.sample}: {exc}")
        return record

    trial_rng = RngState(task.seed)
    for env in task.envs:
        run_scores = []
        for run in range(task.runs_per_sample):
            run_seed = trial_rng.spawn(env, run).seed_int()
            try:
                env_config = apply_dotted(config, {"env": env, "agent.seed": run_seed})
                log = run_training(
                    env_config.env,
                    env_config.agent,
                    env_config.net_spec(),
                    total_steps=task.steps,
                    eval_every=task.steps + 1,
                )
            except Exception as exc:
                record.error = f"{env} run {run}: {exc}"
                logger.error(f"❌ Trial {task.trial_index} {env} run {run} failed: {exc}")
                run_scores.append(float("nan"))
                continue
            record.diverged = record.diverged or log.diverged
            record.steps_trained += log.steps_trained
            run_scores.append(log.training_score())
        record.scores[env] = float(np.mean(run_scores)) if run_scores else float("nan")
    return record


def run_study(
    space: SearchSpace,
    sampler: Union[str, Callable],
    n_trials: int,
    envs: Sequence[str],
    steps: int,
    runs_per_sample: int,
    rng: RngState,
    base_config: Optional[RunConfig] = None,
    workers: int = 1,
    sampling_batch: int = SAMPLING_BATCH,
    progress: bool = False,
) -> List[TrialRecord]:
    """Sample, train and score n_trials samples.

    Samples are drawn in batches of `sampling_batch`, each batch seeing only
    the records of earlier batches, so the result does not depend on `workers`.
    """
    if n_trials < 1:
        raise ConfigError("trials", f"must be >= 1, got {n_trials}")
    if runs_per_sample < 1:
        raise ConfigError("runs_per_sample", f"must be >= 1, got {runs_per_sample}")
    sample_fn = SAMPLERS[sampler] if isinstance(sampler, str) else sampler
    base_config = base_config or RunConfig()
    env_list = list(envs)

    records: List[TrialRecord] = []
    bar = tqdm(total=n_trials, desc="study", disable=not progress)
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for start in range(0, n_trials, sampling_batch):
            tasks = []
            for index in range(start, min(start + sampling_batch, n_trials)):
                sample_rng = rng.spawn("sample", index)
                if sample_fn is sample_tpe:
                    sample = sample_tpe(space, records, rng=sample_rng)
                else:
                    sample = sample_fn(space, sample_rng)
                seed = rng.spawn("trial", index).seed_int()
                tasks.append(
                    TrialTask(index, sample, space, base_config, env_list, steps, runs_per_sample, seed)
                )
            results = executor.map(run_trial, tasks) if executor else map(run_trial, tasks)
            for record in results:
                records.append(record)
                bar.update(1)
                status = "diverged" if record.diverged else "ok"
                logger.info(f"Trial {record.trial_index}: mean score {record.mean_score:.2f} ({status})")
    finally:
        bar.close()
        if executor:
            executor.shutdown()
    return sorted(records, key=lambda r: r.trial_index)


def records_to_frame(records: Sequence[TrialRecord], space: SearchSpace) -> pd.DataFrame:
    """One row per trial: parameters, score_<env> columns, mean_score and status."""
    rows = []
    for r in records:
        row: Dict[str, Any] = {"trial": r.trial_index, "seed": r.seed}
        row.update({p.name: r.sample.get(p.name) for p in space})
        row.update({f"score_{env}": score for env, score in r.scores.items()})
        row.update(
            {
                "mean_score": r.mean_score,
                "diverged": r.diverged,
                "steps_trained": r.steps_trained,
                "error": r.error or "",
            }
        )
        rows.append(row)
    return pd.DataFrame(rows)


# =============================================================================
# Importance and study summaries
# =============================================================================


@dataclass
class ImportanceReport:
    per_env: Dict[str, Dict[str, float]]
    averaged: Dict[str, float]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.per_env)
        frame["average"] = pd.Series(self.averaged)
        frame.index.name = "parameter"
        return frame.reset_index().sort_values("average", ascending=False, ignore_index=True)


def encode_samples(records: Sequence[TrialRecord], space: SearchSpace):
    """Numeric matrix (categoricals one-hot) and the parameter owning each column.

    Parameters are encoded in name order so the result does not depend on the
    order of the space.
    """
    columns: List[np.ndarray] = []
    owners: List[str] = []
    for p in sorted(space, key=lambda s: s.name):
        raw = [r.sample[p.name] for r in records]
        if p.kind == "categorical":
            dummies = pd.get_dummies(pd.Categorical([str(v) for v in raw], categories=[str(v) for v in p.values]))
            for name in dummies.columns:
                columns.append(dummies[name].to_numpy(dtype=np.float64))
                owners.append(p.name)
        else:
            columns.append(np.asarray(raw, dtype=np.float64))
            owners.append(p.name)
    return np.column_stack(columns), owners


def _fit_importance(x: np.ndarray, y: np.ndarray, owners: List[str], forest_size: int, max_depth: int, seed: int) -> Dict[str, float]:
    forest = RandomForestRegressor(
        n_estimators=forest_size,
        max_features="sqrt",
        max_depth=max_depth,
        bootstrap=True,
        random_state=seed,
    )
    forest.fit(x, y)
    per_param = pd.Series(forest.feature_importances_, index=owners).groupby(level=0).sum()
    names = sorted(set(owners))
    total = float(per_param.sum())
    if total <= 0 or not math.isfinite(total):
        return {name: 1.0 / len(names) for name in names}
    return {name: float(per_param[name] / total) for name in names}


def mdi_importance(
    records: Sequence[TrialRecord],
    space: SearchSpace,
    forest_size: int = 100,
    rng: Optional[RngState] = None,
    max_depth: int = 8,
) -> ImportanceReport:
    """Mean Decrease Impurity importance per parameter, per env and averaged over envs."""
    rng = rng if rng is not None else RngState(0)
    envs = sorted({env for r in records for env in r.scores})
    per_env: Dict[str, Dict[str, float]] = {}
    for env in envs:
        usable = [r for r in records if math.isfinite(r.scores.get(env, float("nan")))]
        if len(usable) < MIN_IMPORTANCE_RECORDS:
            raise InsufficientDataError(
                f"{env}: need at least {MIN_IMPORTANCE_RECORDS} scored trials, got {len(usable)}"
            )
        x, owners = encode_samples(usable, space)
        y = np.array([r.scores[env] for r in usable], dtype=np.float64)
        per_env[env] = _fit_importance(x, y, owners, forest_size, max_depth, rng.spawn("forest", env).seed_int())
    if not per_env:
        raise InsufficientDataError(f"need at least {MIN_IMPORTANCE_RECORDS} scored trials, got 0")

    averaged = pd.DataFrame(per_env).mean(axis=1)
    return ImportanceReport(per_env=per_env, averaged={k: float(v) for k, v in averaged.items()})


@dataclass
class StudyTwoReport:
    marginals: pd.DataFrame
    top_samples: pd.DataFrame


def _value_labels(p: ParamSpec, values: pd.Series, bins: int) -> pd.Series:
    """Continuous parameters are grouped into quantile bins; the rest by value."""
    if p.kind in ("uniform", "log_uniform") and values.nunique() > bins:
        return pd.qcut(values.astype(float), q=bins, duplicates="drop").astype(str)
    return values.astype(str)


def study_two_report(
    records: Sequence[TrialRecord],
    space: Optional[SearchSpace] = None,
    top_k: int = TOP_K,
    bins: int = 4,
) -> StudyTwoReport:
    """Mean score per parameter value (per env) and the top_k samples per env."""
    if not records:
        raise ContractError("study_two_report: no trial records")
    if space is None:
        names = sorted({name for r in records for name in r.sample})
        space = [
            ParamSpec(name=name, kind="categorical", values=tuple(sorted({str(r.sample[name]) for r in records})))
            for name in names
        ]
    envs = sorted({env for r in records for env in r.scores})
    frame = records_to_frame(records, space)

    marginal_rows = []
    for env in envs:
        score_col = f"score_{env}"
        for p in space:
            scored = frame[[p.name, score_col]].dropna(subset=[score_col])
            if scored.empty:
                continue
            labels = _value_labels(p, scored[p.name], bins)
            grouped = scored[score_col].groupby(labels, sort=True).agg(["mean", "count"])
            for value, stats in grouped.iterrows():
                marginal_rows.append(
                    {
                        "env": env,
                        "parameter": p.name,
                        "value": value,
                        "mean_score": float(stats["mean"]),
                        "count": int(stats["count"]),
                    }
                )
    marginals = pd.DataFrame(marginal_rows, columns=["env", "parameter", "value", "mean_score", "count"])

    top_frames = []
    for env in envs:
        score_col = f"score_{env}"
        top = frame.dropna(subset=[score_col]).sort_values(score_col, ascending=False, kind="stable").head(top_k)
        top = top.assign(env=env, rank=range(1, len(top) + 1), score=top[score_col])
        top_frames.append(top[["env", "rank", "trial", "score"] + [p.name for p in space]])
    top_samples = pd.concat(top_frames, ignore_index=True) if top_frames else pd.DataFrame()
    return StudyTwoReport(marginals=marginals, top_samples=top_samples)
