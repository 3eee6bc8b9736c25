"""
Hyperparameter search over the pipeline configuration space.

The protocol: sample configurations, keep the best ones, shrink every
dimension to the hull of the best trials, freeze dimensions the best trials
agree on, then start the next stage with lower learning rates and more
epochs. Trials that fail are recorded and the search goes on.
"""

import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Annotated, Any, Callable, Dict, List, Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    StrictBool,
    StrictFloat,
    StrictInt,
    StrictStr,
    model_validator,
)

from pipeline.errors import NoSuccessfulTrials, UnsatisfiableConstraints
from pipeline_config import ALLOWED_FPS, FAMILIES, MAX_CONV_STRIDE, MAX_POOL_SECTIONS

logger = logging.getLogger(__name__)

Value = Union[StrictBool, StrictInt, StrictFloat, StrictStr]
Config = Dict[str, Any]

# Dimensions the stage schedule moves between stages
SCHEDULE_DIMS = ("learning_rate", "epochs")

EXPLORE_RATE = 0.3
MAX_SAMPLE_ATTEMPTS = 1000


class _Dimension(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # active only when every named dimension holds one of the listed values
    active_when: Dict[str, List[Value]] = {}


class Categorical(_Dimension):
    kind: Literal["categorical"] = "categorical"
    options: List[Value] = Field(min_length=1)

    def draw(self, rng: np.random.Generator):
        return self.options[int(rng.integers(len(self.options)))]

    def contains(self, value) -> bool:
        return value in self.options


class IntRange(_Dimension):
    kind: Literal["int_range"] = "int_range"
    lo: int
    hi: int

    @model_validator(mode="after")
    def validate_bounds(self):
        if self.lo > self.hi:
            raise ValueError(f"lo {self.lo} > hi {self.hi}")
        return self

    def draw(self, rng: np.random.Generator):
        return int(rng.integers(self.lo, self.hi + 1))

    def contains(self, value) -> bool:
        return self.lo <= value <= self.hi


class LogUniform(_Dimension):
    kind: Literal["log_uniform"] = "log_uniform"
    lo: float = Field(gt=0.0)
    hi: float = Field(gt=0.0)

    @model_validator(mode="after")
    def validate_bounds(self):
        if self.lo > self.hi:
            raise ValueError(f"lo {self.lo} > hi {self.hi}")
        return self

    def draw(self, rng: np.random.Generator):
        return float(math.exp(rng.uniform(math.log(self.lo), math.log(self.hi))))

    def contains(self, value) -> bool:
        return self.lo * (1 - 1e-12) <= value <= self.hi * (1 + 1e-12)


class Fixed(_Dimension):
    """A frozen dimension."""
    kind: Literal["fixed"] = "fixed"
    value: Value

    def draw(self, rng: np.random.Generator):
        return self.value

    def contains(self, value) -> bool:
        return value == self.value


Dimension = Annotated[Union[Categorical, IntRange, LogUniform, Fixed], Field(discriminator="kind")]


class ParamSpace(BaseModel):
    """Named dimensions, sampled in declaration order."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    dims: Dict[str, Dimension]

    def is_active(self, name: str, config: Config) -> bool:
        return all(config.get(k) in v for k, v in self.dims[name].active_when.items())

    def replace(self, **dims) -> "ParamSpace":
        merged = dict(self.dims)
        merged.update(dims)
        return ParamSpace(dims=merged)

    def frozen(self) -> Dict[str, Any]:
        return {name: d.value for name, d in self.dims.items() if isinstance(d, Fixed)}

    def is_subset_of(self, other: "ParamSpace", ignore=SCHEDULE_DIMS) -> bool:
        """Dimension-wise containment; the schedule-managed dimensions are skipped."""
        for name, dim in self.dims.items():
            if name in ignore:
                continue
            outer = other.dims.get(name)
            if outer is None:
                return False
            if isinstance(dim, Fixed):
                inside = outer.contains(dim.value)
            elif isinstance(dim, Categorical):
                inside = all(outer.contains(o) for o in dim.options)
            else:
                inside = outer.contains(dim.lo) and outer.contains(dim.hi) and not isinstance(outer, Fixed)
            if not inside:
                return False
        return True


def _family_dims(family: str, **dims) -> Dict[str, _Dimension]:
    return {name: dim.model_copy(update={"active_when": {"family": [family]}}) for name, dim in dims.items()}


def default_space() -> ParamSpace:
    """The full 26-dimension pipeline space."""
    dims: Dict[str, _Dimension] = {
        "fps": Categorical(options=list(ALLOWED_FPS)),
        "window_len": IntRange(lo=2, hi=120),
        "hop": IntRange(lo=1, hi=8),
        "swap_enabled": Categorical(options=[True, False]),
        "impute_value": Categorical(options=[2.0, -1.0, 0.0]),
        "reduce": Categorical(options=["full", "center_of_gravity", "five_points"]),
        "normalize": Categorical(options=["image_absolute", "on_most_recent", "per_skeleton"]),
        "family": Categorical(options=list(FAMILIES)),
    }
    dims.update(_family_dims(
        "lstm",
        lstm_layers=IntRange(lo=1, hi=3),
        lstm_units=IntRange(lo=8, hi=128),
    ))
    dims.update(_family_dims(
        "td_dense",
        td_layers=IntRange(lo=0, hi=12),
        td_units=IntRange(lo=8, hi=256),
        dense_layers=IntRange(lo=0, hi=3),
        dense_units=IntRange(lo=8, hi=500),
    ))
    dims.update(_family_dims(
        "conv1d",
        conv_layers=IntRange(lo=1, hi=6),
        conv_filters=IntRange(lo=8, hi=128),
        conv_kernel=IntRange(lo=2, hi=9),
        conv_stride=IntRange(lo=1, hi=MAX_CONV_STRIDE),
        conv_padding=Categorical(options=["causal", "same"]),
        conv_double_filters=Categorical(options=[True, False]),
        conv_pool=Categorical(options=[True, False]),
    ))
    dims["conv_pool_sections"] = IntRange(
        lo=1, hi=MAX_POOL_SECTIONS, active_when={"family": ["conv1d"], "conv_pool": [True]},
    )
    dims.update({
        "learning_rate": LogUniform(lo=1e-5, hi=1e-2),
        "batch_size": Categorical(options=[16, 32, 64, 128]),
        "epochs": IntRange(lo=4, hi=32),
        "plateau_patience": IntRange(lo=2, hi=10),
    })
    return ParamSpace(dims=dims)


class SearchConstraints(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    max_history_s: Optional[float] = Field(default=3.5, gt=0.0)
    generalization_only: bool = False


def constraint_violation(config: Config, constraints: SearchConstraints) -> Optional[str]:
    """Why a config is incoherent under the constraints, or None."""
    if constraints.max_history_s is not None and "window_len" in config and "fps" in config:
        if config["window_len"] / config["fps"] > constraints.max_history_s + 1e-9:
            return (f"window of {config['window_len']} frames at {config['fps']} fps exceeds "
                    f"{constraints.max_history_s} s of history")
    if constraints.generalization_only and config.get("normalize", "per_skeleton") != "per_skeleton":
        return "generalization_only requires per_skeleton normalization"
    if config.get("reduce") == "center_of_gravity" and config.get("normalize") == "per_skeleton":
        return "a single center-of-gravity point normalizes to zero"
    return None


def _draw(space: ParamSpace, rng: np.random.Generator, constraints: SearchConstraints,
          choose: Callable[[str, _Dimension], Any]) -> Config:
    config: Config = {}
    for name, dim in space.dims.items():
        if not space.is_active(name, config):
            continue
        if name == "normalize" and constraints.generalization_only:
            config[name] = "per_skeleton"
            continue
        config[name] = choose(name, dim)
    return config


def sample(space: ParamSpace, rng: np.random.Generator,
           constraints: SearchConstraints = SearchConstraints()) -> Config:
    """
    Draw one configuration; dimensions of inactive branches are left out.

    Incoherent draws are rejected and redrawn.

    Raises:
        UnsatisfiableConstraints: If no coherent config turns up within the attempt budget
    """
    last = None
    for _ in range(MAX_SAMPLE_ATTEMPTS):
        config = _draw(space, rng, constraints, lambda name, dim: dim.draw(rng))
        last = constraint_violation(config, constraints)
        if last is None:
            return config
    raise UnsatisfiableConstraints(f"no coherent config in {MAX_SAMPLE_ATTEMPTS} draws (last: {last})")


# Trials

class TrialRecord(BaseModel):
    trial_id: int
    config: Config
    status: Literal["ok", "failed"]
    val_accuracy: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    val_loss: Optional[float] = None
    param_count: Optional[int] = None
    wall_time_s: float = 0.0
    seed: int
    stage: int = 0
    error: Optional[str] = None
    started_at: Optional[str] = None
    finished_at: Optional[str] = None


@dataclass(frozen=True)
class TrialOutcome:
    val_accuracy: float
    val_loss: float
    param_count: int


Objective = Callable[[Config, int], TrialOutcome]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_trial(config: Config, objective: Objective, seed: int, trial_id: int = 0, stage: int = 0) -> TrialRecord:
    """
    Evaluate one configuration. Any error becomes a failed record.
    """
    started_at = _now()
    started = time.perf_counter()
    try:
        outcome = objective(config, seed)
    except Exception as e:
        logger.warning("Trial %d failed: %s: %s", trial_id, type(e).__name__, e)
        return TrialRecord(
            trial_id=trial_id, config=config, status="failed", seed=seed, stage=stage,
            error=f"{type(e).__name__}: {e}",
            wall_time_s=time.perf_counter() - started, started_at=started_at, finished_at=_now(),
        )
    return TrialRecord(
        trial_id=trial_id,
        config=config,
        status="ok",
        val_accuracy=outcome.val_accuracy,
        val_loss=outcome.val_loss,
        param_count=outcome.param_count,
        wall_time_s=time.perf_counter() - started,
        seed=seed,
        stage=stage,
        started_at=started_at,
        finished_at=_now(),
    )


def top_trials(trials: List[TrialRecord], top_quantile: float, minimum: int = 1) -> List[TrialRecord]:
    """Best ceil(q * n) successful trials (at least `minimum`), by accuracy then loss."""
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise NoSuccessfulTrials("no successful trials to learn from")
    ranked = sorted(ok, key=lambda t: (-t.val_accuracy, t.val_loss if t.val_loss is not None else math.inf,
                                       t.trial_id))
    return ranked[:max(minimum, math.ceil(top_quantile * len(ok)))]


def shrink(space: ParamSpace, trials: List[TrialRecord], top_quantile: float = 0.2) -> ParamSpace:
    """
    Narrow every dimension to what the top trials used.

    Numeric dimensions become the hull of the top values intersected with
    the current range, categorical ones the options seen among the top
    trials. A dimension no top trial used (inactive branch), or whose
    intersection would be empty, is left unchanged.

    Raises:
        NoSuccessfulTrials: If no trial succeeded
    """
    best = top_trials(trials, top_quantile)
    dims = {}
    for name, dim in space.dims.items():
        values = [t.config[name] for t in best if name in t.config]
        if isinstance(dim, Fixed) or not values:
            dims[name] = dim
        elif isinstance(dim, Categorical):
            options = [o for o in dim.options if o in values]
            dims[name] = dim.model_copy(update={"options": options}) if options else dim
        else:
            lo, hi = max(dim.lo, min(values)), min(dim.hi, max(values))
            dims[name] = dim.model_copy(update={"lo": lo, "hi": hi}) if lo <= hi else dim
    return ParamSpace(dims=dims)


def freeze(space: ParamSpace, trials: List[TrialRecord], top_quantile: float = 0.2) -> ParamSpace:
    """Freeze dimensions on which all top trials (at least two) agree."""
    if sum(t.status == "ok" for t in trials) < 2:
        logger.info("Fewer than two successful trials; nothing frozen")
        return space
    best = top_trials(trials, top_quantile, minimum=2)
    dims = {}
    for name, dim in space.dims.items():
        values = [t.config.get(name, None) for t in best]
        unanimous = all(name in t.config for t in best) and all(v == values[0] for v in values)
        if unanimous and not isinstance(dim, Fixed) and dim.contains(values[0]):
            dims[name] = Fixed(value=values[0], active_when=dim.active_when)
            logger.info("Froze %s = %r", name, values[0])
        else:
            dims[name] = dim
    return ParamSpace(dims=dims)


# Search

class Stage(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    budget: int = Field(ge=1)
    lr_factor: float = Field(default=1.0, gt=0.0, le=1.0)    # applied when the stage starts
    epoch_increment: int = Field(default=0, ge=0)


class StageSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    stages: List[Stage] = Field(min_length=1)

    @property
    def budget(self) -> int:
        return sum(s.budget for s in self.stages)


class SearchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    budget: int = Field(ge=1)
    strategy: Literal["random", "surrogate_guided"] = "surrogate_guided"
    top_quantile: float = Field(default=0.2, gt=0.0, lt=1.0)
    seed: int = 0
    constraints: SearchConstraints = SearchConstraints()
    explore_rate: float = Field(default=EXPLORE_RATE, ge=0.0, le=1.0)
    schedule: Optional[StageSchedule] = None

    @model_validator(mode="after")
    def validate_schedule(self):
        if self.schedule is not None and self.schedule.budget != self.budget:
            raise ValueError(f"stage budgets sum to {self.schedule.budget}, budget is {self.budget}")
        return self


class RunLog:
    """Append-only JSON-lines trial log; writes are serialized."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.records: List[TrialRecord] = []
        self._lock = threading.Lock()

    def append(self, record: TrialRecord) -> None:
        with self._lock:
            self.records.append(record)
            if self.path:
                with open(self.path, "a") as handle:
                    handle.write(record.model_dump_json() + "\n")


def load_run_log(path: str) -> List[TrialRecord]:
    with open(path) as handle:
        return [TrialRecord.model_validate_json(line) for line in handle if line.strip()]


def trials_frame(records: List[TrialRecord]) -> pd.DataFrame:
    """One row per trial; config keys become `config.<name>` columns."""
    rows = []
    for record in records:
        row = record.model_dump(exclude={"config"})
        row.update({f"config.{k}": v for k, v in record.config.items()})
        rows.append(row)
    return pd.DataFrame(rows)


def _neighbor(dim: _Dimension, value, rng: np.random.Generator):
    """A value close to `value` inside the dimension."""
    if isinstance(dim, IntRange):
        step = int(rng.integers(1, 3)) * (1 if rng.random() < 0.5 else -1)
        return int(np.clip(value + step, dim.lo, dim.hi))
    if isinstance(dim, LogUniform):
        return float(np.clip(value * math.exp(rng.normal(0.0, 0.25)), dim.lo, dim.hi))
    if isinstance(dim, Categorical) and dim.contains(value):
        return value
    return dim.draw(rng)


def _propose_guided(space: ParamSpace, history: List[TrialRecord], rng: np.random.Generator,
                    config: SearchConfig, seen: set) -> Config:
    """Resample each dimension from the top trials, with small neighborhood moves."""
    best = top_trials(history, config.top_quantile, minimum=2)
    for _ in range(20):
        def choose(name, dim):
            donors = [t.config[name] for t in best if name in t.config and dim.contains(t.config[name])]
            if not donors:
                return dim.draw(rng)
            value = donors[int(rng.integers(len(donors)))]
            return _neighbor(dim, value, rng) if rng.random() < 0.5 else value

        candidate = _draw(space, rng, config.constraints, choose)
        if constraint_violation(candidate, config.constraints) is None and _key(candidate) not in seen:
            return candidate
    return sample(space, rng, config.constraints)


def _key(config: Config) -> str:
    return json.dumps(config, sort_keys=True)


def advance_stage(space: ParamSpace, trials: List[TrialRecord], stage: Stage, top_quantile: float) -> ParamSpace:
    """Shrink and freeze on the finished stage, then lower learning rates and raise epochs."""
    try:
        space = freeze(shrink(space, trials, top_quantile), trials, top_quantile)
    except NoSuccessfulTrials:
        logger.warning("Stage had no successful trials; space kept as is")
    changes = {}
    lr = space.dims.get("learning_rate")
    if lr is not None and stage.lr_factor != 1.0:
        f = stage.lr_factor
        if isinstance(lr, Fixed):
            changes["learning_rate"] = lr.model_copy(update={"value": lr.value * f})
        elif isinstance(lr, Categorical):
            changes["learning_rate"] = lr.model_copy(update={"options": [o * f for o in lr.options]})
        else:
            changes["learning_rate"] = lr.model_copy(update={"lo": lr.lo * f, "hi": lr.hi * f})
    epochs = space.dims.get("epochs")
    if epochs is not None and stage.epoch_increment:
        n = stage.epoch_increment
        if isinstance(epochs, Fixed):
            changes["epochs"] = epochs.model_copy(update={"value": epochs.value + n})
        elif isinstance(epochs, Categorical):
            changes["epochs"] = epochs.model_copy(update={"options": [o + n for o in epochs.options]})
        else:
            changes["epochs"] = epochs.model_copy(update={"lo": epochs.lo + n, "hi": epochs.hi + n})
    return space.replace(**changes) if changes else space


@dataclass(eq=False)
class SearchResult:
    best: Optional[TrialRecord]
    records: List[TrialRecord]
    spaces: List[ParamSpace] = field(default_factory=list)    # space of every stage

    @property
    def final_space(self) -> ParamSpace:
        return self.spaces[-1]


def search(
    space: ParamSpace,
    objective: Objective,
    config: SearchConfig,
    run_log: Optional[RunLog] = None,
    jobs: int = 1,
) -> SearchResult:
    """
    Run exactly config.budget trials.

    Random draws every trial independently. SurrogateGuided starts with
    random draws and then, with probability 1 - explore_rate, resamples each
    dimension from the top-quantile trials. With jobs > 1 a batch of `jobs`
    configs is proposed from the completed trials and evaluated
    concurrently; records keep proposal order.

    Raises:
        UnsatisfiableConstraints: If the space admits no coherent config
    """
    run_log = run_log or RunLog()
    rng = np.random.default_rng(config.seed)
    stages = config.schedule.stages if config.schedule else [Stage(budget=config.budget)]
    records: List[TrialRecord] = []
    spaces: List[ParamSpace] = []
    seen: set = set()
    n_initial = max(2, math.ceil(config.budget * config.explore_rate))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for stage_index, stage in enumerate(stages):
            if stage_index:
                space = advance_stage(space, stage_trials, stage, config.top_quantile)
                logger.info("Stage %d: %d frozen dimensions", stage_index + 1, len(space.frozen()))
            elif stage.lr_factor != 1.0 or stage.epoch_increment:
                space = advance_stage(space, [], stage, config.top_quantile)
            spaces.append(space)
            stage_trials: List[TrialRecord] = []
            remaining = stage.budget
            while remaining:
                batch = []
                for _ in range(min(max(1, jobs), remaining)):
                    guided = (
                        config.strategy == "surrogate_guided"
                        and len(records) >= n_initial
                        and sum(r.status == "ok" for r in records) >= 2
                        and rng.random() >= config.explore_rate
                    )
                    if guided:
                        candidate = _propose_guided(space, records, rng, config, seen)
                    else:
                        candidate = sample(space, rng, config.constraints)
                    seen.add(_key(candidate))
                    trial_id = len(records) + len(batch)
                    batch.append((trial_id, candidate))
                futures = [
                    pool.submit(run_trial, candidate, objective, config.seed + trial_id, trial_id, stage_index)
                    for trial_id, candidate in batch
                ]
                for future in futures:
                    record = future.result()
                    run_log.append(record)
                    records.append(record)
                    stage_trials.append(record)
                remaining -= len(batch)

    ok = [r for r in records if r.status == "ok"]
    best = top_trials(ok, 0.0)[0] if ok else None
    if best is None:
        logger.warning("All %d trials failed", len(records))
    return SearchResult(best=best, records=records, spaces=spaces)
