"""Update-cycle orchestration: reveal tasks, train within budget, merge,
replay, and track knowledge accumulation / zero-shot retention.

One run is fully described by a RunConfig and a seed; identical configs
produce bitwise-identical trajectories.  Data generation, stream ordering,
batch sampling, and method-internal randomness (Fisher batches, adapter
reinits) draw from independently spawned RNG streams so that changing one
never perturbs the others.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import budget as budget_mod
from . import model, streams
from .methods import MERGE_KINDS, MethodConfig, UpdateMethod
from .mixture import Buffer, MixtureRatios, Pool, preset_ratios, sample_batch
from .schedules import COSINE, RSQRT, KINDS as SCHEDULE_KINDS, VARIANTS, MetaState, ScheduleParams, meta_lr
from .synth import DataConfig, ToyInstance, build_instance


class EngineError(RuntimeError):
    """Run-time failures: non-finite losses, inconsistent configuration."""


class ConfigError(ValueError):
    """Schema violation; message carries the offending field path."""


@dataclass(frozen=True)
class StreamConfig:
    ordering: str = "random"
    reverse: bool = False

    def __post_init__(self) -> None:
        if self.ordering not in streams.ORDERING_KINDS:
            raise ConfigError(f"stream.ordering: unknown kind {self.ordering!r}")


@dataclass(frozen=True)
class MixtureSpec:
    """Either a named preset or explicit lambdas (which take precedence)."""

    preset: str = "reference"
    lambda_p: float | None = None
    lambda_d: float | None = None
    lambda_b: float | None = None

    def ratios(self) -> MixtureRatios:
        values = (self.lambda_p, self.lambda_d, self.lambda_b)
        if any(v is not None for v in values):
            if any(v is None for v in values):
                raise ConfigError("mixture.lambda_p/lambda_d/lambda_b: set all three or none")
            try:
                return MixtureRatios(*values)
            except ValueError as exc:
                raise ConfigError(f"mixture.lambda_p/lambda_d/lambda_b: {exc}") from None
        try:
            return preset_ratios(self.preset)
        except ValueError as exc:
            raise ConfigError(f"mixture.preset: {exc}") from None


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = COSINE
    meta_variant: str = "independent"
    warmup_frac: float = 0.1
    cool_frac: float = 0.1
    eta_min: float = 0.0
    rsqrt_continuous: bool = False

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule.kind: unknown kind {self.kind!r}")
        if self.meta_variant not in VARIANTS:
            raise ConfigError(f"schedule.meta_variant: unknown variant {self.meta_variant!r}")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("schedule.warmup_frac: must lie in (0, 1)")
        variant_kind = RSQRT if self.meta_variant.endswith("rsqrt") else (
            COSINE if self.meta_variant.endswith("cosine") else self.kind)
        if variant_kind != self.kind:
            raise ConfigError(
                f"schedule.meta_variant: {self.meta_variant!r} does not match kind {self.kind!r}")


@dataclass(frozen=True)
class BudgetConfig:
    total_gflops: float = budget_mod.TOTAL_BUDGET_GFLOPS
    num_tasks: int = 20
    cost_table: str | None = None
    cost_row: str | None = None
    steps_override: int | None = None
    charge_eval_gflops: float = 0.0

    def __post_init__(self) -> None:
        if self.num_tasks < 1:
            raise ConfigError("budget.num_tasks: must be >= 1")
        if self.total_gflops < 0:
            raise ConfigError("budget.total_gflops: must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    base_lr: float = 1e-5
    tau_init: float = 0.01
    clip_norm: float = 1.0
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clamp_tau: bool = True
    tau_min: float = model.TAU_MIN

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("train.base_lr: must be positive")
        if self.tau_init <= 0:
            raise ConfigError("train.tau_init: must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    mixture: MixtureSpec = field(default_factory=MixtureSpec)
    method: MethodConfig = field(default_factory=lambda: MethodConfig(kind="full-ft"))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {
    "data": DataConfig,
    "stream": StreamConfig,
    "mixture": MixtureSpec,
    "method": MethodConfig,
    "schedule": ScheduleConfig,
    "budget": BudgetConfig,
    "train": TrainConfig,
}


def config_from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from nested dicts, reporting errors by field path."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    kwargs: dict = {}
    for key, value in raw.items():
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError("seed: must be an integer")
            kwargs["seed"] = value
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"{key}: unknown config section")
        cls = _SECTIONS[key]
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: must be a mapping")
        names = {f.name for f in dataclasses.fields(cls)}
        for sub in value:
            if sub not in names:
                raise ConfigError(f"{key}.{sub}: unknown field")
        try:
            kwargs[key] = cls(**value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    config = RunConfig(**kwargs)
    config.mixture.ratios()  # surface ratio violations at load time
    if config.method.kind in MERGE_KINDS and not 0.0 < config.method.w_merge < 1.0:
        raise ConfigError("method.w_merge: must lie strictly between 0 and 1")
    return config


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


@dataclass(frozen=True)
class TaskRecord:
    """Metrics after one task (t=0 is the zero-shot baseline)."""

    t: int
    a_ka: float
    a_zs: float
    geo_mean: float
    steps: int
    mafs_spent: float
    samples_seen: int
    lr_start: float
    lr_peak: float
    lr_end: float


TRAJECTORY_COLUMNS = ("t", "a_ka", "a_zs", "geo_mean", "steps", "mafs_spent",
                      "samples_seen", "lr_start", "lr_peak", "lr_end")


@dataclass
class Trajectory:
    records: list[TaskRecord]

    @property
    def final(self) -> TaskRecord:
        return self.records[-1]

    @property
    def baseline(self) -> TaskRecord:
        return self.records[0]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]


def save_trajectory(trajectory: Trajectory, path: str | Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(TRAJECTORY_COLUMNS)
        for record in trajectory.records:
            writer.writerow([repr(getattr(record, c)) if isinstance(getattr(record, c), float)
                             else getattr(record, c) for c in TRAJECTORY_COLUMNS])


def load_trajectory(path: str | Path) -> Trajectory:
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    records = [
        TaskRecord(
            t=int(row["t"]), a_ka=float(row["a_ka"]), a_zs=float(row["a_zs"]),
            geo_mean=float(row["geo_mean"]), steps=int(row["steps"]),
            mafs_spent=float(row["mafs_spent"]), samples_seen=int(row["samples_seen"]),
            lr_start=float(row["lr_start"]), lr_peak=float(row["lr_peak"]),
            lr_end=float(row["lr_end"]),
        )
        for row in rows
    ]
    return Trajectory(records)


def per_concept_accuracy(params: model.ParamSet, prototypes: dict[str, np.ndarray],
                         images: np.ndarray, labels: list[str]) -> dict[str, float]:
    ids = sorted(prototypes)
    proto_embs = model.encode(params, "txt", np.stack([prototypes[c] for c in ids]))
    img_embs = model.encode(params, "img", images)
    pred = np.argmax(img_embs @ proto_embs.T, axis=1)
    index = {cid: i for i, cid in enumerate(ids)}
    hits: dict[str, list[bool]] = {}
    for p, label in zip(pred, labels):
        hits.setdefault(label, []).append(int(p) == index[label])
    return {cid: float(np.mean(h)) for cid, h in hits.items()}


def evaluate(params: model.ParamSet, instance: ToyInstance) -> tuple[float, float]:
    """(A_KA, A_ZS): mean per-concept accuracy over all adaptation concepts,
    and accuracy over the held-out concepts."""
    adapt_x, adapt_labels = instance.eval_adapt
    held_x, held_labels = instance.eval_heldout
    if adapt_x.shape[0] == 0 or held_x.shape[0] == 0:
        raise EngineError("empty evaluation set")
    acc_a = per_concept_accuracy(params, instance.adapt_prototypes(), adapt_x, adapt_labels)
    acc_z = per_concept_accuracy(params, instance.heldout_prototypes(), held_x, held_labels)
    a_ka = float(np.mean([acc_a[c] for c in sorted(acc_a)]))
    a_zs = float(np.mean([acc_z[c] for c in sorted(acc_z)]))
    return a_ka, a_zs


def build_stream_plan(config: RunConfig, instance: ToyInstance,
                      rng: np.random.Generator) -> streams.StreamPlan:
    """Materialize the configured ordering over the instance's concepts."""
    kind = config.stream.ordering
    seed = int(rng.integers(0, 2 ** 31 - 1))
    concepts = instance.concepts
    if kind == "random":
        ordering = streams.order_random(concepts, seed)
    elif kind == "frequency":
        ordering = streams.order_by_frequency({c.id: c.frequency for c in concepts})
    elif kind == "loss":
        scores = streams.score_concepts(
            instance.base_params, instance.concept_pools, instance.pretrain_pool,
            np.random.default_rng(seed),
            samples_per_concept=min(50, instance.config.samples_per_concept))
        for c in concepts:
            c.difficulty = scores[c.id]
        ordering = streams.order_by_loss(scores)
    elif kind == "similarity":
        ids = sorted(c.id for c in concepts)
        ordering = streams.order_by_similarity(ids, instance.similarity_matrix(ids))
    elif kind == "dataset":
        ordering = streams.order_dataset_incremental(concepts, seed)
    elif kind == "time":
        ordering = streams.order_time(concepts, seed)
    else:  # unreachable: StreamConfig validates
        raise EngineError(f"unknown ordering {kind!r}")
    if config.stream.reverse:
        ordering = ordering[::-1]
    return streams.chunk(ordering, config.budget.num_tasks, kind,
                         config.stream.reverse, seed)


def resolve_budget(config: RunConfig) -> budget_mod.MethodBudget:
    table = budget_mod.load_cost_table(config.budget.cost_table)
    row = config.budget.cost_row or budget_mod.cost_row_name(
        config.method.kind, config.method.rank)
    cost = table.cost(row)
    effective_total = config.budget.total_gflops
    if config.budget.charge_eval_gflops > 0:
        # one evaluation per task plus the baseline is billed against the cycle
        effective_total -= config.budget.charge_eval_gflops * (config.budget.num_tasks + 1)
        effective_total = max(0.0, effective_total)
    return budget_mod.plan_budget(
        cost,
        total_budget_gflops=effective_total,
        num_tasks=config.budget.num_tasks,
        batch_size=config.train.batch_size,
        steps_override=config.budget.steps_override,
    )


def _schedule_base(config: RunConfig, steps: int) -> ScheduleParams | None:
    if steps < 2:
        return None  # degenerate task: train at the peak rate
    n_warm = min(max(1, round(config.schedule.warmup_frac * steps)), steps - 1)
    n_cool = 0
    if config.schedule.kind == RSQRT:
        n_cool = min(max(1, round(config.schedule.cool_frac * steps)), steps - n_warm)
    return ScheduleParams(config.schedule.eta_min, config.train.base_lr,
                          n_warm, steps, n_cool)


def _spawn_rngs(seed: int) -> dict[str, np.random.Generator]:
    root = np.random.SeedSequence(seed)
    keys = ("data", "stream", "batch", "method")
    return {k: np.random.default_rng(s) for k, s in zip(keys, root.spawn(4))}


def _record(t, a_ka, a_zs, steps, mafs, samples, lrs) -> TaskRecord:
    lr_start, lr_peak, lr_end = lrs
    return TaskRecord(
        t=t, a_ka=a_ka, a_zs=a_zs, geo_mean=math.sqrt(a_ka * a_zs), steps=steps,
        mafs_spent=mafs, samples_seen=samples,
        lr_start=lr_start, lr_peak=lr_peak, lr_end=lr_end,
    )


def _train_segment(
    params: model.ParamSet,
    method: UpdateMethod,
    pools: tuple[Pool, Pool, Buffer],
    ratios: MixtureRatios,
    config: RunConfig,
    lr_of_step,
    steps: int,
    rng: np.random.Generator,
    forbidden_ids: frozenset[str],
) -> tuple[float, float, float]:
    """Run one task's gradient steps in place; returns (lr_start, peak, end)."""
    pretrain, update, buffer = pools
    train = config.train
    variables = method.trainable_variables(params)
    opt = model.OptimizerState.for_variables(
        variables, beta1=train.adam_beta1, beta2=train.adam_beta2,
        eps=train.adam_eps, weight_decay=train.weight_decay)
    lr_start = lr_peak = lr_end = 0.0
    for n in range(steps):
        lr = lr_of_step(n)
        batch = sample_batch(pretrain, update, buffer, ratios, train.batch_size, rng)
        if forbidden_ids and not forbidden_ids.isdisjoint(batch.concept_ids.tolist()):
            raise EngineError("held-out concept leaked into a training batch")
        loss, grads = model.grad(params, batch.image_features, batch.text_features, method)
        before = None
        if method.tracks_steps:
            before = {k: v.copy() for k, v in variables.items()}
        model.optimizer_step(variables, grads, opt, lr, train.clip_norm)
        model.clamp_temperature(params, train.tau_min, train.clamp_tau)
        if method.tracks_steps:
            delta = {k: variables[k] - before[k] for k in variables}
            method.on_step(grads, delta)
        lr_end = lr
        lr_peak = max(lr_peak, lr)
        if n == 0:
            lr_start = lr
    return lr_start, lr_peak, lr_end


def run_stream(config: RunConfig, collect: dict | None = None) -> Trajectory:
    """Execute the full update cycle described by ``config``.

    ``collect``, when given, is populated with the final parameters, the toy
    instance, the stream plan, the method state, and the budget, for callers
    that export artifacts beyond the trajectory.
    """
    rngs = _spawn_rngs(config.seed)
    instance = build_instance(config.data, rngs["data"])
    plan = build_stream_plan(config, instance, rngs["stream"])
    run_budget = resolve_budget(config)
    steps = run_budget.steps_per_task

    params = instance.base_params.copy()
    params.set_tau(config.train.tau_init)
    theta0 = params.copy()
    method = UpdateMethod(config.method, params, rngs["method"])
    ratios = config.mixture.ratios()
    buffer = Buffer(instance.config.d_in)
    forbidden = frozenset(instance.heldout_ids)

    base = _schedule_base(config, steps)
    lengths = tuple(steps for _ in range(config.budget.num_tasks))
    warmups = tuple((base.n_warm if base else 1) for _ in range(config.budget.num_tasks))

    a_ka, a_zs = evaluate(params, instance)
    records = [_record(0, a_ka, a_zs, 0, 0.0, 0, (0.0, 0.0, 0.0))]
    mafs_spent = 0.0
    samples_seen = 0

    for t, task_ids in enumerate(plan.tasks, start=1):
        update_pool = instance.task_pool(task_ids)
        train_params = method.begin_task(params, theta0)
        lrs = (0.0, 0.0, 0.0)
        if steps > 0:
            if base is None:
                lr_of_step = lambda n: config.train.base_lr
            else:
                meta = MetaState(t, lengths, warmups, config.schedule.meta_variant,
                                 base_kind=config.schedule.kind)
                lr_of_step = lambda n, _m=meta: meta_lr(_m, n, base)
            lrs = _train_segment(
                train_params, method, (instance.pretrain_pool, update_pool, buffer),
                ratios, config, lr_of_step, steps, rngs["batch"], forbidden)
        params = method.end_task(train_params, params, theta0, update_pool,
                                 config.train.batch_size)
        buffer.add(update_pool)
        mafs_spent += steps * run_budget.maf_per_step
        samples_seen += steps * config.train.batch_size
        a_ka, a_zs = evaluate(params, instance)
        records.append(_record(t, a_ka, a_zs, steps, mafs_spent, samples_seen, lrs))

    if collect is not None:
        collect.update(params=params, instance=instance, plan=plan,
                       method=method, budget=run_budget, buffer=buffer)
    return Trajectory(records)


def joint_upper_bound(config: RunConfig) -> Trajectory:
    """Train once on the shuffled union of all task pools with the whole
    cycle's budget; the single record is the adaptation upper bound."""
    rngs = _spawn_rngs(config.seed)
    instance = build_instance(config.data, rngs["data"])
    run_budget = resolve_budget(config)
    if config.budget.steps_override is not None:
        total_steps = config.budget.steps_override * config.budget.num_tasks
    else:
        total_steps = budget_mod.steps_per_task(
            config.budget.total_gflops, 1, run_budget.maf_per_step)

    params = instance.base_params.copy()
    params.set_tau(config.train.tau_init)
    method = UpdateMethod(MethodConfig(kind="full-ft"), params, rngs["method"])
    union = instance.task_pool(instance.adapt_ids)
    ratios = MixtureRatios(0.0, 1.0, 0.0)
    buffer = Buffer(instance.config.d_in)

    lrs = (0.0, 0.0, 0.0)
    joint_config = dataclasses.replace(config, method=MethodConfig(kind="full-ft"))
    base = _schedule_base(joint_config, total_steps)
    if total_steps > 0:
        if base is None:
            lr_of_step = lambda n: config.train.base_lr
        else:
            meta = MetaState(1, (total_steps,), (base.n_warm,), "independent",
                             base_kind=config.schedule.kind)
            lr_of_step = lambda n: meta_lr(meta, n, base)
        lrs = _train_segment(
            params, method, (instance.pretrain_pool, union, buffer), ratios,
            joint_config, lr_of_step, total_steps, rngs["batch"],
            frozenset(instance.heldout_ids))
    a_ka, a_zs = evaluate(params, instance)
    record = _record(config.budget.num_tasks, a_ka, a_zs, total_steps,
                     total_steps * run_budget.maf_per_step,
                     total_steps * config.train.batch_size, lrs)
    return Trajectory([record])
