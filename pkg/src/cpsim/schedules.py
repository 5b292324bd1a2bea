"""Per-task learning-rate schedules and task-level meta-schedules.

Two within-task shapes are supported: cosine decay with linear warmup, and a
reciprocal-square-root decay with linear warmup and a final linear cooldown.
Meta-schedules modulate the peak (and optionally the post-warmup shape) of
each task's schedule from a hypothetical schedule extended over all tasks
seen so far, so that later tasks train at progressively lower rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

COSINE = "cosine"
RSQRT = "rsqrt"
KINDS = (COSINE, RSQRT)

VARIANTS = (
    "independent",
    "autoregressive-cosine",
    "continued-dynamic-cosine",
    "autoregressive-rsqrt",
    "continued-dynamic-rsqrt",
    "peaks-match-rsqrt",
)


class ScheduleError(ValueError):
    """Out-of-range step or inconsistent schedule parameters."""


@dataclass(frozen=True)
class ScheduleParams:
    """Parameters of one within-task schedule.

    ``n_cool`` is only meaningful for the rsqrt shape (length of the final
    linear cooldown).
    """

    eta_min: float
    eta_max: float
    n_warm: int
    n_task: int
    n_cool: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.eta_min < self.eta_max:
            raise ScheduleError(f"need 0 <= eta_min < eta_max, got ({self.eta_min}, {self.eta_max})")
        if not 0 < self.n_warm < self.n_task:
            raise ScheduleError(f"need 0 < n_warm < n_task, got ({self.n_warm}, {self.n_task})")
        if not 0 <= self.n_cool <= self.n_task - self.n_warm:
            raise ScheduleError(f"n_cool {self.n_cool} out of range for task of {self.n_task}")


def _check_step(n: int, p: ScheduleParams) -> None:
    if not 0 <= n <= p.n_task:
        raise ScheduleError(f"step {n} outside [0, {p.n_task}]")


def _warmup(n: int, p: ScheduleParams, peak: float) -> float:
    return p.eta_min + (n / p.n_warm) * (peak - p.eta_min)


def cosine_lr(n: int, p: ScheduleParams) -> float:
    """Linear warmup to eta_max, then cosine decay to eta_min at n_task."""
    _check_step(n, p)
    if n < p.n_warm:
        return _warmup(n, p, p.eta_max)
    frac = (n - p.n_warm) / (p.n_task - p.n_warm)
    return p.eta_min + 0.5 * (p.eta_max - p.eta_min) * (1.0 + math.cos(math.pi * frac))


def rsqrt_lr(n: int, p: ScheduleParams, continuous_decay: bool = False) -> float:
    """Linear warmup, reciprocal-sqrt decay, then linear cooldown to zero.

    The decay branch is eta_max * sqrt(n_warm) / sqrt(n + n_warm), which drops
    to eta_max/sqrt(2) right at the end of warmup.  ``continuous_decay``
    switches to sqrt(n_warm)/sqrt(max(n, n_warm)) which joins the warmup
    continuously; off by default.  The cooldown spans exactly the final
    n_cool steps and reaches zero at n = n_task.
    """
    _check_step(n, p)
    if p.n_cool < 1:
        raise ScheduleError("rsqrt schedule needs n_cool >= 1")
    if n < p.n_warm:
        return _warmup(n, p, p.eta_max)

    def decay(step: int) -> float:
        if continuous_decay:
            return p.eta_max * math.sqrt(p.n_warm) / math.sqrt(max(step, p.n_warm))
        return p.eta_max * math.sqrt(p.n_warm) / math.sqrt(step + p.n_warm)

    cool_start = p.n_task - p.n_cool
    if n <= cool_start:
        return decay(n)
    return decay(cool_start) * (p.n_task - n) / p.n_cool


def schedule_lr(kind: str, n: int, p: ScheduleParams, continuous_decay: bool = False) -> float:
    if kind == COSINE:
        return cosine_lr(n, p)
    if kind == RSQRT:
        return rsqrt_lr(n, p, continuous_decay)
    raise ScheduleError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class MetaState:
    """Position of the current task inside the update cycle.

    ``per_task_lengths``/``per_task_warmups`` must cover at least
    ``task_index`` (1-based) entries.  ``base_kind`` selects the within-task
    family for the ``independent`` variant; the meta variants imply theirs.
    """

    task_index: int
    per_task_lengths: tuple[int, ...]
    per_task_warmups: tuple[int, ...]
    variant: str
    base_kind: str = COSINE

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ScheduleError(f"unknown meta variant {self.variant!r}")
        if self.task_index < 1:
            raise ScheduleError("task_index is 1-based")
        if len(self.per_task_lengths) < self.task_index or len(self.per_task_warmups) < self.task_index:
            raise ScheduleError("length/warmup sequences shorter than task_index")
        if any(length < 1 for length in self.per_task_lengths):
            raise ScheduleError("task lengths must be positive")

    @property
    def family(self) -> str:
        if self.variant == "independent":
            return self.base_kind
        return RSQRT if self.variant.endswith("rsqrt") else COSINE


def _cool_frac(base: ScheduleParams) -> float:
    return base.n_cool / base.n_task


def _task_params(meta: MetaState, base: ScheduleParams) -> ScheduleParams:
    n_task = meta.per_task_lengths[meta.task_index - 1]
    n_warm = meta.per_task_warmups[meta.task_index - 1]
    n_cool = max(1, round(_cool_frac(base) * n_task)) if meta.family == RSQRT else 0
    return ScheduleParams(base.eta_min, base.eta_max, n_warm, n_task, n_cool)


def _hypothetical_params(meta: MetaState, base: ScheduleParams) -> ScheduleParams:
    """The base schedule stretched over every task seen so far, keeping the
    current task's warmup and the configured cooldown fraction."""
    total = sum(meta.per_task_lengths[: meta.task_index])
    n_warm = meta.per_task_warmups[meta.task_index - 1]
    n_cool = max(1, round(_cool_frac(base) * total)) if meta.family == RSQRT else 0
    return ScheduleParams(base.eta_min, base.eta_max, n_warm, total, n_cool)


def meta_peak(meta: MetaState, base: ScheduleParams) -> float:
    """Peak learning rate for the current task.

    Evaluates the hypothetical extended schedule at the point where the
    current task's warmup ends (its warmup length plus all previous task
    steps).  Task 1 has no history and peaks at the base eta_max.
    """
    if meta.variant == "independent":
        raise ScheduleError("independent variant has no meta peak")
    if meta.task_index == 1:
        return base.eta_max
    offset = sum(meta.per_task_lengths[: meta.task_index - 1])
    n_prime = meta.per_task_warmups[meta.task_index - 1] + offset
    return schedule_lr(meta.family, n_prime, _hypothetical_params(meta, base))


def meta_lr(meta: MetaState, n: int, base: ScheduleParams) -> float:
    """Learning rate at task-local step ``n`` under the configured variant."""
    params = _task_params(meta, base)
    _check_step(n, params)
    if meta.variant == "independent":
        return schedule_lr(meta.family, n, params)

    peak = meta_peak(meta, base)
    if meta.variant in ("autoregressive-cosine", "autoregressive-rsqrt", "peaks-match-rsqrt"):
        # peaks-match-rsqrt coincides with autoregressive-rsqrt here: the
        # continued-dynamic value at warmup end is exactly the meta peak.
        if peak <= params.eta_min:
            raise ScheduleError("meta peak decayed to eta_min; shorten the cycle or lower eta_min")
        return schedule_lr(meta.family, n, replace(params, eta_max=peak))

    # continued-dynamic: rewarm to the peak, then follow the hypothetical
    # extended schedule at the matching global offset.
    if n < params.n_warm:
        return params.eta_min + (n / params.n_warm) * (peak - params.eta_min)
    offset = sum(meta.per_task_lengths[: meta.task_index - 1])
    return schedule_lr(meta.family, n + offset, _hypothetical_params(meta, base))


def cycle_curve(
    variant: str,
    base: ScheduleParams,
    num_tasks: int,
    base_kind: str = COSINE,
    per_task_lengths: tuple[int, ...] | None = None,
    per_task_warmups: tuple[int, ...] | None = None,
):
    """Yield (global_step, task_index, local_step, lr) over a whole cycle."""
    lengths = per_task_lengths or tuple(base.n_task for _ in range(num_tasks))
    warmups = per_task_warmups or tuple(base.n_warm for _ in range(num_tasks))
    global_step = 0
    for t in range(1, num_tasks + 1):
        meta = MetaState(t, lengths, warmups, variant, base_kind)
        for n in range(lengths[t - 1]):
            yield global_step, t, n, meta_lr(meta, n, base)
            global_step += 1
