"""Compute budgeting: memory-adjusted step costs and per-task step allocation.

Every training loop in the simulator is gated by these numbers: a method's
per-step cost in GFLOPs is scaled by a memory multiplier (peak device memory
relative to full finetuning), and the per-task budget divided by that
memory-adjusted cost fixes the number of gradient steps the method may take.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

BATCH_SIZE = 512
TOTAL_BUDGET_GFLOPS = 1.8e9
MULTIPLIER_DECIMALS = 4
REFERENCE_METHOD = "full-ft"


class BudgetError(ValueError):
    """Invalid cost inputs (non-positive memory, zero step cost, ...)."""


@dataclass(frozen=True)
class MethodCost:
    """Raw cost of one gradient step at the reference batch size.

    ``quoted_multiplier`` carries the multiplier exactly as published in the
    source cost table, when one is available.  Published tables round the
    ratio to four decimals (not always consistently), so the quoted value is
    preferred over a recomputation when reproducing published arithmetic.
    """

    name: str
    per_step_gflops: float
    peak_memory_gb: float
    reference_memory_gb: float
    quoted_multiplier: float | None = None

    def __post_init__(self) -> None:
        for attr in ("per_step_gflops", "peak_memory_gb", "reference_memory_gb"):
            value = getattr(self, attr)
            if not math.isfinite(value) or value <= 0:
                raise BudgetError(f"{self.name}: {attr} must be positive, got {value}")


@dataclass(frozen=True)
class MethodBudget:
    """Derived step allocation for one method under a fixed total budget."""

    method: str
    memory_multiplier: float
    maf_per_step: float
    steps_per_task: int
    num_tasks: int
    batch_size: int
    total_steps: int = field(init=False)
    total_samples: int = field(init=False)

    def __post_init__(self) -> None:
        if self.steps_per_task < 0:
            raise BudgetError("steps_per_task must be non-negative")
        object.__setattr__(self, "total_steps", self.steps_per_task * self.num_tasks)
        object.__setattr__(self, "total_samples", self.total_steps * self.batch_size)


def memory_multiplier(cost: MethodCost) -> float:
    """Exact ratio of the method's peak memory to the full-finetuning peak."""
    if cost.reference_memory_gb <= 0 or cost.peak_memory_gb <= 0:
        raise BudgetError("memory figures must be positive")
    return cost.peak_memory_gb / cost.reference_memory_gb


def effective_multiplier(cost: MethodCost, decimals: int | None = MULTIPLIER_DECIMALS) -> float:
    """Multiplier used in cost products: quoted when available, else the
    ratio rounded to ``decimals`` (None keeps full precision)."""
    if cost.quoted_multiplier is not None:
        return cost.quoted_multiplier
    ratio = memory_multiplier(cost)
    return ratio if decimals is None else round(ratio, decimals)


def maf_per_step(cost: MethodCost, decimals: int | None = MULTIPLIER_DECIMALS) -> float:
    """Memory-adjusted GFLOPs of one gradient step."""
    return cost.per_step_gflops * effective_multiplier(cost, decimals)


def steps_per_task(total_budget_gflops: float, num_tasks: int, maf: float) -> int:
    """Gradient steps affordable per task: floor((budget / T) / maf).

    Floor is conservative (a task never exceeds its share of the budget);
    published tables are reproduced within +/-1 step.
    """
    if maf <= 0 or not math.isfinite(maf):
        raise BudgetError(f"maf must be positive, got {maf}")
    if num_tasks < 1:
        raise BudgetError("num_tasks must be >= 1")
    if total_budget_gflops < 0:
        raise BudgetError("budget must be non-negative")
    return int(math.floor((total_budget_gflops / num_tasks) / maf))


def total_samples(steps_per_task: int, num_tasks: int, batch_size: int) -> int:
    if steps_per_task < 0 or num_tasks < 1 or batch_size < 1:
        raise BudgetError("total_samples arguments must be positive")
    return steps_per_task * num_tasks * batch_size


def plan_budget(
    cost: MethodCost,
    total_budget_gflops: float = TOTAL_BUDGET_GFLOPS,
    num_tasks: int = 20,
    batch_size: int = BATCH_SIZE,
    steps_override: int | None = None,
) -> MethodBudget:
    """Full budget derivation for one method; ``steps_override`` pins the
    per-task step count regardless of the budget arithmetic."""
    mult = effective_multiplier(cost)
    maf = cost.per_step_gflops * mult
    steps = steps_per_task(total_budget_gflops, num_tasks, maf)
    if steps_override is not None:
        steps = steps_override
    return MethodBudget(
        method=cost.name,
        memory_multiplier=mult,
        maf_per_step=maf,
        steps_per_task=steps,
        num_tasks=num_tasks,
        batch_size=batch_size,
    )


@dataclass(frozen=True)
class PublishedRow:
    """Reference values published next to the raw costs, for golden checks."""

    multiplier: float
    maf_per_step: float
    steps: dict[int, int]
    total_steps: int
    total_samples: int


@dataclass
class CostTable:
    costs: dict[str, MethodCost]
    published: dict[str, PublishedRow]

    def cost(self, name: str) -> MethodCost:
        try:
            return self.costs[name]
        except KeyError:
            raise BudgetError(f"unknown cost row {name!r}; have {sorted(self.costs)}") from None

    def names(self) -> list[str]:
        return list(self.costs)


def bundled_cost_path() -> Path:
    return Path(str(resources.files("cpsim").joinpath("data/method_costs.csv")))


def load_cost_table(path: str | Path | None = None) -> CostTable:
    """Parse a cost-table CSV.

    Required columns: method, per_step_gflops, peak_memory_gb.  The reference
    memory is taken from the ``full-ft`` row.  Optional columns (multiplier,
    maf_per_step, steps_t{20,50,100,200}, total_steps, total_samples) are kept
    as published reference values.
    """
    path = Path(path) if path is not None else bundled_cost_path()
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        return CostTable(costs={}, published={})
    for required in ("method", "per_step_gflops", "peak_memory_gb"):
        if required not in rows[0]:
            raise BudgetError(f"cost table missing column {required!r}")
    by_name = {row["method"]: row for row in rows}
    if REFERENCE_METHOD not in by_name:
        raise BudgetError(f"cost table needs a {REFERENCE_METHOD!r} reference row")
    ref_memory = float(by_name[REFERENCE_METHOD]["peak_memory_gb"])

    costs: dict[str, MethodCost] = {}
    published: dict[str, PublishedRow] = {}
    for row in rows:
        name = row["method"]
        quoted = row.get("multiplier")
        costs[name] = MethodCost(
            name=name,
            per_step_gflops=float(row["per_step_gflops"]),
            peak_memory_gb=float(row["peak_memory_gb"]),
            reference_memory_gb=ref_memory,
            quoted_multiplier=float(quoted) if quoted else None,
        )
        if row.get("maf_per_step"):
            published[name] = PublishedRow(
                multiplier=float(row["multiplier"]),
                maf_per_step=float(row["maf_per_step"]),
                steps={t: int(row[f"steps_t{t}"]) for t in (20, 50, 100, 200) if row.get(f"steps_t{t}")},
                total_steps=int(row.get("total_steps") or 0),
                total_samples=int(row.get("total_samples") or 0),
            )
    return CostTable(costs=costs, published=published)


def cost_row_name(kind: str, rank: int | None = None) -> str:
    """Map a method kind (plus adapter rank) to its cost-table row name."""
    if kind in ("lora", "vera", "dora"):
        if rank is None:
            raise BudgetError(f"{kind} needs a rank to pick a cost row")
        return f"{kind}_r{rank}"
    return kind
