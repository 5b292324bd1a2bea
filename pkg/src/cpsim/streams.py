"""Concept orderings and their partition into disjoint task pools.

Six orderings are supported: by scored difficulty, by corpus frequency, by
greedy similarity chaining, by year, dataset-incremental, and random.  Every
ordering is a deterministic function of the concept inventory and a seed, and
can be reversed.  ``chunk`` splits an ordering into contiguous, near-equal,
disjoint task pools.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORDERING_KINDS = ("random", "loss", "frequency", "similarity", "dataset", "time")


class StreamError(ValueError):
    """Invalid inventory or ordering inputs."""


@dataclass
class Concept:
    """One unit of the update stream: an id plus ordering metadata."""

    id: str
    dataset_id: str = "ds00"
    year: int = 2020
    frequency: float = 0.0
    difficulty: float | None = None


@dataclass(frozen=True)
class StreamPlan:
    """An ordering of concept ids chunked into disjoint task pools."""

    ordering: tuple[str, ...]
    tasks: tuple[tuple[str, ...], ...]
    ordering_kind: str
    reversed: bool = False
    seed: int | None = None

    def __post_init__(self) -> None:
        flat = [cid for task in self.tasks for cid in task]
        if flat != list(self.ordering):
            raise StreamError("tasks must concatenate to the ordering")
        if len(set(flat)) != len(flat):
            raise StreamError("task pools must be disjoint")


def _canonical(ids: list[str]) -> list[str]:
    if not ids:
        raise StreamError("empty concept inventory")
    if len(set(ids)) != len(ids):
        raise StreamError("concept ids must be unique")
    return sorted(ids)


def order_random(concepts: list[Concept], seed: int) -> list[str]:
    """Uniformly random permutation, deterministic per seed."""
    ids = _canonical([c.id for c in concepts])
    rng = np.random.default_rng(seed)
    return [ids[i] for i in rng.permutation(len(ids))]


def score_concepts(
    params,
    concept_pools: dict,
    pretrain_pool,
    rng: np.random.Generator,
    samples_per_concept: int = 50,
    contrast_samples: int = 50,
) -> dict[str, float]:
    """Mean per-sample contrastive loss per concept under a model.

    Each concept is scored on ``samples_per_concept`` of its own pairs batched
    together with ``contrast_samples`` pretraining pairs; lower means easier.
    """
    from . import model  # local import: streams stays importable without kernels

    scores: dict[str, float] = {}
    for cid in sorted(concept_pools):
        pool = concept_pools[cid]
        if len(pool) < samples_per_concept:
            raise StreamError(
                f"concept {cid} has {len(pool)} samples, need {samples_per_concept}")
        own = rng.choice(len(pool), size=samples_per_concept, replace=False)
        Xi = pool.image_features[own]
        Xt = pool.text_features[own]
        if contrast_samples > 0 and len(pretrain_pool) > 0:
            extra = rng.integers(0, len(pretrain_pool), size=contrast_samples)
            Xi = np.concatenate([Xi, pretrain_pool.image_features[extra]])
            Xt = np.concatenate([Xt, pretrain_pool.text_features[extra]])
        _, per_sample = model.batch_loss(params, Xi, Xt)
        scores[cid] = float(np.mean(per_sample[:samples_per_concept]))
    return scores


def order_by_loss(difficulty: dict[str, float], reverse: bool = False) -> list[str]:
    """Ascending mean contrastive loss (easy concepts first); ties by id."""
    if not difficulty:
        raise StreamError("empty difficulty map")
    if any(v is None for v in difficulty.values()):
        raise StreamError("missing difficulty scores")
    ordered = [cid for cid, _ in sorted(difficulty.items(), key=lambda kv: (kv[1], kv[0]))]
    return ordered[::-1] if reverse else ordered


def order_by_frequency(frequency: dict[str, float], reverse: bool = False) -> list[str]:
    """Ascending corpus frequency (long-tail concepts first); ties by id."""
    if not frequency:
        raise StreamError("empty frequency map")
    ordered = [cid for cid, _ in sorted(frequency.items(), key=lambda kv: (kv[1], kv[0]))]
    return ordered[::-1] if reverse else ordered


def order_by_similarity(ids: list[str], similarity: np.ndarray) -> list[str]:
    """Greedy nearest-neighbour chain with the best starting concept.

    From each start, repeatedly hop to the most similar unvisited concept
    (ties to the lower index); keep the path with the smallest total distance
    where distance = 1 - similarity.  A heuristic, not the optimal path.
    """
    ids = list(ids)
    n = len(ids)
    sim = np.asarray(similarity, dtype=float)
    if sim.shape != (n, n):
        raise StreamError(f"similarity must be {n}x{n}, got {sim.shape}")
    if not np.allclose(sim, sim.T, atol=1e-8):
        raise StreamError("similarity matrix must be symmetric")
    if sim.min() < -1 - 1e-9 or sim.max() > 1 + 1e-9:
        raise StreamError("similarity entries must lie in [-1, 1]")
    if n == 1:
        return ids

    best_path: list[int] | None = None
    best_dist = np.inf
    for start in range(n):
        visited = np.zeros(n, dtype=bool)
        path = [start]
        visited[start] = True
        dist = 0.0
        cur = start
        for _ in range(n - 1):
            cand = np.where(~visited)[0]
            nxt = cand[int(np.argmax(sim[cur, cand]))]  # argmax takes lowest index on ties
            dist += 1.0 - sim[cur, nxt]
            visited[nxt] = True
            path.append(int(nxt))
            cur = nxt
        if dist < best_dist - 1e-12:
            best_dist = dist
            best_path = path
    assert best_path is not None
    return [ids[i] for i in best_path]


def order_dataset_incremental(concepts: list[Concept], seed: int) -> list[str]:
    """Datasets in seeded random order, concepts shuffled within each."""
    if not concepts:
        raise StreamError("empty concept inventory")
    rng = np.random.default_rng(seed)
    groups: dict[str, list[str]] = {}
    for c in concepts:
        groups.setdefault(c.dataset_id, []).append(c.id)
    dataset_ids = sorted(groups)
    ordering: list[str] = []
    for d in rng.permutation(len(dataset_ids)):
        members = sorted(groups[dataset_ids[d]])
        ordering.extend(members[i] for i in rng.permutation(len(members)))
    return ordering


def order_time(concepts: list[Concept], seed: int) -> list[str]:
    """Year groups from oldest to newest, random order within a year."""
    if not concepts:
        raise StreamError("empty concept inventory")
    if any(c.year is None for c in concepts):
        raise StreamError("missing year information")
    rng = np.random.default_rng(seed)
    by_year: dict[int, list[str]] = {}
    for c in concepts:
        by_year.setdefault(int(c.year), []).append(c.id)
    ordering: list[str] = []
    for year in sorted(by_year):
        members = sorted(by_year[year])
        ordering.extend(members[i] for i in rng.permutation(len(members)))
    return ordering


def chunk(ordering: list[str], num_tasks: int, kind: str = "random",
          reverse: bool = False, seed: int | None = None) -> StreamPlan:
    """Contiguous near-equal partition; earlier tasks take the remainder."""
    n = len(ordering)
    if num_tasks < 1 or num_tasks > n:
        raise StreamError(f"num_tasks must be in [1, {n}], got {num_tasks}")
    base, extra = divmod(n, num_tasks)
    tasks: list[tuple[str, ...]] = []
    pos = 0
    for t in range(num_tasks):
        size = base + (1 if t < extra else 0)
        tasks.append(tuple(ordering[pos:pos + size]))
        pos += size
    return StreamPlan(
        ordering=tuple(ordering),
        tasks=tuple(tasks),
        ordering_kind=kind,
        reversed=reverse,
        seed=seed,
    )


def save_manifest(plan: StreamPlan, path: str | Path) -> None:
    payload = {
        "ordering_kind": plan.ordering_kind,
        "reversed": plan.reversed,
        "seed": plan.seed,
        "num_tasks": len(plan.tasks),
        "tasks": [list(task) for task in plan.tasks],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_manifest(path: str | Path) -> StreamPlan:
    payload = json.loads(Path(path).read_text())
    tasks = tuple(tuple(task) for task in payload["tasks"])
    ordering = tuple(cid for task in tasks for cid in task)
    return StreamPlan(
        ordering=ordering,
        tasks=tasks,
        ordering_kind=payload["ordering_kind"],
        reversed=payload.get("reversed", False),
        seed=payload.get("seed"),
    )
