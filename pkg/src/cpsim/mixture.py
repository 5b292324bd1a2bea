"""Data pools and per-batch mixing between pretraining, update, and buffer.

Batches mix three sources with configured ratios.  Per-source counts are
allocated deterministically by largest remainder so batch composition is
exactly testable; randomness only decides which rows fill each quota.  When
the buffer holds fewer samples than its quota, the shortfall moves to the
current update pool.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

POOL_TAGS = ("pretrain", "update", "buffer")

RATIO_PRESETS = {
    "reference": (0.33, 0.34, 0.33),
    "no-buffer": (0.5, 0.5, 0.0),
    "pretrain-heavy": (0.8, 0.1, 0.1),
    "ibrahim": (0.05, 0.48, 0.47),
    "iidify": (0.0, 0.1, 0.9),
}


class MixtureError(ValueError):
    """Invalid ratios, empty mandatory pools, or malformed batches."""


@dataclass(frozen=True)
class Sample:
    """One image-text feature pair tagged with its concept and source pool."""

    image_features: np.ndarray
    text_features: np.ndarray
    concept_id: str
    pool_tag: str


@dataclass(frozen=True)
class MixtureRatios:
    """Fractions (pretrain, update, buffer) of every training batch."""

    lambda_p: float
    lambda_d: float
    lambda_b: float

    def __post_init__(self) -> None:
        for name, value in (("lambda_p", self.lambda_p), ("lambda_d", self.lambda_d),
                            ("lambda_b", self.lambda_b)):
            if not 0.0 <= value <= 1.0:
                raise MixtureError(f"{name} must lie in [0, 1], got {value}")
        total = self.lambda_p + self.lambda_d + self.lambda_b
        if abs(total - 1.0) > 1e-9:
            raise MixtureError(f"ratios must sum to 1, got {total}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lambda_p, self.lambda_d, self.lambda_b)


def preset_ratios(name: str) -> MixtureRatios:
    try:
        return MixtureRatios(*RATIO_PRESETS[name])
    except KeyError:
        raise MixtureError(f"unknown mixture preset {name!r}; have {sorted(RATIO_PRESETS)}") from None


class Pool:
    """Array-backed collection of image-text feature pairs."""

    def __init__(self, image_features: np.ndarray, text_features: np.ndarray,
                 concept_ids: np.ndarray, tag: str):
        if tag not in POOL_TAGS:
            raise MixtureError(f"unknown pool tag {tag!r}")
        image_features = np.asarray(image_features, dtype=float)
        text_features = np.asarray(text_features, dtype=float)
        concept_ids = np.asarray(concept_ids, dtype=object)
        if image_features.shape != text_features.shape:
            raise MixtureError("image/text feature shapes differ")
        if image_features.shape[0] != concept_ids.shape[0]:
            raise MixtureError("feature/concept-id lengths differ")
        if image_features.size and not np.all(np.isfinite(image_features)):
            raise MixtureError("non-finite image features")
        if text_features.size and not np.all(np.isfinite(text_features)):
            raise MixtureError("non-finite text features")
        self.image_features = image_features
        self.text_features = text_features
        self.concept_ids = concept_ids
        self.tag = tag

    @classmethod
    def empty(cls, dim: int, tag: str) -> "Pool":
        return cls(np.empty((0, dim)), np.empty((0, dim)), np.empty(0, dtype=object), tag)

    @classmethod
    def concat(cls, pools: list["Pool"], tag: str | None = None) -> "Pool":
        if not pools:
            raise MixtureError("nothing to concatenate")
        tag = tag or pools[0].tag
        return cls(
            np.concatenate([p.image_features for p in pools]),
            np.concatenate([p.text_features for p in pools]),
            np.concatenate([p.concept_ids for p in pools]),
            tag,
        )

    def __len__(self) -> int:
        return self.image_features.shape[0]

    @property
    def dim(self) -> int:
        return self.image_features.shape[1]

    def take(self, indices: np.ndarray, tag: str | None = None):
        return (
            self.image_features[indices],
            self.text_features[indices],
            self.concept_ids[indices],
            np.full(len(indices), tag or self.tag, dtype=object),
        )

    def samples(self) -> list[Sample]:
        return [
            Sample(self.image_features[i], self.text_features[i],
                   str(self.concept_ids[i]), self.tag)
            for i in range(len(self))
        ]

    def concept_histogram(self) -> dict[str, int]:
        ids, counts = np.unique(self.concept_ids.astype(str), return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))


class Buffer:
    """Unbounded replay store: the union of every past update pool."""

    def __init__(self, dim: int):
        self.pool = Pool.empty(dim, "buffer")

    def __len__(self) -> int:
        return len(self.pool)

    def add(self, update_pool: Pool) -> "Buffer":
        if len(update_pool) == 0:
            return self
        added = Pool(update_pool.image_features, update_pool.text_features,
                     update_pool.concept_ids, "buffer")
        self.pool = Pool.concat([self.pool, added], tag="buffer")
        return self


def update_buffer(buffer: Buffer, update_pool: Pool) -> Buffer:
    """Append the finished task's update pool; the buffer never shrinks."""
    return buffer.add(update_pool)


@dataclass
class Batch:
    """One training batch with provenance counts per source pool."""

    image_features: np.ndarray
    text_features: np.ndarray
    concept_ids: np.ndarray
    pool_tags: np.ndarray
    source_counts: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.image_features.shape[0]


def largest_remainder_counts(weights: tuple[float, ...], total: int) -> list[int]:
    """Integer allocation of ``total`` proportional to ``weights``; the units
    left by flooring go to the largest fractional parts (ties to the lower
    index)."""
    raw = [w * total for w in weights]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(weights)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def batch_targets(ratios: MixtureRatios, batch_size: int, buffer_size: int) -> tuple[int, int, int]:
    """Per-source counts: largest remainder over (P, D, B), then any buffer
    shortfall is reassigned to the update pool."""
    if batch_size < 1:
        raise MixtureError("batch_size must be positive")
    n_p, n_d, n_b = largest_remainder_counts(ratios.as_tuple(), batch_size)
    if n_b > buffer_size:
        n_d += n_b - buffer_size
        n_b = buffer_size
    return n_p, n_d, n_b


def sample_batch(
    pretrain: Pool,
    update: Pool,
    buffer: Buffer | Pool,
    ratios: MixtureRatios,
    batch_size: int,
    rng: np.random.Generator,
) -> Batch:
    """Draw one mixed batch; uniform with replacement within each pool."""
    if len(update) == 0:
        raise MixtureError("update pool is empty")
    buffer_pool = buffer.pool if isinstance(buffer, Buffer) else buffer
    n_p, n_d, n_b = batch_targets(ratios, batch_size, len(buffer_pool))
    if n_p > 0 and len(pretrain) == 0:
        raise MixtureError("pretrain pool is empty but lambda_p > 0")

    parts = []
    for pool, count in ((pretrain, n_p), (update, n_d), (buffer_pool, n_b)):
        if count == 0:
            continue
        idx = rng.integers(0, len(pool), size=count)
        parts.append(pool.take(idx))
    images = np.concatenate([p[0] for p in parts])
    texts = np.concatenate([p[1] for p in parts])
    concepts = np.concatenate([p[2] for p in parts])
    tags = np.concatenate([p[3] for p in parts])
    return Batch(images, texts, concepts, tags,
                 source_counts={"pretrain": n_p, "update": n_d, "buffer": n_b})


def pool_snapshot(pools: dict[str, Pool]) -> str:
    """Per-pool sample counts and concept histograms as JSON text."""
    payload = {
        name: {"size": len(pool), "concepts": pool.concept_histogram()}
        for name, pool in pools.items()
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def save_pool_snapshot(pools: dict[str, Pool], path: str | Path) -> None:
    Path(path).write_text(pool_snapshot(pools))
