"""Synthetic concept universe and pretrained base model.

Concepts live in clusters of nearby prototypes (the toy analogue of related
classes inside one dataset); image and text prototypes of a concept sit close
together, and samples add per-concept Gaussian noise so concepts differ in
difficulty.  Adaptation and held-out concepts occupy disjoint clusters.  The
pretraining pool is drawn from the held-out concepts' distributions and the
base model is pretrained on it, so continual updates on adaptation concepts
can erode zero-shot accuracy on the held-out set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from .mixture import Pool
from .schedules import ScheduleParams, cosine_lr
from .streams import Concept

# pretraining-pool variants: fraction of held-out concepts covered and a
# noise multiplier, emulating pools of different curation quality
POOL_PRESETS = {
    "reference": {"coverage": 1.0, "noise_scale": 1.5},
    "broad": {"coverage": 1.0, "noise_scale": 1.0},
    "narrow": {"coverage": 0.5, "noise_scale": 1.0},
    "noisy": {"coverage": 1.0, "noise_scale": 2.5},
}


class SynthError(ValueError):
    """Inconsistent generator configuration."""


@dataclass(frozen=True)
class DataConfig:
    """Shape and noise profile of the synthetic instance."""

    n_adapt: int = 40
    n_heldout: int = 20
    d_in: int = model.D_IN
    d_emb: int = model.D_EMB
    concepts_per_cluster: int = 5
    cluster_spread: float = 0.45
    text_offset: float = 0.1
    noise_min: float = 0.15
    noise_max: float = 0.45
    samples_per_concept: int = 64
    eval_per_concept: int = 20
    pretrain_pool: str = "reference"
    pretrain_size: int = 2048
    pretrain_steps: int = 300
    pretrain_batch: int = 128
    pretrain_lr: float = 1e-3
    pretrain_tau: float = 0.07

    def __post_init__(self) -> None:
        if self.n_adapt < 1 or self.n_heldout < 1:
            raise SynthError("need at least one adaptation and one held-out concept")
        if self.pretrain_pool not in POOL_PRESETS:
            raise SynthError(f"unknown pretrain pool {self.pretrain_pool!r}; have {sorted(POOL_PRESETS)}")
        if not 0 < self.noise_min <= self.noise_max:
            raise SynthError("need 0 < noise_min <= noise_max")
        if self.samples_per_concept < 1 or self.eval_per_concept < 1:
            raise SynthError("sample counts must be positive")


@dataclass
class ToyInstance:
    """Everything one continual run needs: concepts, pools, evals, base model."""

    config: DataConfig
    concepts: list[Concept]
    heldout_ids: list[str]
    image_protos: dict[str, np.ndarray]
    text_protos: dict[str, np.ndarray]
    concept_pools: dict[str, Pool]
    eval_adapt: tuple[np.ndarray, list[str]]
    eval_heldout: tuple[np.ndarray, list[str]]
    pretrain_pool: Pool
    base_params: model.ParamSet

    @property
    def adapt_ids(self) -> list[str]:
        return [c.id for c in self.concepts]

    def adapt_prototypes(self) -> dict[str, np.ndarray]:
        return {cid: self.text_protos[cid] for cid in self.adapt_ids}

    def heldout_prototypes(self) -> dict[str, np.ndarray]:
        return {cid: self.text_protos[cid] for cid in self.heldout_ids}

    def task_pool(self, concept_ids) -> Pool:
        pools = [self.concept_pools[cid] for cid in concept_ids]
        return Pool.concat(pools, tag="update")

    def similarity_matrix(self, ids: list[str]) -> np.ndarray:
        """Pairwise cosine similarity of text prototypes under the base model."""
        embs = model.encode(self.base_params, "txt", np.stack([self.text_protos[c] for c in ids]))
        sim = embs @ embs.T
        sim = 0.5 * (sim + sim.T)
        return np.clip(sim, -1.0, 1.0)


def _draw_prototypes(rng: np.random.Generator, count: int, prefix: str,
                     cfg: DataConfig) -> tuple[list[str], dict, dict, list[int]]:
    n_clusters = max(1, math.ceil(count / cfg.concepts_per_cluster))
    centers = rng.normal(size=(n_clusters, cfg.d_in))
    ids, image_protos, text_protos, clusters = [], {}, {}, []
    for i in range(count):
        cid = f"{prefix}{i:03d}"
        cluster = i // cfg.concepts_per_cluster
        u = centers[cluster] + cfg.cluster_spread * rng.normal(size=cfg.d_in)
        v = u + cfg.text_offset * rng.normal(size=cfg.d_in)
        ids.append(cid)
        image_protos[cid] = u
        text_protos[cid] = v
        clusters.append(cluster)
    return ids, image_protos, text_protos, clusters


def _draw_pairs(rng, u, v, sigma, count, d_in):
    Xi = u + sigma * rng.normal(size=(count, d_in))
    Xt = v + sigma * rng.normal(size=(count, d_in))
    return Xi, Xt


def _pretrain(params: model.ParamSet, pool: Pool, cfg: DataConfig,
              rng: np.random.Generator) -> None:
    steps = cfg.pretrain_steps
    if steps == 0:
        return
    if steps < 2:
        raise SynthError("pretrain_steps must be 0 or >= 2")
    variables = dict(params.tensors)
    opt = model.OptimizerState.for_variables(variables)
    sched = ScheduleParams(0.0, cfg.pretrain_lr, max(1, steps // 10), steps)
    for n in range(steps):
        idx = rng.integers(0, len(pool), size=cfg.pretrain_batch)
        _, grads = model.grad(params, pool.image_features[idx], pool.text_features[idx])
        model.optimizer_step(variables, grads, opt, cosine_lr(n, sched), clip_norm=1.0)
        model.clamp_temperature(params)


def build_instance(cfg: DataConfig, rng: np.random.Generator) -> ToyInstance:
    """Generate concepts, pools, eval sets, and the pretrained base model."""
    adapt_ids, img_p, txt_p, clusters = _draw_prototypes(rng, cfg.n_adapt, "a", cfg)
    held_ids, img_h, txt_h, _ = _draw_prototypes(rng, cfg.n_heldout, "h", cfg)
    img_p.update(img_h)
    txt_p.update(txt_h)

    # ordering metadata: dataset = cluster block, year per dataset, Zipf-ish
    # frequencies over a random rank permutation, difficulty filled later
    n_datasets = max(c for c in clusters) + 1
    years = rng.integers(2008, 2023, size=n_datasets)
    ranks = rng.permutation(cfg.n_adapt)
    sigmas = rng.uniform(cfg.noise_min, cfg.noise_max, size=cfg.n_adapt)
    concepts = []
    for i, cid in enumerate(adapt_ids):
        concepts.append(Concept(
            id=cid,
            dataset_id=f"ds{clusters[i]:02d}",
            year=int(years[clusters[i]]),
            frequency=float(round(10000.0 / (1 + ranks[i]) ** 1.1, 3)),
        ))

    concept_pools: dict[str, Pool] = {}
    eval_x, eval_labels = [], []
    for i, cid in enumerate(adapt_ids):
        Xi, Xt = _draw_pairs(rng, img_p[cid], txt_p[cid], sigmas[i],
                             cfg.samples_per_concept, cfg.d_in)
        ids = np.full(cfg.samples_per_concept, cid, dtype=object)
        concept_pools[cid] = Pool(Xi, Xt, ids, "update")
        Ei, _ = _draw_pairs(rng, img_p[cid], txt_p[cid], sigmas[i],
                            cfg.eval_per_concept, cfg.d_in)
        eval_x.append(Ei)
        eval_labels.extend([cid] * cfg.eval_per_concept)
    eval_adapt = (np.concatenate(eval_x), eval_labels)

    held_sigmas = rng.uniform(cfg.noise_min, cfg.noise_max, size=cfg.n_heldout)
    eval_x, eval_labels = [], []
    for i, cid in enumerate(held_ids):
        Ei, _ = _draw_pairs(rng, img_p[cid], txt_p[cid], held_sigmas[i],
                            cfg.eval_per_concept, cfg.d_in)
        eval_x.append(Ei)
        eval_labels.extend([cid] * cfg.eval_per_concept)
    eval_heldout = (np.concatenate(eval_x), eval_labels)

    preset = POOL_PRESETS[cfg.pretrain_pool]
    covered = held_ids[: max(1, math.ceil(preset["coverage"] * cfg.n_heldout))]
    per_concept = max(1, cfg.pretrain_size // len(covered))
    pre_x, pre_t, pre_ids = [], [], []
    for i, cid in enumerate(covered):
        sigma = held_sigmas[held_ids.index(cid)] * preset["noise_scale"]
        Xi, Xt = _draw_pairs(rng, img_p[cid], txt_p[cid], sigma, per_concept, cfg.d_in)
        pre_x.append(Xi)
        pre_t.append(Xt)
        pre_ids.extend([cid] * per_concept)
    pretrain_pool = Pool(np.concatenate(pre_x), np.concatenate(pre_t),
                         np.array(pre_ids, dtype=object), "pretrain")

    params = model.ParamSet.init(rng, cfg.d_in, cfg.d_emb, tau=cfg.pretrain_tau)
    _pretrain(params, pretrain_pool, cfg, rng)

    return ToyInstance(
        config=cfg,
        concepts=concepts,
        heldout_ids=held_ids,
        image_protos=img_p,
        text_protos=txt_p,
        concept_pools=concept_pools,
        eval_adapt=eval_adapt,
        eval_heldout=eval_heldout,
        pretrain_pool=pretrain_pool,
        base_params=params,
    )
