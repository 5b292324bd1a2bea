"""Toy two-tower contrastive model with analytic gradients.

Each tower is a linear projection followed by an elementwise scale/shift and
L2 normalization; the towers share a learnable softmax temperature.  The
module provides the symmetric contrastive loss, exact gradients (optionally
routed through a parameter-efficient update method), an AdamW step with
global-norm gradient clipping, and zero-shot nearest-prototype evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels

D_IN = 32
D_EMB = 16
TAU_MIN = 0.01
TOWERS = ("img", "txt")
PARAM_NAMES = tuple(
    f"{tower}.{part}" for tower in TOWERS for part in ("W", "b", "gamma", "beta")
) + ("log_tau",)


class ModelError(RuntimeError):
    """Non-finite losses/gradients or inconsistent model inputs."""


@dataclass
class ParamSet:
    """Named parameter tensors: per-tower W/b/gamma/beta plus log_tau.

    ``log_tau`` is stored as a shape-(1,) array so every parameter is an
    ndarray the optimizer can update in place.
    """

    tensors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        missing = set(PARAM_NAMES) - set(self.tensors)
        if missing:
            raise ModelError(f"missing parameters: {sorted(missing)}")
        for name, value in self.tensors.items():
            if not np.all(np.isfinite(value)):
                raise ModelError(f"non-finite entries in {name}")

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int = D_IN, d_emb: int = D_EMB,
             tau: float = 0.07) -> "ParamSet":
        if tau <= 0:
            raise ModelError("tau must be positive")
        tensors: dict[str, np.ndarray] = {}
        for tower in TOWERS:
            tensors[f"{tower}.W"] = rng.normal(0.0, d_in ** -0.5, size=(d_emb, d_in))
            tensors[f"{tower}.b"] = np.zeros(d_emb)
            tensors[f"{tower}.gamma"] = np.ones(d_emb)
            tensors[f"{tower}.beta"] = np.zeros(d_emb)
        tensors["log_tau"] = np.array([math.log(tau)])
        return cls(tensors)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()})

    @property
    def d_in(self) -> int:
        return self.tensors["img.W"].shape[1]

    @property
    def d_emb(self) -> int:
        return self.tensors["img.W"].shape[0]

    @property
    def tau(self) -> float:
        return float(np.exp(self.tensors["log_tau"][0]))

    def set_tau(self, tau: float) -> None:
        if tau <= 0:
            raise ModelError("tau must be positive")
        self.tensors["log_tau"][0] = math.log(tau)


def save_params(params: ParamSet, path: str | Path) -> None:
    """Checkpoint to .npz (named float64 tensors; bit-exact round trip)."""
    np.savez(path, **params.tensors)


def load_params(path: str | Path) -> ParamSet:
    with np.load(path) as data:
        return ParamSet({name: data[name].copy() for name in data.files})


def encode(params: ParamSet, tower: str, x: np.ndarray) -> np.ndarray:
    """Unit-norm embedding(s) of feature vector(s) under one tower."""
    if tower not in TOWERS:
        raise ModelError(f"unknown tower {tower!r}")
    t = params.tensors
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape[1] != params.d_in:
        raise ModelError(f"expected d_in={params.d_in}, got {X.shape[1]}")
    E = _kernels.encode(X, t[f"{tower}.W"], t[f"{tower}.b"],
                        t[f"{tower}.gamma"], t[f"{tower}.beta"])
    return E[0] if np.ndim(x) == 1 else E


def clip_loss(img_embs: np.ndarray, txt_embs: np.ndarray, tau: float):
    """Symmetric contrastive cross-entropy over the cosine-similarity matrix.

    Returns (mean loss, per-sample losses); per-sample losses average the
    image-to-text and text-to-image terms of the matched pair.
    """
    img_embs = np.atleast_2d(img_embs)
    txt_embs = np.atleast_2d(txt_embs)
    if img_embs.shape != txt_embs.shape:
        raise ModelError(f"batch shape mismatch: {img_embs.shape} vs {txt_embs.shape}")
    if tau <= 0:
        raise ModelError("tau must be positive")
    n = img_embs.shape[0]
    L = (img_embs @ txt_embs.T) / tau
    Pr = L - L.max(axis=1)[:, None]
    np.exp(Pr, out=Pr)
    Pr /= Pr.sum(axis=1)[:, None]
    Pc = L - L.max(axis=0)[None, :]
    np.exp(Pc, out=Pc)
    Pc /= Pc.sum(axis=0)[None, :]
    diag = np.arange(n)
    per_sample = -0.5 * (np.log(Pr[diag, diag]) + np.log(Pc[diag, diag]))
    return float(per_sample.mean()), per_sample


def _effective_towers(params: ParamSet, method) -> tuple[np.ndarray, np.ndarray]:
    if method is None:
        return params.tensors["img.W"], params.tensors["txt.W"]
    return method.effective_weights(params)


def batch_loss(params: ParamSet, Xi: np.ndarray, Xt: np.ndarray, method=None):
    """Total objective (contrastive + any method penalty) on raw features."""
    t = params.tensors
    Wi, Wt = _effective_towers(params, method)
    loss, per_sample = _kernels.forward(
        Xi, Xt, Wi, t["img.b"], t["img.gamma"], t["img.beta"],
        Wt, t["txt.b"], t["txt.gamma"], t["txt.beta"], t["log_tau"][0])
    if method is not None:
        loss += method.penalty_value(params)
    return loss, per_sample


def grad(params: ParamSet, Xi: np.ndarray, Xt: np.ndarray, method=None):
    """Exact gradient of the total objective w.r.t. every trainable tensor.

    With ``method`` set, gradients are chained through its effective weights,
    its penalty terms are added, and frozen tensors come back as zeros; the
    result covers base parameters plus any adapter factors.
    """
    if Xi.shape[0] == 0:
        raise ModelError("empty batch")
    if Xi.shape[0] != Xt.shape[0]:
        raise ModelError("image/text batch sizes differ")
    t = params.tensors
    Wi, Wt = _effective_towers(params, method)
    out = _kernels.forward_backward(
        Xi, Xt, Wi, t["img.b"], t["img.gamma"], t["img.beta"],
        Wt, t["txt.b"], t["txt.gamma"], t["txt.beta"], t["log_tau"][0])
    loss = out[0]
    grads = {
        "img.W": out[2], "img.b": out[3], "img.gamma": out[4], "img.beta": out[5],
        "txt.W": out[6], "txt.b": out[7], "txt.gamma": out[8], "txt.beta": out[9],
        "log_tau": np.array([out[10]]),
    }
    if method is not None:
        pen, pen_grads = method.penalty_grads(params)
        loss += pen
        for name, extra in pen_grads.items():
            grads[name] = grads[name] + extra
        grads = method.map_gradients(params, grads)
    if not math.isfinite(loss):
        raise ModelError(
            f"non-finite loss {loss} (tau={params.tau:.3g}, "
            f"|Xi|={np.abs(Xi).max():.3g}, |Xt|={np.abs(Xt).max():.3g})")
    return loss, grads


@dataclass
class OptimizerState:
    """AdamW moment accumulators for a named collection of tensors."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def for_variables(cls, variables: dict[str, np.ndarray], **hyper) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(v) for k, v in variables.items()},
            v={k: np.zeros_like(v) for k, v in variables.items()},
            **hyper,
        )


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def optimizer_step(
    variables: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    clip_norm: float | None = 1.0,
) -> dict[str, np.ndarray]:
    """Global-norm clipping followed by an in-place AdamW update.

    The temperature (``log_tau``) is excluded from weight decay.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient for {name}")
    scale = 1.0
    if clip_norm is not None and clip_norm > 0:
        norm = global_grad_norm({k: grads[k] for k in variables})
        if norm > clip_norm:
            scale = clip_norm / norm
    state.step += 1
    for name, p in variables.items():
        g = np.ascontiguousarray(grads[name] * scale)
        wd = 0.0 if name == "log_tau" else state.weight_decay
        _kernels.adamw_update(p, g, state.m[name], state.v[name], state.step,
                              lr, state.beta1, state.beta2, state.eps, wd)
    return variables


def clamp_temperature(params: ParamSet, min_tau: float = TAU_MIN, enabled: bool = True) -> ParamSet:
    """Clip tau from below (training-stability guard); no-op when disabled."""
    if enabled and params.tau < min_tau:
        params.tensors["log_tau"][0] = math.log(min_tau)
    return params


def zero_shot_eval(
    params: ParamSet,
    prototypes: dict[str, np.ndarray],
    images: np.ndarray,
    labels: Sequence[str],
) -> float:
    """Nearest-prototype classification accuracy.

    Prototype text vectors are encoded by the text tower, images by the image
    tower; prediction is the argmax cosine similarity, with ties going to the
    lexicographically lower concept id.
    """
    if len(labels) != images.shape[0]:
        raise ModelError("labels/images length mismatch")
    missing = sorted(set(labels) - set(prototypes))
    if missing:
        raise ModelError(f"missing prototypes for {missing}")
    ids = sorted(prototypes)
    proto_embs = encode(params, "txt", np.stack([prototypes[c] for c in ids]))
    img_embs = encode(params, "img", images)
    pred = np.argmax(img_embs @ proto_embs.T, axis=1)
    index = {cid: i for i, cid in enumerate(ids)}
    target = np.array([index[label] for label in labels])
    return float(np.mean(pred == target))
