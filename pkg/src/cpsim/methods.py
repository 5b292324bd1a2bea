"""Update-strategy adapters over the toy model.

Each method exposes the same three surfaces the training loop needs: a
trainable view (mask over base parameters plus any adapter factors), an
extra loss term (EWC / SI penalties), and end-of-task hooks (weight merging,
adapter absorption, Fisher/importance bookkeeping).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .mixture import Pool

KINDS = (
    "full-ft", "locked-image", "locked-text",
    "lora", "vera", "dora", "bitfit", "lnfit",
    "ewc", "si",
    "merge-ema", "merge-ft", "merge-zs",
)
LOW_RANK_KINDS = ("lora", "vera", "dora")
MERGE_KINDS = ("merge-ema", "merge-ft", "merge-zs")
W_MERGE_PRESETS = (0.85, 0.9, 0.95)


class MethodError(ValueError):
    """Unknown kind, bad hyperparameters, or inconsistent state shapes."""


@dataclass(frozen=True)
class MethodConfig:
    """Hyperparameters for one update strategy."""

    kind: str
    rank: int = 4
    lambda_ewc: float = 100.0
    c_si: float = 0.1
    zeta_si: float = 1e-3
    w_merge: float = 0.9
    fisher_batches: int = 10

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise MethodError(f"unknown method kind {self.kind!r}")
        if self.kind in LOW_RANK_KINDS and self.rank < 1:
            raise MethodError("rank must be >= 1")
        # w_merge = 1 is permitted as the degenerate frozen-model merge.
        if not 0.0 < self.w_merge <= 1.0:
            raise MethodError(f"w_merge must lie in (0, 1], got {self.w_merge}")
        if self.zeta_si <= 0:
            raise MethodError("zeta_si must be positive")
        if self.lambda_ewc < 0 or self.c_si < 0:
            raise MethodError("penalty weights must be non-negative")
        if self.fisher_batches < 1:
            raise MethodError("fisher_batches must be >= 1")


# ---------------------------------------------------------------------------
# reparameterizations
# ---------------------------------------------------------------------------

def _column_norms(W: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(W * W, axis=0))


def init_factor_state(kind: str, W0: np.ndarray, rank: int,
                      rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh adapter factors for one tower; effective weight equals W0."""
    d_emb, d_in = W0.shape
    a_scale = d_in ** -0.5
    if kind == "lora":
        return {"B": np.zeros((d_emb, rank)), "A": rng.normal(0.0, a_scale, (rank, d_in))}
    if kind == "vera":
        return {
            "B": rng.normal(0.0, rank ** -0.5, (d_emb, rank)),
            "A": rng.normal(0.0, a_scale, (rank, d_in)),
            "lam_b": np.zeros(d_emb),
            "lam_a": np.ones(rank),
        }
    if kind == "dora":
        return {
            "B": np.zeros((d_emb, rank)),
            "A": rng.normal(0.0, a_scale, (rank, d_in)),
            "m": _column_norms(W0),
        }
    raise MethodError(f"{kind} has no factor state")


def effective_weight(kind: str, W0: np.ndarray, state: dict[str, np.ndarray] | None) -> np.ndarray:
    """Weight matrix the forward pass sees for one tower."""
    if kind not in LOW_RANK_KINDS:
        return W0
    if not state:
        raise MethodError(f"{kind} state not initialized")
    B, A = state["B"], state["A"]
    if B.shape[0] != W0.shape[0] or A.shape[1] != W0.shape[1] or B.shape[1] != A.shape[0]:
        raise MethodError(f"factor shapes {B.shape}x{A.shape} inconsistent with W {W0.shape}")
    if kind == "lora":
        return W0 + B @ A
    if kind == "vera":
        return W0 + (state["lam_b"][:, None] * B) @ (state["lam_a"][:, None] * A)
    V = W0 + B @ A
    return V * (state["m"] / _column_norms(V))[None, :]


def factor_gradients(kind: str, W0: np.ndarray, state: dict[str, np.ndarray],
                     gW: np.ndarray) -> dict[str, np.ndarray]:
    """Chain rule from the effective-weight gradient to the adapter factors."""
    B, A = state["B"], state["A"]
    if kind == "lora":
        return {"B": gW @ A.T, "A": B.T @ gW}
    if kind == "vera":
        Bs = state["lam_b"][:, None] * B
        As = state["lam_a"][:, None] * A
        return {
            "lam_b": np.sum(gW * (B @ As), axis=1),
            "lam_a": np.sum((Bs.T @ gW) * A, axis=1),
        }
    if kind == "dora":
        m = state["m"]
        V = W0 + B @ A
        c = _column_norms(V)
        s = np.sum(gW * V, axis=0)
        gV = gW * (m / c)[None, :] - V * (m * s / c ** 3)[None, :]
        return {"B": gV @ A.T, "A": B.T @ gV, "m": s / c}
    raise MethodError(f"{kind} has no factors")


TRAINABLE_FACTORS = {"lora": ("B", "A"), "vera": ("lam_b", "lam_a"), "dora": ("B", "A", "m")}


def absorb_lora(kind: str, params: model.ParamSet,
                states: dict[str, dict[str, np.ndarray]],
                rank: int, rng: np.random.Generator) -> None:
    """Fold adapters into the base weights and reinitialize the factors."""
    if kind not in LOW_RANK_KINDS:
        raise MethodError(f"absorb is only defined for {LOW_RANK_KINDS}")
    for tower in model.TOWERS:
        key = f"{tower}.W"
        params.tensors[key] = effective_weight(kind, params.tensors[key], states[tower])
        states[tower] = init_factor_state(kind, params.tensors[key], rank, rng)


# ---------------------------------------------------------------------------
# trainable masks
# ---------------------------------------------------------------------------

def trainable_mask(kind: str, params: model.ParamSet) -> dict[str, bool]:
    """Which base tensors receive gradient updates; log_tau always does."""
    if kind not in KINDS:
        raise MethodError(f"unknown method kind {kind!r}")
    mask = {name: False for name in model.PARAM_NAMES}
    mask["log_tau"] = True
    if kind in ("full-ft", "ewc", "si") or kind in MERGE_KINDS:
        mask.update({name: True for name in model.PARAM_NAMES})
    elif kind == "locked-image":
        mask.update({f"txt.{p}": True for p in ("W", "b", "gamma", "beta")})
    elif kind == "locked-text":
        mask.update({f"img.{p}": True for p in ("W", "b", "gamma", "beta")})
    elif kind == "bitfit":
        mask.update({"img.b": True, "txt.b": True})
    elif kind == "lnfit":
        mask.update({f"{t}.{p}": True for t in model.TOWERS for p in ("gamma", "beta")})
    # low-rank kinds train factors only; every base tensor except log_tau stays frozen
    return mask


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------

def _check_aligned(theta: dict[str, np.ndarray], other: dict[str, np.ndarray], what: str) -> None:
    for name, value in theta.items():
        if name not in other or other[name].shape != value.shape:
            raise MethodError(f"{what} misaligned at {name}")


def ewc_penalty(theta: dict[str, np.ndarray], anchor: dict[str, np.ndarray],
                fisher: dict[str, np.ndarray], lam: float) -> float:
    """(lam/2) * sum_k F_k (theta_k - anchor_k)^2, added to the loss."""
    _check_aligned(theta, anchor, "anchor")
    _check_aligned(theta, fisher, "fisher")
    total = 0.0
    for name, value in theta.items():
        diff = value - anchor[name]
        total += float(np.sum(fisher[name] * diff * diff))
    return 0.5 * lam * total


def estimate_fisher(params: model.ParamSet, pool: Pool, num_batches: int,
                    batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Diagonal Fisher estimate: mean over batches of squared gradients of
    the plain contrastive loss."""
    if len(pool) == 0:
        raise MethodError("cannot estimate fisher on an empty pool")
    acc = {name: np.zeros_like(t) for name, t in params.tensors.items()}
    for _ in range(num_batches):
        idx = rng.integers(0, len(pool), size=batch_size)
        _, grads = model.grad(params, pool.image_features[idx], pool.text_features[idx])
        for name in acc:
            acc[name] += grads[name] * grads[name]
    for name in acc:
        acc[name] /= num_batches
    return acc


def rolling_fisher(old: dict[str, np.ndarray] | None,
                   new: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Across-task rolling average of Fisher estimates."""
    if old is None:
        return new
    _check_aligned(new, old, "fisher")
    return {name: 0.5 * (old[name] + new[name]) for name in new}


def si_accumulate(omega: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                  delta: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Path-integral update omega_k += -g_k * dtheta_k (positive when the
    step reduced the loss)."""
    _check_aligned(omega, grads, "grads")
    _check_aligned(omega, delta, "delta")
    for name in omega:
        omega[name] -= grads[name] * delta[name]
    return omega


def si_fold_task(omega: dict[str, np.ndarray], start: dict[str, np.ndarray],
                 end: dict[str, np.ndarray], zeta: float) -> dict[str, np.ndarray]:
    """Per-parameter importance contribution of one finished task."""
    if zeta <= 0:
        raise MethodError("zeta must be positive")
    out = {}
    for name in omega:
        diff = end[name] - start[name]
        out[name] = omega[name] / (diff * diff + zeta)
    return out


def si_penalty(theta: dict[str, np.ndarray], anchor: dict[str, np.ndarray],
               importance: dict[str, np.ndarray], c: float) -> float:
    """c * sum_k Omega_k (anchor_k - theta_k)^2 with accumulated importance."""
    if anchor is None:
        raise MethodError("si penalty needs an end-of-task snapshot")
    _check_aligned(theta, anchor, "anchor")
    _check_aligned(theta, importance, "importance")
    total = 0.0
    for name, value in theta.items():
        diff = anchor[name] - value
        total += float(np.sum(importance[name] * diff * diff))
    return c * total


# ---------------------------------------------------------------------------
# merging
# ---------------------------------------------------------------------------

def merge_end_of_task(kind: str, theta0: model.ParamSet, theta_prev: model.ParamSet,
                      theta_tuned: model.ParamSet, w: float) -> model.ParamSet:
    """Weight-space interpolation at a task boundary.

    EMA and ZS keep w of the previously merged weights; FT keeps w of the
    original pretraining weights.  (They differ further in which weights the
    task was tuned from: EMA/FT tune the merged model, ZS tunes theta0.)
    """
    if kind not in MERGE_KINDS:
        raise MethodError(f"{kind} is not a merging method")
    if not 0.0 <= w <= 1.0:
        raise MethodError(f"w must lie in [0, 1], got {w}")
    old = theta0 if kind == "merge-ft" else theta_prev
    out = {}
    for name, tuned in theta_tuned.tensors.items():
        ref = old.tensors[name]
        if ref.shape != tuned.shape:
            raise MethodError(f"merge shape mismatch at {name}")
        out[name] = w * ref + (1.0 - w) * tuned
    return model.ParamSet(out)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

class UpdateMethod:
    """Stateful adapter driven by the engine; also pluggable into model.grad."""

    def __init__(self, config: MethodConfig, params: model.ParamSet,
                 rng: np.random.Generator):
        self.config = config
        self.kind = config.kind
        self.rng = rng
        self.mask = trainable_mask(self.kind, params)
        self.factors: dict[str, dict[str, np.ndarray]] = {}
        if self.kind in LOW_RANK_KINDS:
            for tower in model.TOWERS:
                self.factors[tower] = init_factor_state(
                    self.kind, params.tensors[f"{tower}.W"], config.rank, rng)
        self.fisher: dict[str, np.ndarray] | None = None
        self.ewc_anchor: dict[str, np.ndarray] | None = None
        self.si_omega: dict[str, np.ndarray] | None = None
        self.si_importance: dict[str, np.ndarray] | None = None
        self.si_anchor: dict[str, np.ndarray] | None = None
        self._si_task_start: dict[str, np.ndarray] | None = None
        if self.kind == "si":
            self.si_importance = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    # -- hooks consumed by model.grad ------------------------------------

    def effective_weights(self, params: model.ParamSet) -> tuple[np.ndarray, np.ndarray]:
        if self.kind in LOW_RANK_KINDS:
            return tuple(
                effective_weight(self.kind, params.tensors[f"{t}.W"], self.factors[t])
                for t in model.TOWERS
            )
        return params.tensors["img.W"], params.tensors["txt.W"]

    def penalty_value(self, params: model.ParamSet) -> float:
        return self.penalty_grads(params)[0]

    def penalty_grads(self, params: model.ParamSet):
        """(penalty, gradient contributions on base tensors)."""
        theta = params.tensors
        if self.kind == "ewc" and self.config.lambda_ewc > 0 and self.fisher is not None:
            value = ewc_penalty(theta, self.ewc_anchor, self.fisher, self.config.lambda_ewc)
            grads = {
                name: self.config.lambda_ewc * self.fisher[name] * (theta[name] - self.ewc_anchor[name])
                for name in theta
            }
            return value, grads
        if self.kind == "si" and self.config.c_si > 0 and self.si_anchor is not None:
            value = si_penalty(theta, self.si_anchor, self.si_importance, self.config.c_si)
            grads = {
                name: 2.0 * self.config.c_si * self.si_importance[name] * (theta[name] - self.si_anchor[name])
                for name in theta
            }
            return value, grads
        return 0.0, {}

    def map_gradients(self, params: model.ParamSet,
                      grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {
            name: grads[name] if self.mask[name] else np.zeros_like(params.tensors[name])
            for name in model.PARAM_NAMES
        }
        if self.kind in LOW_RANK_KINDS:
            for tower in model.TOWERS:
                fgrads = factor_gradients(self.kind, params.tensors[f"{tower}.W"],
                                          self.factors[tower], grads[f"{tower}.W"])
                for fname in TRAINABLE_FACTORS[self.kind]:
                    out[f"{tower}.{self.kind}.{fname}"] = fgrads[fname]
        return out

    # -- trainable view ----------------------------------------------------

    def trainable_variables(self, params: model.ParamSet) -> dict[str, np.ndarray]:
        """Live references to every tensor the optimizer should update."""
        out = {name: params.tensors[name] for name in model.PARAM_NAMES if self.mask[name]}
        if self.kind in LOW_RANK_KINDS:
            for tower in model.TOWERS:
                for fname in TRAINABLE_FACTORS[self.kind]:
                    out[f"{tower}.{self.kind}.{fname}"] = self.factors[tower][fname]
        return out

    # -- engine hooks --------------------------------------------------------

    def begin_task(self, current: model.ParamSet, theta0: model.ParamSet) -> model.ParamSet:
        """Weights the task trains from (a private copy)."""
        start = theta0.copy() if self.kind == "merge-zs" else current.copy()
        if self.kind == "si":
            self.si_omega = {k: np.zeros_like(v) for k, v in start.tensors.items()}
            self._si_task_start = {k: v.copy() for k, v in start.tensors.items()}
        return start

    def on_step(self, grads: dict[str, np.ndarray], delta: dict[str, np.ndarray]) -> None:
        if self.kind == "si":
            base_grads = {k: grads[k] for k in self.si_omega}
            base_delta = {k: delta[k] for k in self.si_omega}
            si_accumulate(self.si_omega, base_grads, base_delta)

    @property
    def tracks_steps(self) -> bool:
        return self.kind == "si"

    def end_task(self, tuned: model.ParamSet, prev: model.ParamSet,
                 theta0: model.ParamSet, update_pool: Pool,
                 batch_size: int) -> model.ParamSet:
        """Merge/absorb and refresh regularizer state; returns the weights
        carried into the next task."""
        if self.kind in MERGE_KINDS:
            merged = merge_end_of_task(self.kind, theta0, prev, tuned, self.config.w_merge)
        elif self.kind in LOW_RANK_KINDS:
            absorb_lora(self.kind, tuned, self.factors, self.config.rank, self.rng)
            merged = tuned
        else:
            merged = tuned
        if self.kind == "ewc":
            batch_fisher = estimate_fisher(merged, update_pool, self.config.fisher_batches,
                                           batch_size, self.rng)
            self.fisher = rolling_fisher(self.fisher, batch_fisher)
            self.ewc_anchor = {k: v.copy() for k, v in merged.tensors.items()}
        if self.kind == "si":
            end = merged.tensors
            contribution = si_fold_task(self.si_omega, self._si_task_start, end,
                                        self.config.zeta_si)
            for name in self.si_importance:
                self.si_importance[name] += contribution[name]
            self.si_anchor = {k: v.copy() for k, v in end.items()}
        return merged
